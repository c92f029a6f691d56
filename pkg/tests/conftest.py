"""Shared helpers for the test suite."""

from flowrec.data import (
    SplitSpec,
    build_vocab,
    encode_rows,
    gen_synthetic,
    split,
    synthetic_schema,
)

# One human-readable verdict line per acceptance criterion, echoed as a
# dedicated section at the end of every pytest run that exercises them.
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)




def make_synth_splits(
    num_scenarios=2,
    num_tasks=2,
    num_fields=4,
    rows_per_scenario=300,
    values_per_field=8,
    conflict=False,
    seed=0,
    split_seed=0,
):
    """Generate planted-structure data and return (train, val, test, truth)."""
    rows, truth = gen_synthetic(
        num_scenarios=num_scenarios,
        num_tasks=num_tasks,
        num_fields=num_fields,
        rows_per_scenario=rows_per_scenario,
        conflict=conflict,
        seed=seed,
        values_per_field=values_per_field,
    )
    schema = synthetic_schema(num_tasks, num_fields)
    vocab = build_vocab(rows, schema.feature_columns)
    ds, rejects = encode_rows(rows, vocab, schema, num_scenarios=num_scenarios)
    assert not rejects
    train, val, test = split(ds, SplitSpec(seed=split_seed))
    return train, val, test, truth
