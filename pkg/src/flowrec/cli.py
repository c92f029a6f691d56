"""Command line entry point.

Commands: gen-synth, prep-movielens, train, reuse, eval, gradcheck,
report-masks. Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numeric failure. All file outputs are byte-identical across repeated
runs with the same inputs and seed; wall-clock timestamps appear only in
the per-run log.txt.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    DataSchema,
    SplitSpec,
    Vocab,
    derive_movielens,
    gen_synthetic,
    load_csv,
    load_movielens,
    read_csv_rows,
    encode_rows,
    split,
    synthetic_schema,
    write_rows_csv,
)
from .errors import ConfigError, DataError, FlowRecError, NumericError, UndefinedMetricError
from .metrics import cell_report, mask_report, write_cell_report, write_mask_report
from .training import (
    RunConfig,
    evaluate_scores,
    hard_gate_values,
    micro_gradcheck,
    reuse_stage,
    train_stage,
)

logger = logging.getLogger("flowrec")

GRADCHECK_THRESHOLD = 1e-5


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors by default; this package uses 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    p = _Parser(prog="flowrec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="generate a synthetic dataset with known structure")
    g.add_argument("--out", required=True, help="output directory for data.csv and truth.json")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenarios", type=int, default=3)
    g.add_argument("--tasks", type=int, default=2)
    g.add_argument("--fields", type=int, default=8)
    g.add_argument("--rows", type=int, default=10000, help="rows per scenario")
    g.add_argument("--conflict", action="store_true", help="plant a scenario/task conflict")
    g.add_argument("--values-per-field", type=int, default=16)
    g.set_defaults(func=cmd_gen_synth)

    m = sub.add_parser("prep-movielens", help="derive the two-task CSV from MovieLens-1M")
    m.add_argument("--ml-dir", required=True, help="directory holding ratings.dat and users.dat")
    m.add_argument("--out", required=True, help="output CSV path")
    m.add_argument("--age-edges", default="25,35", help="two increasing age cut points")
    m.set_defaults(func=cmd_prep_movielens)

    t = sub.add_parser("train", help="stage 1: joint search over model and gates")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="override the config's data path")
    t.add_argument("--out", help="override the config's output directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reuse", help="stage 2: retrain under the frozen gates")
    r.add_argument("--config", required=True)
    r.add_argument("--ckpt-dir", required=True, help="stage-1 output directory")
    r.add_argument("--data", help="override the data path")
    r.set_defaults(func=cmd_reuse)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a data split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="override the data path recorded in the checkpoint")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--gates", choices=("hard", "soft", "off"), default="hard")
    e.add_argument("--tau", type=float, help="temperature for --gates soft")
    e.add_argument("--out", help="directory for cell_report.csv (default: run dir)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check on a micro model")
    c.add_argument("--eps", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    k = sub.add_parser("report-masks", help="per-cell prune ratios of the four flows")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--data", help="override the data path recorded in the checkpoint")
    k.add_argument("--split", choices=("train", "val", "test"), default="test")
    k.add_argument("--out", help="directory for mask_report.csv (default: run dir)")
    k.set_defaults(func=cmd_report_masks)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if not logger.handlers:
        console = logging.StreamHandler(sys.stderr)
        console.setLevel(logging.WARNING)
        console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        logger.addHandler(console)
        logger.setLevel(logging.INFO)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, UndefinedMetricError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except FlowRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _attach_file_log(out_dir: Path) -> None:
    path = out_dir / "log.txt"
    for h in logger.handlers:
        if isinstance(h, logging.FileHandler) and Path(h.baseFilename) == path.resolve():
            return
    handler = logging.FileHandler(path)
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(path: str) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config JSON must be a flat object")
    return RunConfig.from_dict(raw)


def _warn_off_grid(cfg: RunConfig) -> None:
    for w in cfg.validate():
        logger.warning("config: %s", w)


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, truth = gen_synthetic(
        num_scenarios=args.scenarios,
        num_tasks=args.tasks,
        num_fields=args.fields,
        rows_per_scenario=args.rows,
        conflict=args.conflict,
        seed=args.seed,
        values_per_field=args.values_per_field,
    )
    schema = synthetic_schema(args.tasks, args.fields)
    n = write_rows_csv(out / "data.csv", schema, rows)
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    print(f"gen-synth: wrote {n} rows across {args.scenarios} scenarios to {out / 'data.csv'}")
    return 0


def cmd_prep_movielens(args) -> int:
    try:
        lo, hi = (int(x) for x in args.age_edges.split(","))
    except ValueError:
        raise ConfigError(f"--age-edges must be two integers, got {args.age_edges!r}")
    rows, rejects = derive_movielens(load_movielens(args.ml_dir), age_edges=(lo, hi))
    if rejects:
        logger.warning("prep-movielens: rejected %d rows, first: %s", len(rejects), rejects[0])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from .data import MOVIELENS_SCHEMA

    n = write_rows_csv(out, MOVIELENS_SCHEMA, rows)
    counts = np.zeros(3, dtype=np.int64)
    for r in rows:
        counts[int(r["scenario"])] += 1
    shares = ", ".join(f"s{k}={100.0 * c / max(n, 1):.2f}%" for k, c in enumerate(counts))
    print(f"prep-movielens: wrote {n} rows to {out} ({shares})")
    return 0


def _check_data_fields(data_path: str, expected: tuple[str, ...] | None) -> None:
    """Fail early when a CSV's feature columns differ from a checkpoint's."""
    if not expected:
        return
    import csv as _csv

    path = Path(data_path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        header = next(_csv.reader(fh), None)
    if header is None:
        raise DataError(f"data file {path} is empty")
    fields = DataSchema.from_header(header).feature_columns
    if fields != tuple(expected):
        raise DataError(
            f"data fields {fields} do not match the checkpoint's {tuple(expected)}"
        )


def _prepare_datasets(cfg: RunConfig, vocab: Vocab | None = None, num_scenarios=None):
    if not cfg.data:
        raise ConfigError("no data path given (config key 'data' or --data)")
    ds, vocab, rejects = load_csv(
        cfg.data, min_frequency=cfg.min_frequency, vocab=vocab, num_scenarios=num_scenarios
    )
    if rejects:
        preview = "; ".join(f"line {ln}: {why}" for ln, why in rejects[:3])
        logger.warning("rejected %d rows (%s)", len(rejects), preview)
    if len(ds) == 0:
        raise DataError(f"no usable rows in {cfg.data}")
    parts = split(ds, SplitSpec(tuple(cfg.split_ratios), cfg.seed))
    return ds, vocab, parts


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.data:
        cfg.data = args.data
    if args.out:
        cfg.out = args.out
    _warn_off_grid(cfg)
    if not cfg.out:
        raise ConfigError("no output directory given (config key 'out' or --out)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _attach_file_log(out)
    _, vocab, (train_ds, val_ds, _test_ds) = _prepare_datasets(cfg)
    vocab.save(out / "vocab.json")
    vocab_sha = _file_sha256(out / "vocab.json")
    resolved = cfg.to_dict()
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    result = train_stage(
        train_ds, val_ds, cfg, out_dir=out,
        config_snapshot=resolved, vocab_sha256=vocab_sha,
    )
    macro = result.logs[-1].val_overall.get("macro_auc") if result.logs else None
    shown = "n/a" if macro is None else f"{macro:.6f}"
    print(f"train: {cfg.epochs} epochs done, val macro AUC {shown}, run dir {out}")
    return 0


def _load_run_checkpoint(run_dir: Path, epoch: int) -> Checkpoint:
    return load_checkpoint(run_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt")


def _vocab_for_checkpoint(ck: Checkpoint, candidates: list[Path]) -> tuple[Vocab, str]:
    for cand in candidates:
        path = cand / "vocab.json"
        if path.exists():
            vocab = Vocab.load(path)
            sha = _file_sha256(path)
            recorded = ck.manifest.get("vocab_sha256")
            if recorded and recorded != sha:
                raise DataError(
                    f"{path} does not match the vocab this checkpoint was trained with"
                )
            return vocab, sha
    raise DataError(f"vocab.json not found next to the checkpoint (tried {candidates})")


def cmd_reuse(args) -> int:
    cfg = _load_config(args.config)
    if args.data:
        cfg.data = args.data
    _warn_off_grid(cfg)
    run_dir = Path(args.ckpt_dir)
    source_epoch = cfg.reuse_source_epoch or cfg.epochs
    ck = _load_run_checkpoint(run_dir, source_epoch)
    if not cfg.data and ck.config:
        cfg.data = ck.config.get("data")
    vocab, vocab_sha = _vocab_for_checkpoint(ck, [run_dir])
    _attach_file_log(run_dir)
    if not cfg.data:
        raise ConfigError("no data path given (config key 'data' or --data)")
    _check_data_fields(cfg.data, ck.field_names)
    K = ck.model.dims.num_scenarios
    _, _, (train_ds, val_ds, _test_ds) = _prepare_datasets(cfg, vocab=vocab, num_scenarios=K)
    resolved = cfg.to_dict()
    if cfg.no_reuse:
        save_checkpoint(
            run_dir / "final.ckpt", ck.model, ck.selector,
            epoch=0, stage="reuse", tau=cfg.anneal_final_temp,
            config=resolved, field_names=ck.field_names, vocab_sha256=vocab_sha,
        )
        print("reuse: skipped (no_reuse); stage-1 model copied to final.ckpt")
        return 0
    rewind_model = None
    if cfg.reuse_mode == "rewind":
        rewind_model = _load_run_checkpoint(run_dir, cfg.reuse_epochs).model
    result = reuse_stage(
        train_ds, val_ds, cfg, ck.selector, rewind_model=rewind_model,
        out_dir=run_dir, config_snapshot=resolved, vocab_sha256=vocab_sha,
    )
    macro = result.logs[-1].val_overall.get("macro_auc") if result.logs else None
    shown = "n/a" if macro is None else f"{macro:.6f}"
    print(f"reuse: {len(result.logs)} epochs done ({cfg.reuse_mode}), val macro AUC {shown}")
    return 0


def _eval_setup(args):
    ckpt_path = Path(args.ckpt)
    ck = load_checkpoint(ckpt_path)
    if not ck.config:
        raise DataError(f"{ckpt_path} carries no config snapshot; cannot rebuild the data")
    cfg = RunConfig.from_dict(ck.config)
    if args.data:
        cfg.data = args.data
    run_dir = ckpt_path.parent
    if run_dir.name == "checkpoints":
        run_dir = run_dir.parent
    vocab, _sha = _vocab_for_checkpoint(ck, [ckpt_path.parent, run_dir])
    if not cfg.data:
        raise ConfigError("no data path given (checkpoint config or --data)")
    _check_data_fields(cfg.data, ck.field_names)
    K = ck.model.dims.num_scenarios
    _, _, parts = _prepare_datasets(cfg, vocab=vocab, num_scenarios=K)
    part = dict(zip(("train", "val", "test"), parts))[args.split]
    out_dir = Path(args.out) if args.out else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    return ck, cfg, part, out_dir


def cmd_eval(args) -> int:
    ck, cfg, part, out_dir = _eval_setup(args)
    scores = evaluate_scores(ck.model, ck.selector, part, cfg, mode=args.gates, tau=args.tau)
    cells, overall = cell_report(scores, part.scenarios, part.labels)
    write_cell_report(out_dir / "cell_report.csv", cells, overall)

    def fmt(key: str) -> str:
        v = overall.get(key)
        return "n/a" if v is None else f"{v:.6f}"

    print(
        f"eval: split={args.split} gates={args.gates} "
        f"macro_auc={fmt('macro_auc')} pooled_auc={fmt('pooled_auc')} "
        f"macro_logloss={fmt('macro_logloss')} -> {out_dir / 'cell_report.csv'}"
    )
    return 0


def cmd_report_masks(args) -> int:
    ck, cfg, part, out_dir = _eval_setup(args)
    gates = hard_gate_values(ck.model, ck.selector, part, cfg)
    cells = mask_report(gates, part.scenarios, ck.model.dims.num_scenarios)
    write_mask_report(out_dir / "mask_report.csv", cells)
    per_flow = gates.mean(axis=(0, 1))
    shown = " ".join(f"{name}={v:.3f}" for name, v in zip(
        ("sh-sh", "sh-spec", "spec-sh", "spec-spec"), per_flow))
    print(f"report-masks: split={args.split} overall prune ratios {shown} "
          f"-> {out_dir / 'mask_report.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    if not 1e-6 <= args.eps <= 1e-3:
        raise ConfigError(f"--eps must lie in [1e-6, 1e-3], got {args.eps}")
    worst, where = micro_gradcheck(eps=args.eps)
    verdict = "PASS" if worst <= GRADCHECK_THRESHOLD else "FAIL"
    print(f"gradcheck: {verdict} worst relative error {worst:.3e} at {where} (eps={args.eps:g})")
    return 0 if worst <= GRADCHECK_THRESHOLD else 3


if __name__ == "__main__":
    sys.exit(main())
