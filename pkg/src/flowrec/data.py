"""Data pipeline: CSV ingestion, vocabularies, splits, and generators.

The on-disk format is a header CSV with columns

    scenario,label_0,...,label_{M-1},<feature columns...>

where scenario is a small non-negative integer, labels are 0/1, and
feature columns hold raw categorical strings. Each feature field gets its
own vocabulary; id 0 is reserved for unseen values and dense ids start at
1 in first-appearance order, after an optional minimum-frequency filter.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class DataSchema:
    feature_columns: tuple[str, ...]
    label_columns: tuple[str, ...]
    scenario_column: str = "scenario"

    @staticmethod
    def from_header(header: Iterable[str]) -> "DataSchema":
        cols = list(header)
        if "scenario" not in cols:
            raise DataError("header is missing the 'scenario' column")
        labels = [c for c in cols if c.startswith("label_")]
        if not labels:
            raise DataError("header has no 'label_*' columns")
        try:
            indices = sorted(int(c.split("_", 1)[1]) for c in labels)
        except ValueError as exc:
            raise DataError(f"malformed label column name: {exc}") from exc
        if indices != list(range(len(labels))):
            raise DataError(f"label columns must be label_0..label_{{M-1}}, got {labels}")
        label_cols = tuple(f"label_{i}" for i in indices)
        features = tuple(c for c in cols if c != "scenario" and c not in label_cols)
        if not features:
            raise DataError("header has no feature columns")
        return DataSchema(feature_columns=features, label_columns=label_cols)

    @property
    def num_tasks(self) -> int:
        return len(self.label_columns)

    def header(self) -> list[str]:
        return [self.scenario_column, *self.label_columns, *self.feature_columns]


class Vocab:
    """Per-field categorical vocabularies with a reserved OOV id 0."""

    def __init__(self, field_maps: dict[str, dict[str, int]], min_frequency: int) -> None:
        self.field_maps = field_maps
        self.min_frequency = min_frequency

    def encode_value(self, field: str, value: str) -> int:
        m = self.field_maps.get(field)
        if m is None:
            raise DataError(f"field '{field}' is not in this vocabulary")
        return m.get(value, 0)

    def size(self, field: str) -> int:
        """Number of embedding rows for the field, including the OOV row."""
        return len(self.field_maps[field]) + 1

    def sizes(self, fields: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.size(f) for f in fields)

    def save(self, path: str | Path) -> None:
        payload = {"min_frequency": self.min_frequency, "fields": self.field_maps}
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=False))

    @staticmethod
    def load(path: str | Path) -> "Vocab":
        try:
            payload = json.loads(Path(path).read_text())
            return Vocab(payload["fields"], payload["min_frequency"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"malformed vocab file {path}: {exc}") from exc


def build_vocab(
    rows: Iterable[Mapping[str, str]],
    feature_columns: Iterable[str],
    min_frequency: int = 1,
) -> Vocab:
    """Count values per field and keep those seen >= min_frequency times.

    Dense ids are assigned from 1 in order of first appearance, so the
    mapping is independent of hashing and stable across runs.
    """
    if min_frequency < 1:
        raise ConfigError(f"min_frequency must be >= 1, got {min_frequency}")
    fields = list(feature_columns)
    counts: dict[str, dict[str, int]] = {f: {} for f in fields}
    for row in rows:
        for f in fields:
            v = row.get(f)
            if v is None:
                raise DataError(f"row is missing feature column '{f}'")
            c = counts[f]
            c[v] = c.get(v, 0) + 1
    maps: dict[str, dict[str, int]] = {}
    for f in fields:
        m: dict[str, int] = {}
        for v, c in counts[f].items():  # insertion order == first appearance
            if c >= min_frequency:
                m[v] = len(m) + 1
        maps[f] = m
    return Vocab(maps, min_frequency)


@dataclass(frozen=True)
class Instance:
    field_ids: np.ndarray  # (F,) int64, field-local dense ids
    scenario: int
    labels: np.ndarray  # (M,) float64 in {0, 1}


@dataclass(frozen=True)
class DatasetMeta:
    num_scenarios: int
    num_tasks: int
    field_names: tuple[str, ...]
    vocab_sizes: tuple[int, ...]
    scenario_counts: tuple[int, ...]

    @property
    def num_fields(self) -> int:
        return len(self.field_names)


@dataclass
class Dataset:
    field_ids: np.ndarray  # (n, F) int64
    scenarios: np.ndarray  # (n,) int64
    labels: np.ndarray  # (n, M) float64
    meta: DatasetMeta

    def __len__(self) -> int:
        return self.field_ids.shape[0]

    def instance(self, i: int) -> Instance:
        return Instance(self.field_ids[i], int(self.scenarios[i]), self.labels[i])

    def subset(self, indices: np.ndarray) -> "Dataset":
        scen = self.scenarios[indices]
        counts = tuple(
            int((scen == k).sum()) for k in range(self.meta.num_scenarios)
        )
        meta = DatasetMeta(
            self.meta.num_scenarios,
            self.meta.num_tasks,
            self.meta.field_names,
            self.meta.vocab_sizes,
            counts,
        )
        return Dataset(self.field_ids[indices], scen, self.labels[indices], meta)


def _parse_label(raw: str | None) -> float:
    if raw == "0":
        return 0.0
    if raw == "1":
        return 1.0
    raise DataError(f"label must be 0 or 1, got {raw!r}")


def encode(row: Mapping[str, str], vocab: Vocab, schema: DataSchema) -> Instance:
    """Encode one raw row; unseen or filtered values map to id 0."""
    raw_scen = row.get(schema.scenario_column)
    try:
        scen = int(raw_scen)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise DataError(f"scenario must be an integer, got {raw_scen!r}") from None
    if scen < 0:
        raise DataError(f"scenario must be non-negative, got {scen}")
    labels = np.array([_parse_label(row.get(c)) for c in schema.label_columns])
    ids = np.empty(len(schema.feature_columns), dtype=np.int64)
    for j, f in enumerate(schema.feature_columns):
        v = row.get(f)
        if v is None:
            raise DataError(f"row is missing feature column '{f}'")
        ids[j] = vocab.encode_value(f, v)
    return Instance(ids, scen, labels)


def encode_rows(
    rows: Iterable[Mapping[str, str]],
    vocab: Vocab,
    schema: DataSchema,
    num_scenarios: int | None = None,
    first_line: int = 2,
) -> tuple[Dataset, list[tuple[int, str]]]:
    """Encode an iterable of rows into dense arrays.

    Bad rows are rejected, not fatal; the second return value lists
    (line_number, reason) so callers can reconcile counts. Line numbers
    assume the iterable starts at file line ``first_line`` (2 when it
    follows a header).
    """
    ids_acc: list[np.ndarray] = []
    scen_acc: list[int] = []
    label_acc: list[np.ndarray] = []
    rejects: list[tuple[int, str]] = []
    for line, row in enumerate(rows, start=first_line):
        try:
            inst = encode(row, vocab, schema)
        except DataError as exc:
            rejects.append((line, str(exc)))
            continue
        ids_acc.append(inst.field_ids)
        scen_acc.append(inst.scenario)
        label_acc.append(inst.labels)
    n = len(ids_acc)
    F = len(schema.feature_columns)
    M = schema.num_tasks
    field_ids = (
        np.stack(ids_acc) if n else np.empty((0, F), dtype=np.int64)
    )
    scenarios = np.asarray(scen_acc, dtype=np.int64)
    labels = np.stack(label_acc) if n else np.empty((0, M))
    K = num_scenarios if num_scenarios is not None else (
        int(scenarios.max()) + 1 if n else 0
    )
    if n and int(scenarios.max()) >= K:
        raise DataError(
            f"scenario id {int(scenarios.max())} exceeds num_scenarios={K}"
        )
    counts = tuple(int((scenarios == k).sum()) for k in range(K))
    meta = DatasetMeta(
        num_scenarios=K,
        num_tasks=M,
        field_names=schema.feature_columns,
        vocab_sizes=vocab.sizes(schema.feature_columns),
        scenario_counts=counts,
    )
    return Dataset(field_ids, scenarios, labels, meta), rejects


def read_csv_rows(path: str | Path) -> tuple[DataSchema, Iterator[dict[str, str]]]:
    """Open a dataset CSV and return its schema plus a row iterator."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    handle = path.open(newline="")
    reader = csv.DictReader(handle)
    if reader.fieldnames is None:
        handle.close()
        raise DataError(f"data file {path} is empty")
    schema = DataSchema.from_header(reader.fieldnames)

    def rows() -> Iterator[dict[str, str]]:
        with handle:
            yield from reader

    return schema, rows()


def load_csv(
    path: str | Path,
    min_frequency: int = 1,
    vocab: Vocab | None = None,
    num_scenarios: int | None = None,
) -> tuple[Dataset, Vocab, list[tuple[int, str]]]:
    """Two-pass load: build (or reuse) the vocab, then encode every row."""
    schema, rows = read_csv_rows(path)
    if vocab is None:
        vocab = build_vocab(rows, schema.feature_columns, min_frequency)
        schema, rows = read_csv_rows(path)
    ds, rejects = encode_rows(rows, vocab, schema, num_scenarios=num_scenarios)
    return ds, vocab, rejects


def write_rows_csv(path: str | Path, schema: DataSchema, rows: Iterable[Mapping[str, str]]) -> int:
    header = schema.header()
    n = 0
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[c] for c in header])
            n += 1
    return n


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.ratios) != 3 or any(not 0.0 < r < 1.0 for r in self.ratios):
            raise ConfigError(f"split ratios must be three values in (0,1): {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1: {self.ratios}")


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Per-scenario shuffled train/val/test split.

    Within each scenario the rows are permuted with ``spec.seed`` and cut
    at floor(r0*n) and floor((r0+r1)*n). Scenarios with fewer than 3 rows
    go entirely to train with a warning.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 104729]))
    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for k in range(ds.meta.num_scenarios):
        idx = np.flatnonzero(ds.scenarios == k)
        n = idx.size
        perm = idx[rng.permutation(n)]
        if n < 3:
            if n:
                warnings.warn(
                    f"scenario {k} has only {n} instance(s); all assigned to train",
                    stacklevel=2,
                )
            train_idx.append(perm)
            continue
        cut1 = int(np.floor(spec.ratios[0] * n))
        cut2 = int(np.floor((spec.ratios[0] + spec.ratios[1]) * n))
        train_idx.append(perm[:cut1])
        val_idx.append(perm[cut1:cut2])
        test_idx.append(perm[cut2:])

    def cat(parts: list[np.ndarray]) -> np.ndarray:
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    return ds.subset(cat(train_idx)), ds.subset(cat(val_idx)), ds.subset(cat(test_idx))


# --- MovieLens-1M derivation -------------------------------------------------

ML_FEATURES = ("user_id", "movie_id", "gender", "occupation", "zip_code")
DEFAULT_AGE_EDGES = (25, 35)  # age < 25 -> 0, 25 <= age < 35 -> 1, else 2
CLICK_THRESHOLD = 4
LIKE_THRESHOLD = 5


def load_movielens(ml_dir: str | Path) -> Iterator[dict[str, str]]:
    """Join ratings.dat with users.dat, streaming rows in ratings order."""
    ml_dir = Path(ml_dir)
    users_path = ml_dir / "users.dat"
    ratings_path = ml_dir / "ratings.dat"
    for p in (users_path, ratings_path):
        if not p.exists():
            raise DataError(f"MovieLens file not found: {p}")
    users: dict[str, tuple[str, str, str, str]] = {}
    with users_path.open(encoding="latin-1") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("::")
            if len(parts) != 5:
                raise DataError(f"malformed users.dat line: {line!r}")
            uid, gender, age, occupation, zip_code = parts
            users[uid] = (gender, age, occupation, zip_code)
    with ratings_path.open(encoding="latin-1") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("::")
            if len(parts) != 4:
                raise DataError(f"malformed ratings.dat line: {line!r}")
            uid, movie_id, rating, _ts = parts
            if uid not in users:
                raise DataError(f"rating references unknown user {uid}")
            gender, age, occupation, zip_code = users[uid]
            yield {
                "user_id": uid,
                "movie_id": movie_id,
                "rating": rating,
                "age": age,
                "gender": gender,
                "occupation": occupation,
                "zip_code": zip_code,
            }


def derive_movielens(
    rating_rows: Iterable[Mapping[str, str]],
    age_edges: tuple[int, int] = DEFAULT_AGE_EDGES,
) -> tuple[list[dict[str, str]], list[tuple[int, str]]]:
    """Turn 1..5 ratings into two binary tasks and age groups into scenarios.

    Task 0 (click) is rating >= 4, task 1 (like) is rating >= 5. The age
    attribute buckets users into three scenarios at the given edges.
    Rows with ratings outside 1..5 or unparseable ages are rejected.
    """
    lo, hi = age_edges
    if not 0 < lo < hi:
        raise ConfigError(f"age edges must be increasing positives, got {age_edges}")
    out: list[dict[str, str]] = []
    rejects: list[tuple[int, str]] = []
    for line, row in enumerate(rating_rows, start=1):
        try:
            rating = int(row["rating"])
            age = int(row["age"])
        except (KeyError, ValueError) as exc:
            rejects.append((line, f"unparseable rating/age: {exc}"))
            continue
        if not 1 <= rating <= 5:
            rejects.append((line, f"rating {rating} outside 1..5"))
            continue
        scenario = 0 if age < lo else (1 if age < hi else 2)
        out.append(
            {
                "scenario": str(scenario),
                "label_0": "1" if rating >= CLICK_THRESHOLD else "0",
                "label_1": "1" if rating >= LIKE_THRESHOLD else "0",
                **{f: str(row[f]) for f in ML_FEATURES},
            }
        )
    return out, rejects


MOVIELENS_SCHEMA = DataSchema(
    feature_columns=ML_FEATURES, label_columns=("label_0", "label_1")
)


# --- synthetic generator ------------------------------------------------------


def gen_synthetic(
    num_scenarios: int = 3,
    num_tasks: int = 2,
    num_fields: int = 8,
    rows_per_scenario: int = 10000,
    conflict: bool = False,
    seed: int = 0,
    values_per_field: int = 16,
) -> tuple[list[dict[str, str]], dict]:
    """Planted-structure synthetic data with a ground-truth sidecar.

    Field f0 is the scenario-signal field: its value distribution depends
    on the scenario, and its latent per-value weights are drawn separately
    for every scenario, so the value-to-score mapping it carries can only
    be modeled by units conditioned on the scenario id. Fields f1..f{M}
    are task-signal fields (field f{1+m} only matters for task m); the
    rest carry shared signal. Every label is Bernoulli(sigmoid(score))
    for a per-(scenario, task) linear score over the latent weights, so a
    per-cell logistic model on the raw one-hot features is a consistent
    oracle.

    With conflict=True the last task's score puts zero weight on the
    scenario-signal field while that field's per-scenario latents get
    high variance, making scenario-specific information pure noise for
    that task and loud signal for the others.
    """
    K, M, F, V = num_scenarios, num_tasks, num_fields, values_per_field
    if K < 2 or M < 2:
        raise ConfigError(f"need at least 2 scenarios and 2 tasks, got K={K}, M={M}")
    if F < 4 or F < M + 2:
        raise ConfigError(f"need num_fields >= max(4, num_tasks + 2), got {F}")
    if rows_per_scenario < 1 or V < 2:
        raise ConfigError("rows_per_scenario and values_per_field must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    fields = [f"f{i}" for i in range(F)]
    scenario_field = 0
    task_fields = {m: 1 + m for m in range(M)}
    shared_fields = list(range(1 + M, F))
    high_var = 5.0

    # the draw count must not depend on `conflict` so the feature stream
    # (drawn later from the same generator) is identical either way
    latents = np.zeros((F, V))
    for f in range(1, F):
        latents[f] = rng.normal(0.0, 1.0, V)
    sigma_scen = high_var if conflict else 1.0
    scen_latents = rng.normal(0.0, sigma_scen, (K, V))

    # scenario-signal field: geometric ramp over values, rotated per scenario
    scen_probs = np.empty((K, V))
    for k in range(K):
        shift = (np.arange(V) - (k * V) // K) % V
        w = 0.75**shift
        scen_probs[k] = w / w.sum()

    coefs = np.zeros((K, M, F))
    for k in range(K):
        for m in range(M):
            coefs[k, m, scenario_field] = (
                0.0 if (conflict and m == M - 1) else 1.0
            )
            coefs[k, m, task_fields[m]] = 1.5
            for f in shared_fields:
                coefs[k, m, f] = 1.0
    bias = rng.normal(0.0, 0.3, (K, M))
    if conflict:
        # scenario-specific flows must be PURE noise for the conflicted
        # task, so its bias cannot vary by scenario either
        bias[:, M - 1] = bias[0, M - 1]

    rows: list[dict[str, str]] = []
    n = rows_per_scenario
    for k in range(K):
        values = np.empty((n, F), dtype=np.int64)
        values[:, scenario_field] = rng.choice(V, size=n, p=scen_probs[k])
        for f in range(1, F):
            values[:, f] = rng.integers(0, V, size=n)
        z = latents[np.arange(F)[None, :], values]  # z[i, f] = latents[f, values[i, f]]
        z[:, scenario_field] = scen_latents[k, values[:, scenario_field]]
        scores = z @ coefs[k].T + bias[k]  # (n, M)
        probs = 1.0 / (1.0 + np.exp(-np.clip(scores, -500, 500)))
        draws = rng.random((n, M))
        y = (draws < probs).astype(np.int64)
        for i in range(n):
            row = {"scenario": str(k)}
            for m in range(M):
                row[f"label_{m}"] = str(int(y[i, m]))
            for f in range(F):
                row[fields[f]] = f"v{values[i, f]}"
            rows.append(row)

    truth = {
        "seed": seed,
        "conflict": conflict,
        "num_scenarios": K,
        "num_tasks": M,
        "num_fields": F,
        "values_per_field": V,
        "rows_per_scenario": rows_per_scenario,
        "scenario_field": fields[scenario_field],
        "task_fields": {str(m): fields[i] for m, i in task_fields.items()},
        "shared_fields": [fields[f] for f in shared_fields],
        "latents": {fields[f]: latents[f].tolist() for f in range(1, F)},
        "scenario_latents": {str(k): scen_latents[k].tolist() for k in range(K)},
        "scenario_value_probs": {str(k): scen_probs[k].tolist() for k in range(K)},
        "coefficients": {
            f"{k},{m}": {fields[f]: coefs[k, m, f] for f in range(F)}
            for k in range(K)
            for m in range(M)
        },
        "bias": {f"{k},{m}": float(bias[k, m]) for k in range(K) for m in range(M)},
    }
    return rows, truth


def synthetic_schema(num_tasks: int, num_fields: int) -> DataSchema:
    return DataSchema(
        feature_columns=tuple(f"f{i}" for i in range(num_fields)),
        label_columns=tuple(f"label_{m}" for m in range(num_tasks)),
    )
