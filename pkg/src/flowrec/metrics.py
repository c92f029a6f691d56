"""Evaluation metrics and per-cell reporting.

AUC uses the rank-sum (Mann-Whitney) form with average ranks on ties,
O(n log n). A sample with only one label class has no defined AUC; that
is surfaced as UndefinedMetricError or a flagged cell, never a silent 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import UndefinedMetricError

FLOW_NAMES = ("sh-sh", "sh-spec", "spec-sh", "spec-spec")

_P_FLOOR = 1e-12
_P_CEIL = 1.0 - 1e-12


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative.

    Ties in score contribute 1/2 via average ranks. Invariant under any
    strictly increasing transform of the scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(
            f"auc expects matching 1-d arrays, got {scores.shape} and {labels.shape}"
        )
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives"
        )
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    avg_rank = (starts + ends + 1) / 2.0  # 1-based average rank per tie group
    rank_sum = avg_rank[inverse][pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with the same clipping as training."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise ValueError(
            f"logloss expects matching 1-d arrays, got {probs.shape} and {labels.shape}"
        )
    if probs.size == 0:
        raise UndefinedMetricError("logloss undefined on an empty sample")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("logloss labels must be 0 or 1")
    pc = np.clip(probs, _P_FLOOR, _P_CEIL)
    return float(-(labels * np.log(pc) + (1.0 - labels) * np.log1p(-pc)).mean())


@dataclass(frozen=True)
class CellMetrics:
    scenario: int
    task: int
    count: int
    auc: float | None  # None when the cell has a single label class
    logloss: float | None


def cell_report(
    scores: np.ndarray, scenarios: np.ndarray, labels: np.ndarray
) -> tuple[list[CellMetrics], dict[str, float | None]]:
    """Metrics per (scenario, task) cell plus two overall aggregates.

    ``macro_auc`` is the unweighted mean over cells with a defined AUC
    (the headline number). ``pooled_auc`` pools all instances per task
    and averages the per-task AUCs. Undefined cells are flagged with
    None and excluded from the macro average.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    scenarios = np.asarray(scenarios)
    n, M = scores.shape
    K = int(scenarios.max()) + 1 if n else 0
    cells: list[CellMetrics] = []
    for k in range(K):
        mask = scenarios == k
        cnt = int(mask.sum())
        for m in range(M):
            if cnt == 0:
                cells.append(CellMetrics(k, m, 0, None, None))
                continue
            s, y = scores[mask, m], labels[mask, m]
            try:
                a = auc(s, y)
            except UndefinedMetricError:
                a = None
            cells.append(CellMetrics(k, m, cnt, a, logloss(s, y)))
    defined = [c.auc for c in cells if c.auc is not None]
    defined_ll = [c.logloss for c in cells if c.logloss is not None]
    overall: dict[str, float | None] = {
        "macro_auc": float(np.mean(defined)) if defined else None,
        "macro_logloss": float(np.mean(defined_ll)) if defined_ll else None,
    }
    task_aucs: list[float] = []
    task_lls: list[float] = []
    for m in range(M):
        try:
            task_aucs.append(auc(scores[:, m], labels[:, m]))
        except UndefinedMetricError:
            pass
        if n:
            task_lls.append(logloss(scores[:, m], labels[:, m]))
    overall["pooled_auc"] = float(np.mean(task_aucs)) if task_aucs else None
    overall["pooled_logloss"] = float(np.mean(task_lls)) if task_lls else None
    return cells, overall


def write_cell_report(
    path: str | Path,
    cells: Iterable[CellMetrics],
    overall: dict[str, float | None],
) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "task", "count", "auc", "logloss"])
        for c in cells:
            w.writerow(
                [
                    c.scenario,
                    c.task,
                    c.count,
                    "" if c.auc is None else repr(c.auc),
                    "" if c.logloss is None else repr(c.logloss),
                ]
            )
        for key in ("macro_auc", "pooled_auc", "macro_logloss", "pooled_logloss"):
            v = overall.get(key)
            w.writerow(["overall", key, "", "" if v is None else repr(v), ""])


@dataclass(frozen=True)
class MaskCell:
    scenario: int
    task: int
    flow: str
    prune_ratio: float


def mask_report(
    hard_gate_values: np.ndarray, scenarios: np.ndarray, num_scenarios: int
) -> list[MaskCell]:
    """Fraction of instances whose hard gate prunes each flow, per cell.

    ``hard_gate_values`` is (n, M, 4) binary; a 1 means the flow is
    removed for that instance, so the ratio is just the mean gate.
    """
    g = np.asarray(hard_gate_values, dtype=np.float64)
    scenarios = np.asarray(scenarios)
    if g.ndim != 3 or g.shape[2] != len(FLOW_NAMES):
        raise ValueError(f"expected (n, M, 4) gates, got {g.shape}")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("mask report expects binary gates")
    out: list[MaskCell] = []
    M = g.shape[1]
    for k in range(num_scenarios):
        mask = scenarios == k
        for m in range(M):
            for j, name in enumerate(FLOW_NAMES):
                ratio = float(g[mask, m, j].mean()) if mask.any() else float("nan")
                out.append(MaskCell(k, m, name, ratio))
    return out


def write_mask_report(path: str | Path, cells: Iterable[MaskCell]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "task", "flow", "prune_ratio"])
        for c in cells:
            w.writerow([c.scenario, c.task, c.flow, repr(c.prune_ratio)])
