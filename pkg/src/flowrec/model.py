"""Scenario/task network built from four decoupled information units.

Input ids index a single shared embedding table. The concatenated
embedding passes through a scenario stage and then a task stage; each
stage has a shared unit and per-scenario / per-task low-rank units:

    scenario shared   full-rank  (hidden, F*d)
    scenario specific low-rank   B_k @ A_k per scenario
    task shared       full-rank  (1, hidden)
    task specific     low-rank   B_m @ A_m per task

Crossing one scenario unit with one task unit yields four flows per task;
their sum is the fused logit. Pruning subtracts gated copies of the flows
from the fused logit, so a gate of 1 removes that flow's contribution
exactly and a gate of 0 leaves it untouched. There is no output tower:
the pruned logit goes straight through a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError
from . import selector as selector_mod
from .tensor import (
    Node,
    Param,
    ParamGroup,
    Tape,
    activate,
    linear_forward,
    lora_forward,
    reshape,
    sigmoid,
    xavier_uniform,
)

FLOW_NAMES = selector_mod.FLOW_NAMES
NUM_FLOWS = selector_mod.NUM_FLOWS


@dataclass(frozen=True)
class ModelDims:
    num_fields: int
    embed_dim: int
    hidden_dim: int
    rank: int
    num_scenarios: int
    num_tasks: int
    vocab_sizes: tuple[int, ...]  # per field, counting the reserved OOV row

    def __post_init__(self) -> None:
        if len(self.vocab_sizes) != self.num_fields:
            raise DimensionError(
                f"{len(self.vocab_sizes)} vocab sizes for {self.num_fields} fields"
            )
        for name in ("num_fields", "embed_dim", "hidden_dim", "num_scenarios", "num_tasks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rank < 0:
            raise ValueError("rank must be >= 0")

    @property
    def input_dim(self) -> int:
        return self.num_fields * self.embed_dim

    @property
    def total_vocab(self) -> int:
        return sum(self.vocab_sizes)

    @property
    def field_offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.vocab_sizes)[:-1]))


class ModelParams:
    """All trainable tensors of the main network, registered in one group.

    Full-rank weights, the embedding table, and the A factors start
    Xavier-uniform; B factors start at zero so every low-rank unit is
    initially the zero map; biases start at zero.
    """

    def __init__(
        self,
        dims: ModelDims,
        activation: str = "relu",
        rng: np.random.Generator | None = None,
    ) -> None:
        if rng is None:
            rng = np.random.default_rng(0)
        self.dims = dims
        self.activation = activation
        g = ParamGroup()
        fd = dims.input_dim
        dh = dims.hidden_dim
        r = dims.rank
        self.embedding = g.add(
            "embedding", Param(xavier_uniform(rng, (dims.total_vocab, dims.embed_dim)))
        )
        self.scenario_shared_W = g.add(
            "scenario_shared.W", Param(xavier_uniform(rng, (dh, fd)))
        )
        self.scenario_shared_b = g.add(
            "scenario_shared.b", Param(np.zeros(dh), decay=False)
        )
        self.scenario_adapters: list[tuple[Param, Param, Param]] = []
        for k in range(dims.num_scenarios):
            A = g.add(f"scenario_adapter.{k}.A", Param(xavier_uniform(rng, (r, fd))))
            B = g.add(f"scenario_adapter.{k}.B", Param(np.zeros((dh, r))))
            b = g.add(f"scenario_adapter.{k}.b", Param(np.zeros(dh), decay=False))
            self.scenario_adapters.append((A, B, b))
        self.task_shared_W = g.add("task_shared.W", Param(xavier_uniform(rng, (1, dh))))
        self.task_shared_b = g.add("task_shared.b", Param(np.zeros(1), decay=False))
        self.task_adapters: list[tuple[Param, Param, Param]] = []
        for m in range(dims.num_tasks):
            A = g.add(f"task_adapter.{m}.A", Param(xavier_uniform(rng, (r, dh))))
            B = g.add(f"task_adapter.{m}.B", Param(np.zeros((1, r))))
            b = g.add(f"task_adapter.{m}.b", Param(np.zeros(1), decay=False))
            self.task_adapters.append((A, B, b))
        self.group = g


def embed(tape: Tape, model: ModelParams, field_ids: np.ndarray) -> Node:
    """Gather and concatenate one embedding row per field.

    ``field_ids`` holds field-local ids, shape (F,) or (n, F). Output is
    (F*d,) or (n, F*d) with field f occupying columns [f*d, (f+1)*d).
    """
    ids = np.asarray(field_ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DataError(f"field ids must be integers, got dtype {ids.dtype}")
    single = ids.ndim == 1
    ids2 = ids[None, :] if single else ids
    dims = model.dims
    if ids2.ndim != 2 or ids2.shape[1] != dims.num_fields:
        raise DimensionError(
            f"expected (n, {dims.num_fields}) field ids, got {ids.shape}"
        )
    for f in range(dims.num_fields):
        col = ids2[:, f]
        if col.size and (col.min() < 0 or col.max() >= dims.vocab_sizes[f]):
            bad = col[(col < 0) | (col >= dims.vocab_sizes[f])][0]
            raise IndexError(
                f"id {bad} out of range [0, {dims.vocab_sizes[f]}) for field {f}"
            )
    rows = ids2 + dims.field_offsets
    n = ids2.shape[0]
    E = model.embedding
    vals = E.value[rows]  # (n, F, d)
    out = Node(vals.reshape(-1) if single else vals.reshape(n, dims.input_dim))

    def backward() -> None:
        dy = out.grad.reshape(n, dims.num_fields, dims.embed_dim)
        np.add.at(E.grad, rows, dy)

    tape.record(backward)
    return out


def _scenario_specific(
    tape: Tape, model: ModelParams, e: Node, scenarios: np.ndarray
) -> Node:
    """Pre-activation output of each row's own scenario adapter (n, hidden)."""
    n = e.value.shape[0]
    out_val = np.zeros((n, model.dims.hidden_dim))
    cache: list[tuple[int, np.ndarray, np.ndarray]] = []
    for k in np.unique(scenarios):
        A, B, b = model.scenario_adapters[int(k)]
        idx = np.flatnonzero(scenarios == k)
        t = e.value[idx] @ A.value.T
        out_val[idx] = t @ B.value.T + b.value
        cache.append((int(k), idx, t))
    out = Node(out_val)

    def backward() -> None:
        for k, idx, t in cache:
            A, B, b = model.scenario_adapters[k]
            dy = out.grad[idx]
            B.grad += dy.T @ t
            dt = dy @ B.value
            A.grad += dt.T @ e.value[idx]
            b.grad += dy.sum(axis=0)
            e.grad[idx] += dt @ A.value

    tape.record(backward)
    return out


def _concat_columns(tape: Tape, nodes: list[Node]) -> Node:
    """Stack per-task (n, 1) nodes into (n, M)."""
    out = Node(np.concatenate([nd.value for nd in nodes], axis=1))

    def backward() -> None:
        for m, nd in enumerate(nodes):
            nd.grad += out.grad[:, m : m + 1]

    tape.record(backward)
    return out


@dataclass
class FlowSet:
    """The four flows and their fused sum for one batch.

    Shapes: shared-to-shared and specific-to-shared are (n, 1) since they
    do not depend on the task; the task-specific flows and the fused
    logits are (n, M). Flow order everywhere is
    (sh-sh, sh-spec, spec-sh, spec-spec).
    """

    shsh: Node
    shspec: Node
    specsh: Node
    specspec: Node
    fused: Node

    @property
    def num_tasks(self) -> int:
        return self.fused.value.shape[1]

    def stacked_values(self) -> np.ndarray:
        """Flow values broadcast to (n, M, 4) in the fixed flow order."""
        n, M = self.fused.value.shape
        out = np.empty((n, M, NUM_FLOWS))
        out[:, :, 0] = self.shsh.value
        out[:, :, 1] = self.shspec.value
        out[:, :, 2] = self.specsh.value
        out[:, :, 3] = self.specspec.value
        return out


def _fuse(tape: Tape, shsh: Node, shspec: Node, specsh: Node, specspec: Node) -> Node:
    out = Node(shsh.value + shspec.value + specsh.value + specspec.value)

    def backward() -> None:
        shsh.grad += out.grad.sum(axis=1, keepdims=True)
        shspec.grad += out.grad
        specsh.grad += out.grad.sum(axis=1, keepdims=True)
        specspec.grad += out.grad

    tape.record(backward)
    return out


def compute_flows(
    tape: Tape, model: ModelParams, e: Node, scenarios: np.ndarray
) -> FlowSet:
    """All four flows for a batch of embeddings and scenario ids."""
    if e.value.ndim == 1:
        e = reshape(tape, e, (1, -1))
    scen = np.atleast_1d(np.asarray(scenarios))
    if scen.shape != (e.value.shape[0],):
        raise DimensionError(
            f"scenarios {scen.shape} do not match batch of {e.value.shape[0]}"
        )
    K = model.dims.num_scenarios
    if scen.size and (scen.min() < 0 or scen.max() >= K):
        raise IndexError(f"scenario id out of range [0, {K})")
    act = model.activation
    u_sh = activate(tape, act, linear_forward(
        tape, model.scenario_shared_W, model.scenario_shared_b, e))
    u_spec = activate(tape, act, _scenario_specific(tape, model, e, scen))
    shsh = linear_forward(tape, model.task_shared_W, model.task_shared_b, u_sh)
    specsh = linear_forward(tape, model.task_shared_W, model.task_shared_b, u_spec)
    shspec = _concat_columns(
        tape, [lora_forward(tape, B, A, b, u_sh) for A, B, b in model.task_adapters]
    )
    specspec = _concat_columns(
        tape, [lora_forward(tape, B, A, b, u_spec) for A, B, b in model.task_adapters]
    )
    fused = _fuse(tape, shsh, shspec, specsh, specspec)
    return FlowSet(shsh, shspec, specsh, specspec, fused)


def prune(tape: Tape, flows: FlowSet, gates: Node) -> Node:
    """Gated subtraction: logits = fused - sum_j gate_j * flow_j.

    ``gates`` has shape (n, M, 4) with values in [0, 1]. A gate of 1
    cancels that flow's term in the fused sum exactly (the backward pass
    contributions cancel to exact zeros as well); a gate of 0 changes
    nothing. Differentiable in both the flows and the gates.
    """
    n, M = flows.fused.value.shape
    if gates.value.shape != (n, M, NUM_FLOWS):
        raise DimensionError(
            f"gates {gates.value.shape} do not match flows ({n}, {M}, {NUM_FLOWS})"
        )
    gv = gates.value
    if gv.size and (gv.min() < 0.0 or gv.max() > 1.0):
        raise ValueError("gate values must lie in [0, 1]")
    out = Node(
        flows.fused.value
        - gv[:, :, 0] * flows.shsh.value
        - gv[:, :, 1] * flows.shspec.value
        - gv[:, :, 2] * flows.specsh.value
        - gv[:, :, 3] * flows.specspec.value
    )

    def backward() -> None:
        dL = out.grad
        flows.fused.grad += dL
        flows.shsh.grad -= (gv[:, :, 0] * dL).sum(axis=1, keepdims=True)
        flows.shspec.grad -= gv[:, :, 1] * dL
        flows.specsh.grad -= (gv[:, :, 2] * dL).sum(axis=1, keepdims=True)
        flows.specspec.grad -= gv[:, :, 3] * dL
        gates.grad[:, :, 0] -= flows.shsh.value * dL
        gates.grad[:, :, 1] -= flows.shspec.value * dL
        gates.grad[:, :, 2] -= flows.specsh.value * dL
        gates.grad[:, :, 3] -= flows.specspec.value * dL

    tape.record(backward)
    return out


def predict(
    model: ModelParams,
    field_ids: np.ndarray,
    scenarios: np.ndarray,
    gates: np.ndarray,
) -> np.ndarray:
    """Inference-only probabilities, one per task.

    Accepts a single instance ((F,) ids, scalar scenario, (M, 4) gates)
    or a batch ((n, F), (n,), (n, M, 4)). Probabilities are the sigmoid
    of the pruned logits directly; there is no extra output layer.
    """
    ids = np.asarray(field_ids)
    single = ids.ndim == 1
    ids2 = ids[None, :] if single else ids
    scen = np.atleast_1d(np.asarray(scenarios))
    g = np.asarray(gates, dtype=np.float64)
    if g.ndim == 2:
        g = np.broadcast_to(g, (ids2.shape[0],) + g.shape).copy()
    tape = Tape()
    e = embed(tape, model, ids2)
    flows = compute_flows(tape, model, e, scen)
    logits = prune(tape, flows, Node(g))
    probs = sigmoid(logits.value)
    return probs[0] if single else probs


def param_count(
    num_fields: int,
    embed_dim: int,
    hidden_dim: int,
    rank: int,
    num_scenarios: int,
    num_tasks: int,
    total_vocab: int,
    selector_widths: tuple[int, ...] | None = None,
) -> dict[str, int]:
    """Closed-form parameter counts per unit, with a dense baseline.

    The dense baseline replaces every low-rank unit by a full-rank matrix
    of the same mapping shape. Counts include biases. ``dense_reduction``
    compares non-embedding totals (selector included in both when widths
    are given, since the dense variant would keep the same selector).
    """
    fd = num_fields * embed_dim
    counts = {
        "embedding": total_vocab * embed_dim,
        "scenario_shared": hidden_dim * fd + hidden_dim,
        "scenario_specific": num_scenarios * (rank * fd + hidden_dim * rank + hidden_dim),
        "task_shared": hidden_dim + 1,
        "task_specific": num_tasks * (rank * hidden_dim + rank + 1),
    }
    counts["selector"] = (
        selector_mod.selector_param_count(fd, num_tasks, selector_widths)
        if selector_widths
        else 0
    )
    counts["non_embedding"] = (
        counts["scenario_shared"]
        + counts["scenario_specific"]
        + counts["task_shared"]
        + counts["task_specific"]
        + counts["selector"]
    )
    counts["total"] = counts["embedding"] + counts["non_embedding"]
    dense_scenario = num_scenarios * (hidden_dim * fd + hidden_dim)
    dense_task = num_tasks * (hidden_dim + 1)
    counts["dense_non_embedding"] = (
        counts["scenario_shared"]
        + dense_scenario
        + counts["task_shared"]
        + dense_task
        + counts["selector"]
    )
    return counts
