"""Per-instance, per-task gate network over the information flows.

The selector reads the same concatenated embedding the main network uses,
but through a stop-gradient boundary: it receives the raw value array, so
no gradient from the gate branch ever reaches the embedding table. A small
shared ReLU MLP feeds one 4-wide linear head per task; each head emits raw
gate weights for the four flows in the fixed order

    0: shared-scenario -> shared-task
    1: shared-scenario -> specific-task
    2: specific-scenario -> shared-task
    3: specific-scenario -> specific-task

During search the raw weights pass through a temperature-scaled sigmoid
whose temperature anneals upward each epoch, pushing the gates toward 0/1.
Discretization snaps them to exact binary values via a unit step at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Node,
    Param,
    ParamGroup,
    Tape,
    activate,
    linear_forward,
    sigmoid,
    xavier_uniform,
)

NUM_FLOWS = 4
FLOW_NAMES = ("sh-sh", "sh-spec", "spec-sh", "spec-spec")

DEFAULT_WIDTHS = (64, 32)
DEFAULT_HEAD_BIAS = -0.5


def temperature(epoch: int, total_epochs: int, final_temp: float) -> float:
    """Annealed sigmoid temperature final_temp ** (epoch / total_epochs).

    Exactly 1.0 at epoch 0 and exactly final_temp at epoch == total_epochs.
    """
    if total_epochs < 1:
        raise ConfigError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    if final_temp < 1.0:
        raise ConfigError(
            f"final temperature must be >= 1 so annealing sharpens, got {final_temp}"
        )
    return float(final_temp) ** (epoch / total_epochs)


class SelectorParams:
    """Shared MLP trunk plus one linear gate head per task."""

    def __init__(
        self,
        input_dim: int,
        num_tasks: int,
        widths: tuple[int, ...] = DEFAULT_WIDTHS,
        head_bias_init: float = DEFAULT_HEAD_BIAS,
        rng: np.random.Generator | None = None,
    ) -> None:
        if input_dim < 1 or num_tasks < 1:
            raise ConfigError(
                f"selector needs positive dims, got input_dim={input_dim}, "
                f"num_tasks={num_tasks}"
            )
        if not widths:
            raise ConfigError("selector needs at least one hidden layer")
        if rng is None:
            rng = np.random.default_rng(0)
        self.input_dim = input_dim
        self.num_tasks = num_tasks
        self.widths = tuple(int(w) for w in widths)
        self.head_bias_init = float(head_bias_init)
        self.group = ParamGroup()
        self.layers: list[tuple[Param, Param]] = []
        fan_in = input_dim
        for i, w in enumerate(self.widths):
            W = self.group.add(f"mlp.{i}.W", Param(xavier_uniform(rng, (w, fan_in))))
            b = self.group.add(f"mlp.{i}.b", Param(np.zeros(w), decay=False))
            self.layers.append((W, b))
            fan_in = w
        # gate heads are exempt from weight decay so sparsity pressure
        # comes only from the explicit L1 term
        self.heads: list[tuple[Param, Param]] = []
        for m in range(num_tasks):
            W = self.group.add(
                f"head.{m}.W",
                Param(xavier_uniform(rng, (NUM_FLOWS, fan_in)), decay=False),
            )
            b = self.group.add(
                f"head.{m}.b",
                Param(np.full(NUM_FLOWS, self.head_bias_init), decay=False),
            )
            self.heads.append((W, b))


def selector_param_count(input_dim: int, num_tasks: int, widths=DEFAULT_WIDTHS) -> int:
    total = 0
    fan_in = input_dim
    for w in widths:
        total += w * fan_in + w
        fan_in = w
    total += num_tasks * (NUM_FLOWS * fan_in + NUM_FLOWS)
    return total


def _stack_tasks(tape: Tape, nodes: list[Node]) -> Node:
    """Stack per-task (n, 4) nodes into (n, M, 4)."""
    out = Node(np.stack([nd.value for nd in nodes], axis=1))

    def backward() -> None:
        for m, nd in enumerate(nodes):
            nd.grad += out.grad[:, m, :]

    tape.record(backward)
    return out


def scaled_sigmoid(tape: Tape, w: Node, tau: float) -> Node:
    """g = sigmoid(w * tau); the temperature sharpens the slope at zero."""
    out = Node(sigmoid(w.value * tau))

    def backward() -> None:
        w.grad += tau * out.value * (1.0 - out.value) * out.grad

    tape.record(backward)
    return out


def selector_forward(
    tape: Tape, sel: SelectorParams, embeddings: np.ndarray, tau: float
) -> tuple[Node, Node]:
    """Raw weights and continuous gates for a batch of embeddings.

    ``embeddings`` is the plain (n, input_dim) value array, not a Node:
    passing the array is the stop-gradient boundary. Returns
    (raw weights (n, M, 4), gates (n, M, 4)) with gates in (0, 1).
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != sel.input_dim:
        raise DimensionError(
            f"selector expects (n, {sel.input_dim}) embeddings, got {emb.shape}"
        )
    h = Node(emb)
    for W, b in sel.layers:
        h = activate(tape, "relu", linear_forward(tape, W, b, h))
    per_task = [linear_forward(tape, W, b, h) for W, b in sel.heads]
    w = _stack_tasks(tape, per_task)
    g = scaled_sigmoid(tape, w, tau)
    return w, g


def hard_gates(w: np.ndarray) -> np.ndarray:
    """Unit step at zero: 1 where w > 0, else 0 (ties go to zero)."""
    return (np.asarray(w) > 0.0).astype(np.float64)


@dataclass
class GateMatrix:
    """Gate values with their provenance: raw weights and the mode used."""

    values: np.ndarray
    raw_weights: np.ndarray | None
    mode: str  # "continuous" or "hard"

    def __post_init__(self) -> None:
        v = self.values
        if self.mode == "hard":
            if not np.all((v == 0.0) | (v == 1.0)):
                raise ValueError("hard gates must be exactly 0 or 1")
        elif self.mode == "continuous":
            # mathematically (0, 1); float64 saturates at extreme temperature
            if not (np.all(v >= 0.0) and np.all(v <= 1.0)):
                raise ValueError("continuous gates must lie in [0, 1]")
        else:
            raise ValueError(f"unknown gate mode '{self.mode}'")


def raw_weights(sel: SelectorParams, embeddings: np.ndarray) -> np.ndarray:
    """Inference-only pass producing the raw head outputs (n, M, 4)."""
    tape = Tape()
    w, _ = selector_forward(tape, sel, embeddings, 1.0)
    return w.value


def continuous_gate_matrix(
    sel: SelectorParams, embeddings: np.ndarray, tau: float
) -> GateMatrix:
    w = raw_weights(sel, embeddings)
    return GateMatrix(values=sigmoid(w * tau), raw_weights=w, mode="continuous")


def hard_gate_matrix(sel: SelectorParams, embeddings: np.ndarray) -> GateMatrix:
    w = raw_weights(sel, embeddings)
    return GateMatrix(values=hard_gates(w), raw_weights=w, mode="hard")
