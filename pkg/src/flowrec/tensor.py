"""Float64 numeric kernel: forward ops with hand-written backward passes.

The network topology is small and fixed, so there is no general autodiff
graph. Each forward op computes its result eagerly with numpy and records
one closure on a Tape; running the tape in reverse accumulates gradients
into plain ``.grad`` buffers. Gradients accumulate across calls (dangling
branches simply contribute nothing); the caller zeroes them between steps.

Everything is float64. No float32 anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import DimensionError, NumericError

ACTIVATIONS = ("relu", "sigmoid", "identity")


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, safe for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Glorot-uniform sample for a 2-d weight of shape (fan_out, fan_in)."""
    if len(shape) != 2:
        raise DimensionError(f"xavier_uniform expects a 2-d shape, got {shape}")
    fan_out, fan_in = shape
    limit = math.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-limit, limit, size=shape)


class Node:
    """An array value paired with a same-shaped gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Param(Node):
    """A trainable Node carrying Adam moment buffers.

    ``decay`` marks whether L2 regularization applies; biases and the
    selector's gate heads are created with decay=False.
    """

    __slots__ = ("m", "v", "decay")

    def __init__(self, value, decay: bool = True) -> None:
        super().__init__(value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.decay = decay


class ParamGroup:
    """Ordered, named collection of Params sharing one Adam step counter."""

    def __init__(self) -> None:
        self._params: dict[str, Param] = {}
        self.t = 0

    def add(self, name: str, param: Param) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._params[name] = param
        return param

    def __iter__(self) -> Iterator[tuple[str, Param]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def size(self) -> int:
        return sum(p.value.size for p in self._params.values())


class Tape:
    """Records backward closures in forward order; replays them reversed."""

    __slots__ = ("_ops",)

    def __init__(self) -> None:
        self._ops: list[Callable[[], None]] = []

    def record(self, op: Callable[[], None]) -> None:
        self._ops.append(op)

    def backward(self, loss: Node) -> None:
        if loss.value.ndim != 0:
            raise DimensionError(
                f"backward starts from a scalar, got shape {loss.value.shape}"
            )
        loss.grad = np.ones_like(loss.value)
        for op in reversed(self._ops):
            op()


def _as2d(a: np.ndarray) -> np.ndarray:
    return a if a.ndim == 2 else a[None, :]


def linear_forward(tape: Tape, W: Node, b: Node, x: Node) -> Node:
    """y = x @ W.T + b for W of shape (out, in); x may be (in,) or (n, in)."""
    Wv, bv = W.value, b.value
    if Wv.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-d, got {Wv.shape}")
    if x.value.ndim not in (1, 2) or x.value.shape[-1] != Wv.shape[1]:
        raise DimensionError(
            f"linear: weight {Wv.shape} does not accept input {x.value.shape}"
        )
    if bv.shape != (Wv.shape[0],):
        raise DimensionError(
            f"linear: bias {bv.shape} does not match weight {Wv.shape}"
        )
    single = x.value.ndim == 1
    x2 = _as2d(x.value)
    y2 = x2 @ Wv.T + bv
    out = Node(y2[0] if single else y2)

    def backward() -> None:
        dy = _as2d(out.grad)
        W.grad += dy.T @ x2
        b.grad += dy.sum(axis=0)
        dx = dy @ Wv
        x.grad += dx[0] if single else dx

    tape.record(backward)
    return out


def lora_forward(tape: Tape, B: Node, A: Node, b: Node, x: Node) -> Node:
    """Low-rank affine map y = (x @ A.T) @ B.T + b.

    A has shape (r, in), B has shape (out, r). Equivalent to a dense layer
    with weight B @ A but never materializes that product.
    """
    Av, Bv, bv = A.value, B.value, b.value
    if Av.ndim != 2 or Bv.ndim != 2:
        raise DimensionError(
            f"lora: factors must be 2-d, got A {Av.shape}, B {Bv.shape}"
        )
    if Bv.shape[1] != Av.shape[0]:
        raise DimensionError(
            f"lora: rank mismatch between B {Bv.shape} and A {Av.shape}"
        )
    if x.value.ndim not in (1, 2) or x.value.shape[-1] != Av.shape[1]:
        raise DimensionError(
            f"lora: factor A {Av.shape} does not accept input {x.value.shape}"
        )
    if bv.shape != (Bv.shape[0],):
        raise DimensionError(f"lora: bias {bv.shape} does not match B {Bv.shape}")
    single = x.value.ndim == 1
    x2 = _as2d(x.value)
    t = x2 @ Av.T
    y2 = t @ Bv.T + bv
    out = Node(y2[0] if single else y2)

    def backward() -> None:
        dy = _as2d(out.grad)
        B.grad += dy.T @ t
        dt = dy @ Bv
        A.grad += dt.T @ x2
        b.grad += dy.sum(axis=0)
        dx = dt @ Av
        x.grad += dx[0] if single else dx

    tape.record(backward)
    return out


def activate(tape: Tape, kind: str, x: Node) -> Node:
    """Elementwise relu / sigmoid / identity."""
    if kind == "relu":
        out = Node(np.maximum(x.value, 0.0))

        def backward() -> None:
            x.grad += (x.value > 0.0) * out.grad

    elif kind == "sigmoid":
        out = Node(sigmoid(x.value))

        def backward() -> None:
            x.grad += out.value * (1.0 - out.value) * out.grad

    elif kind == "identity":
        out = Node(x.value)

        def backward() -> None:
            x.grad += out.grad

    else:
        raise ValueError(f"unknown activation '{kind}', expected one of {ACTIVATIONS}")
    tape.record(backward)
    return out


def reshape(tape: Tape, x: Node, shape: tuple[int, ...]) -> Node:
    out = Node(x.value.reshape(shape))

    def backward() -> None:
        x.grad += out.grad.reshape(x.value.shape)

    tape.record(backward)
    return out


_P_FLOOR = 1e-12
_P_CEIL = 1.0 - 1e-12


def bce_loss(tape: Tape, p: Node, y: np.ndarray) -> Node:
    """Summed binary cross-entropy over all elements of p.

    Probabilities are clipped to [1e-12, 1 - 1e-12] before the logs and
    the same clipped value feeds the gradient, so saturated predictions
    produce large-but-finite losses and gradients, never NaN.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.value.shape:
        raise DimensionError(
            f"bce: labels {y.shape} do not match predictions {p.value.shape}"
        )
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce: labels must be 0 or 1")
    pc = np.clip(p.value, _P_FLOOR, _P_CEIL)
    val = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum()
    out = Node(val)

    def backward() -> None:
        p.grad += (pc - y) / (pc * (1.0 - pc)) * out.grad

    tape.record(backward)
    return out


def array_sum(tape: Tape, x: Node) -> Node:
    out = Node(x.value.sum())

    def backward() -> None:
        x.grad += out.grad

    tape.record(backward)
    return out


def weighted_sum(tape: Tape, terms: Iterable[tuple[float, Node]]) -> Node:
    """Scalar combination sum_i c_i * node_i of scalar nodes."""
    terms = list(terms)
    for _, nd in terms:
        if nd.value.ndim != 0:
            raise DimensionError(
                f"weighted_sum expects scalar nodes, got shape {nd.value.shape}"
            )
    out = Node(math.fsum(c * float(nd.value) for c, nd in terms))

    def backward() -> None:
        for c, nd in terms:
            nd.grad += c * out.grad

    tape.record(backward)
    return out


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2_coefficient: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"adam betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.epsilon <= 0.0:
            raise ValueError(f"adam epsilon must be positive: {self.epsilon}")
        if self.learning_rate < 0.0 or self.l2_coefficient < 0.0:
            raise ValueError("learning rate and l2 coefficient must be non-negative")


def adam_step(group: ParamGroup, cfg: AdamConfig) -> None:
    """One Adam update with bias correction over every Param in the group.

    L2 is applied as a loss-additive gradient term l2 * theta, skipping
    Params flagged decay=False. Gradients are left intact for inspection;
    the caller zeroes them. The step aborts before mutating anything if
    any gradient is non-finite.
    """
    for name, p in group:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter '{name}'")
    group.t += 1
    t = group.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in group:
        g = p.grad
        if cfg.l2_coefficient > 0.0 and p.decay:
            g = g + cfg.l2_coefficient * p.value
        p.m *= cfg.beta1
        p.m += (1.0 - cfg.beta1) * g
        p.v *= cfg.beta2
        p.v += (1.0 - cfg.beta2) * g * g
        m_hat = p.m / bc1
        v_hat = p.v / bc2
        p.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        if not np.all(np.isfinite(p.value)):
            raise NumericError(f"non-finite value in parameter '{name}' after step")


def _named_params(params) -> list[tuple[str, Param]]:
    if isinstance(params, ParamGroup):
        return list(params)
    out: list[tuple[str, Param]] = []
    for item in params:
        if isinstance(item, ParamGroup):
            out.extend(item)
        else:
            out.append(item)
    return out


def grad_check(
    loss_fn: Callable[[], float],
    params,
    eps: float = 1e-4,
) -> tuple[float, str]:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must be deterministic: zero grads, run forward + backward,
    return the scalar loss. ``params`` is a ParamGroup, a sequence of
    ParamGroups, or (name, Param) pairs. Returns the worst relative error
    and the flattened coordinate it occurred at.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"grad_check eps must lie in [1e-6, 1e-3], got {eps}")
    pairs = _named_params(params)
    loss_fn()
    analytic = {name: p.grad.copy() for name, p in pairs}
    worst = 0.0
    worst_at = ""
    for name, p in pairs:
        flat = p.value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            flat[i] = orig - eps
            lm = loss_fn()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            a = a_flat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > worst:
                worst = rel
                worst_at = f"{name}[{i}]"
    return worst, worst_at
