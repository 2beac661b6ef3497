"""Dense float64 reverse-mode autodiff on an append-only tape.

Every tensor is a 2-D array. A :class:`Tape` records each primitive together
with a closure mapping the output gradient to input gradients; ``backward``
walks the records once in reverse insertion order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import graph as _graph


class NumericalError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Tensor:
    __slots__ = ("value", "tape", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, value, tape: "Tape | None" = None, requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(-1, 1)
        elif value.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {value.shape}")
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError("item() needs a 1x1 tensor")
        return float(self.value[0, 0])

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []

    def param(self, value, name: str | None = None) -> Tensor:
        t = Tensor(value, self, requires_grad=True, name=name)
        self.nodes.append(t)
        return t

    def const(self, value) -> Tensor:
        return Tensor(value, self)

    def record(self, op: str, value: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"{op} produced a non-finite value")
        out = Tensor(value, self, requires_grad=any(p.requires_grad for p in parents), name=op)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
            self.nodes.append(out)
        return out

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(node) into ``node.grad`` for every recorded node."""
        if root.shape != (1, 1):
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        for node in self.nodes:
            node.grad = None
        if not root.requires_grad:
            return
        root.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _tape(*tensors: Tensor) -> Tape:
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return Tape()


def _shape_check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a.shape[1] == b.shape[0], f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _tape(a, b).record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm_fixed(f: "_graph.FilterOperator", a: Tensor) -> Tensor:
    """``f @ a`` with ``f`` a constant filter operator."""
    _shape_check(a.shape[0] == f.num_nodes, f"spmm: operator is {f.num_nodes}x{f.num_nodes}, input {a.shape}")
    return _tape(a).record("spmm", _graph.spmm(f, a.value), (a,),
                           lambda g: (_graph.spmm_transpose(f, g),))


def dense_rows_matmul(rows: Callable[[], np.ndarray], w: Tensor) -> Tensor:
    """``M @ w`` for a constant matrix ``M`` produced on demand (e.g. sparse adjacency)."""
    m = rows()
    return _tape(w).record("const_matmul", np.asarray(m @ w.value), (w,),
                           lambda g: (np.asarray(m.T @ g),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a.shape == b.shape, f"add: {a.shape} + {b.shape}")
    return _tape(a, b).record("add", a.value + b.value, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    return _tape(a).record("scale", a.value * c, (a,), lambda g: (g * c,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _shape_check(a.shape == b.shape, f"hadamard: {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    return _tape(a, b).record("hadamard", av * bv, (a, b), lambda g: (g * bv, g * av))


def row_scale(a: Tensor, v: Tensor) -> Tensor:
    """``diag(v) @ a`` for a column vector ``v``."""
    _shape_check(v.shape == (a.shape[0], 1), f"row_scale: {a.shape} by {v.shape}")
    av, vv = a.value, v.value
    return _tape(a, v).record("row_scale", av * vv, (a, v),
                              lambda g: (g * vv, np.sum(g * av, axis=1, keepdims=True)))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    rows = {t.shape[0] for t in tensors}
    _shape_check(len(rows) == 1, "concat_cols: row counts differ")
    widths = np.cumsum([0] + [t.shape[1] for t in tensors])

    def back(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(tensors)))

    return _tape(*tensors).record("concat", np.hstack([t.value for t in tensors]), tuple(tensors), back)


def column(a: Tensor, j: int) -> Tensor:
    n, k = a.shape

    def back(g):
        out = np.zeros((n, k))
        out[:, j:j + 1] = g
        return (out,)

    return _tape(a).record("column", a.value[:, j:j + 1], (a,), back)


def total(a: Tensor) -> Tensor:
    return _tape(a).record("sum", np.array([[a.value.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


# ---------------------------------------------------------------------------
# Elementwise and row-wise nonlinearities


def relu(a: Tensor) -> Tensor:
    pos = a.value > 0
    return _tape(a).record("relu", np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.value)
    return _tape(a).record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0):
        raise NumericalError("log of a non-positive value")
    av = a.value
    return _tape(a).record("log", np.log(av), (a,), lambda g: (g / av,))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(a: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    s = _softmax(a.value / temperature)

    def back(g):
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)) / temperature,)

    return _tape(a).record("softmax", s, (a,), back)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)``; identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must lie in [0, 1)")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _tape(a).record("dropout", a.value * keep, (a,), lambda g: (g * keep,))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply ``gamma, beta`` (1 x F)."""
    f = a.shape[1]
    _shape_check(gamma.shape == (1, f) and beta.shape == (1, f), "layer_norm: affine shape mismatch")
    mu = a.value.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(a.value.var(axis=1, keepdims=True) + eps)
    xhat = (a.value - mu) * inv
    gv = gamma.value

    def back(g):
        dx = g * gv
        da = inv * (dx - dx.mean(axis=1, keepdims=True) - xhat * np.mean(dx * xhat, axis=1, keepdims=True))
        return da, np.sum(g * xhat, axis=0, keepdims=True), np.sum(g, axis=0, keepdims=True)

    return _tape(a, gamma, beta).record("layer_norm", xhat * gv + beta.value, (a, gamma, beta), back)


# ---------------------------------------------------------------------------
# Loss


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, classes: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``softmax(logits)`` over the ``mask`` rows."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.flatnonzero(mask)
    if len(mask) == 0:
        raise ValueError("cross_entropy needs a non-empty mask")
    y = np.asarray(classes)[mask]
    lsm = log_softmax(logits.value[mask])
    loss = -lsm[np.arange(len(mask)), y].mean()

    def back(g):
        d = np.exp(lsm)
        d[np.arange(len(mask)), y] -= 1.0
        out = np.zeros(logits.shape)
        out[mask] = d * (g[0, 0] / len(mask))
        return (out,)

    return _tape(logits).record("cross_entropy", np.array([[loss]]), (logits,), back)


# ---------------------------------------------------------------------------
# Finite-difference oracle


def grad_check(fn: Callable[[Tape, dict], Tensor], params: dict, step: float = 1e-5,
               tolerance: float = 1e-4, num_coords: int = 100, seed: int = 0, floor: float = 1e-6) -> dict:
    """Compare autodiff gradients with central differences.

    ``fn(tape, tensors)`` must build a scalar from ``tensors`` (the params
    registered on ``tape``) deterministically. Up to ``num_coords`` coordinates
    are sampled across all parameters. The relative error of a coordinate is
    ``|auto - numeric| / max(|auto|, |numeric|, floor)``.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError("step must lie in (0, 1e-2]")
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def evaluate(values):
        tape = Tape()
        tensors = {k: tape.param(v, name=k) for k, v in values.items()}
        return tape, tensors, fn(tape, tensors)

    tape, tensors, out = evaluate(params)
    tape.backward(out)
    auto = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in tensors.items()}

    coords = [(k, i) for k, v in params.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > num_coords:
        coords = [coords[i] for i in rng.choice(len(coords), size=num_coords, replace=False)]

    worst = 0.0
    per_param: dict[str, float] = {}
    for k, i in coords:
        flat = params[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        f_plus = evaluate(params)[2].item()
        flat[i] = orig - step
        f_minus = evaluate(params)[2].item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        a = auto[k].reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
        per_param[k] = max(per_param.get(k, 0.0), err)
    return {"max_rel_err": worst, "passed": worst <= tolerance, "per_param": per_param,
            "num_coords": len(coords), "step": step}
