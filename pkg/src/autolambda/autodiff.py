"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every primitive is recorded on the active :class:`Tape` (if any) together
with the information its backward rule needs. Without an active tape the
same primitives just evaluate, which is how perturbed parameter sets are
scored cheaply.
"""

from __future__ import annotations

import contextvars
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

GradientMap = Dict[str, np.ndarray]


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError, ValueError):
    pass


class NonFinite(AutodiffError, FloatingPointError):
    pass


class NotScalar(AutodiffError, ValueError):
    pass


class DetachedNode(AutodiffError):
    pass


_debug = os.environ.get("AUTOLAMBDA_DEBUG", "0").lower() in ("1", "true", "on")


def set_debug(flag: bool) -> None:
    """Toggle screening of every op output for NaN/Inf."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values in {what}")


class Tensor:
    """A float64 array, optionally bound to a node of a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, *, _tape: Optional["Tape"] = None, _node: int = -1, _checked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked:
            _check_finite(arr, "tensor data")
        self.data = arr
        self.tape = _tape
        self.node = _node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)


# ---------------------------------------------------------------------------
# Primitive table. forward(values, attrs) -> (out, cache);
# backward(g, values, out, cache, attrs) -> tuple of input grads (or None).


@dataclass
class Primitive:
    forward: Callable
    backward: Callable


def _mm_fwd(v, attrs):
    a, b = v
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return a @ b, None


def _mm_bwd(g, v, out, cache, attrs):
    a, b = v
    return g @ b.T, a.T @ g


def _add_fwd(v, attrs):
    a, b = v
    if a.shape == b.shape:
        return a + b, None
    # bias-add: b is a vector over the last axis of a
    if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        return a + b, None
    raise ShapeMismatch(f"add {a.shape} + {b.shape}")


def _add_bwd(g, v, out, cache, attrs):
    a, b = v
    gb = g if a.shape == b.shape else g.sum(axis=0)
    return g, gb


def _mul_fwd(v, attrs):
    a, b = v
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul {a.shape} * {b.shape}")
    return a * b, None


def _mul_bwd(g, v, out, cache, attrs):
    a, b = v
    return g * b, g * a


def _tanh_fwd(v, attrs):
    return np.tanh(v[0]), None


def _tanh_bwd(g, v, out, cache, attrs):
    return (g * (1.0 - out * out),)


def _relu_fwd(v, attrs):
    return np.maximum(v[0], 0.0), None


def _relu_bwd(g, v, out, cache, attrs):
    return (g * (v[0] > 0.0),)


def _exp_fwd(v, attrs):
    return np.exp(v[0]), None


def _exp_bwd(g, v, out, cache, attrs):
    return (g * out,)


def _scale_fwd(v, attrs):
    return v[0] * attrs["c"], None


def _scale_bwd(g, v, out, cache, attrs):
    return (g * attrs["c"],)


def _sum_fwd(v, attrs):
    return np.asarray(v[0].sum()), None


def _sum_bwd(g, v, out, cache, attrs):
    return (np.full(v[0].shape, float(g)),)


def _mse_fwd(v, attrs):
    pred, target = v
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss {pred.shape} vs {target.shape}")
    diff = pred - target
    return np.asarray(np.mean(diff * diff)), diff


def _mse_bwd(g, v, out, diff, attrs):
    gp = (2.0 * float(g) / diff.size) * diff
    return gp, -gp


def _xent_fwd(v, attrs):
    (logits,) = v
    labels = attrs["labels"]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_cross_entropy logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeMismatch("class label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    return np.asarray(loss), logp


def _xent_bwd(g, v, out, logp, attrs):
    labels = attrs["labels"]
    n = logp.shape[0]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return (grad * (float(g) / n),)


PRIMITIVES: Dict[str, Primitive] = {
    "matmul": Primitive(_mm_fwd, _mm_bwd),
    "add": Primitive(_add_fwd, _add_bwd),
    "mul": Primitive(_mul_fwd, _mul_bwd),
    "elementwise_tanh": Primitive(_tanh_fwd, _tanh_bwd),
    "elementwise_relu": Primitive(_relu_fwd, _relu_bwd),
    "exp": Primitive(_exp_fwd, _exp_bwd),
    "scale": Primitive(_scale_fwd, _scale_bwd),
    "sum": Primitive(_sum_fwd, _sum_bwd),
    "mse_loss": Primitive(_mse_fwd, _mse_bwd),
    "softmax_cross_entropy": Primitive(_xent_fwd, _xent_bwd),
}


# ---------------------------------------------------------------------------


@dataclass
class _Record:
    kind: str
    inputs: tuple
    attrs: dict
    cache: object = None


_active: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("autolambda_tape", default=None)


def active_tape() -> Optional["Tape"]:
    return _active.get()


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded here. Parameters are registered by name via :meth:`param`.
    """

    values: list = field(default_factory=list)
    records: list = field(default_factory=list)
    params: Dict[str, int] = field(default_factory=dict)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.values)

    def _leaf(self, arr: np.ndarray) -> Tensor:
        self.values.append(arr)
        self.records.append(None)
        return Tensor(arr, _tape=self, _node=len(self.values) - 1, _checked=True)

    def param(self, name: str, value) -> Tensor:
        """Register ``value`` as the differentiable parameter ``name``.

        Registering the same name twice returns the same node.
        """
        if name in self.params:
            idx = self.params[name]
            return Tensor(self.values[idx], _tape=self, _node=idx, _checked=True)
        arr = np.asarray(value, dtype=np.float64)
        _check_finite(arr, f"parameter {name}")
        t = self._leaf(arr)
        self.params[name] = t.node
        return t

    def constant(self, value) -> Tensor:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        return self._leaf(arr)

    def _lift(self, x) -> int:
        if isinstance(x, Tensor):
            if x.tape is self:
                return x.node
            if x.tape is not None:
                raise DetachedNode("tensor belongs to a different tape")
            return self._leaf(x.data).node
        arr = np.asarray(x, dtype=np.float64)
        _check_finite(arr, "constant")
        return self._leaf(arr).node

    def record(self, kind: str, inputs, attrs: Optional[dict] = None) -> Tensor:
        attrs = attrs or {}
        ids = tuple(self._lift(x) for x in inputs)
        out, cache = PRIMITIVES[kind].forward([self.values[i] for i in ids], attrs)
        if _debug:
            _check_finite(out, kind)
        self.values.append(out)
        self.records.append(_Record(kind, ids, attrs, cache))
        return Tensor(out, _tape=self, _node=len(self.values) - 1, _checked=True)

    def replay(self) -> list:
        """Recompute every node from the leaves; returns the new values."""
        vals = []
        for v, rec in zip(self.values, self.records):
            if rec is None:
                vals.append(v)
            else:
                out, _ = PRIMITIVES[rec.kind].forward([vals[i] for i in rec.inputs], rec.attrs)
                vals.append(out)
        return vals

    def backward(self, loss: Tensor) -> GradientMap:
        """Gradients of a scalar ``loss`` w.r.t. every registered parameter."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise DetachedNode("loss is not a node of this tape")
        if loss.size != 1:
            raise NotScalar(f"loss has shape {loss.shape}")
        adj: Dict[int, np.ndarray] = {loss.node: np.ones_like(self.values[loss.node])}
        for idx in range(loss.node, -1, -1):
            g = adj.pop(idx, None)
            rec = self.records[idx]
            if g is None or rec is None:
                if g is not None:
                    adj[idx] = g
                continue
            in_vals = [self.values[i] for i in rec.inputs]
            grads = PRIMITIVES[rec.kind].backward(g, in_vals, self.values[idx], rec.cache, rec.attrs)
            for i, gi in zip(rec.inputs, grads):
                if gi is None:
                    continue
                if i in adj:
                    adj[i] = adj[i] + gi
                else:
                    adj[i] = gi
        out: GradientMap = {}
        for name, idx in self.params.items():
            g = adj.get(idx)
            out[name] = np.zeros_like(self.values[idx]) if g is None else np.asarray(g, dtype=np.float64).reshape(self.values[idx].shape)
        return out


def _apply(kind: str, inputs, attrs: Optional[dict] = None) -> Tensor:
    tape = _active.get()
    if tape is not None:
        return tape.record(kind, inputs, attrs)
    vals = [x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64) for x in inputs]
    out, _ = PRIMITIVES[kind].forward(vals, attrs or {})
    if _debug:
        _check_finite(out, kind)
    return Tensor(out, _checked=True)


def record_forward(op_kind: str, *inputs, **attrs) -> Tensor:
    """Apply primitive ``op_kind`` to ``inputs``, recording it on the active tape."""
    if op_kind not in PRIMITIVES:
        raise ValueError(f"unknown op {op_kind!r}")
    return _apply(op_kind, inputs, attrs)


def matmul(a, b) -> Tensor:
    return _apply("matmul", (a, b))


def add(a, b) -> Tensor:
    return _apply("add", (a, b))


def mul(a, b) -> Tensor:
    return _apply("mul", (a, b))


def tanh(a) -> Tensor:
    return _apply("elementwise_tanh", (a,))


def relu(a) -> Tensor:
    return _apply("elementwise_relu", (a,))


def exp(a) -> Tensor:
    return _apply("exp", (a,))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (a,), {"c": float(c)})


def sum(a) -> Tensor:  # noqa: A001 - mirrors the primitive name
    return _apply("sum", (a,))


def mse_loss(pred, target) -> Tensor:
    return _apply("mse_loss", (pred, target))


def softmax_cross_entropy(logits, labels) -> Tensor:
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    return _apply("softmax_cross_entropy", (logits,), {"labels": labels})


def backward(loss: Tensor) -> GradientMap:
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise DetachedNode("loss was not recorded on a tape")
    return loss.tape.backward(loss)


# ---------------------------------------------------------------------------


@dataclass
class CheckReport:
    errors: Dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(
    builder: Callable[[Dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> CheckReport:
    """Compare tape gradients against central differences.

    ``builder`` maps a dict of parameter tensors to a scalar loss and must be
    deterministic. The per-entry error is ``|a - n| / max(|a|, |n|, floor)``;
    the report keeps the worst entry per parameter.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with Tape() as tape:
        loss = builder({k: tape.param(k, v) for k, v in base.items()})
        analytic = tape.backward(loss)

    def evaluate(vals):
        return float(builder({k: Tensor(v, _checked=True) for k, v in vals.items()}).data)

    errors = {}
    for name, arr in base.items():
        worst = 0.0
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = evaluate(base)
            flat[j] = orig - h
            down = evaluate(base)
            flat[j] = orig
            num = (up - down) / (2.0 * h)
            err = abs(ga[j] - num) / max(abs(ga[j]), abs(num), floor)
            worst = max(worst, err)
        errors[name] = worst
    return CheckReport(errors, tol)
