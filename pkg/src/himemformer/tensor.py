"""Minimal reverse-mode autodiff over dense float64 arrays.

Operations record themselves on the active :class:`Tape` (entered as a
context manager). Outside a tape they run as plain numpy and keep no graph,
which is how inference and finite-difference probes stay cheap.

Broadcasting is deliberately limited: matmul batches over the leading dims
of its left operand, a few row ops accept a ``[D]`` operand against
``[..., D]``, and everything else requires equal shapes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class UsageError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so replaying them in reverse is a
    valid topological order for the backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a NaN/Inf anywhere poisons the sum; overflow of the sum itself needs |x| ~ 1e308
    if not math.isfinite(arr.sum()):
        raise NumericError(f"non-finite value produced by {op}")


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    needs = False
    for t in inputs:
        if t.requires_grad:
            needs = True
            break
    out.requires_grad = needs
    if needs and _ACTIVE:
        node = _Node(tuple(inputs), out, backward)
        out._node = node
        _ACTIVE[-1].nodes.append(node)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# creation


def tensor_create(
    shape: Sequence[int],
    init: str = "zeros",
    *,
    value: float = 0.0,
    low: float = -1.0,
    high: float = 1.0,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
    fan: tuple[int, int] | None = None,
    requires_grad: bool = False,
    name: str | None = None,
) -> Tensor:
    """Allocate a tensor.

    ``init`` is one of ``zeros``, ``ones``, ``constant`` (uses ``value``),
    ``uniform`` (``low``/``high``) or ``xavier`` (uniform in ``±sqrt(6/(fan_in+fan_out))``,
    fans default to the last two dims). Random inits draw from ``rng`` or a
    fresh generator seeded with ``seed``.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise DimensionError(f"all dimensions must be >= 1, got {shape}")
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "constant":
        data = np.full(shape, float(value))
    elif init in ("uniform", "xavier"):
        gen = rng if rng is not None else np.random.default_rng(seed)
        if init == "xavier":
            fan_in, fan_out = fan if fan is not None else (
                (shape[-2], shape[-1]) if len(shape) >= 2 else (shape[0], shape[0])
            )
            s = np.sqrt(6.0 / (fan_in + fan_out))
            low, high = -s, s
        if not low < high:
            raise ValueError(f"uniform bounds need low < high, got {low}, {high}")
        data = gen.uniform(low, high, size=shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad, name=name)


# --------------------------------------------------------------------------
# elementwise and row ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` for equal shapes, or ``[..., D] + [D]`` (bias row add)."""
    if a.shape == b.shape:
        def bw(g):
            return g, g
    elif b.data.ndim == 1 and a.shape[-1:] == b.shape:
        def bw(g):
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _result("add", a.data + b.data, (a, b), bw)


def add_const(a: Tensor, c) -> Tensor:
    """Add a non-differentiable array (broadcast onto ``a``'s shape)."""
    c = np.asarray(c, dtype=np.float64)
    out = a.data + c
    if out.shape != a.shape:
        raise ShapeError(f"add_const: constant {c.shape} would reshape {a.shape}")
    return _result("add_const", out, (a,), lambda g: (g,))


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a non-differentiable array of ``a``'s shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: constant {c.shape} vs tensor {a.shape}")
    return _result("mul_const", a.data * c, (a,), lambda g: (g * c,))


def scale(a: Tensor, s: float) -> Tensor:
    return _result("scale", a.data * s, (a,), lambda g: (g * s,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form."""
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _result("gelu", out, (x,), bw)


def softmax_lastdim(x: Tensor, additive_mask=None) -> Tensor:
    """Row softmax over the last axis; ``additive_mask`` is added to the
    logits first (broadcast, non-differentiable)."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result("softmax", p, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},)")
    xc = x.data - x.data.sum(axis=-1, keepdims=True) / d
    var = (xc * xc).sum(axis=-1, keepdims=True) / d
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        flat_g = g.reshape(-1, d)
        dgain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        gx = g * gain.data
        dx = rstd * (gx - gx.sum(axis=-1, keepdims=True) / d
                     - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
        return dx, dgain, dbias

    return _result("layer_norm", out, (x, gain, bias), bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [k, n]`` batched over the leading dims of ``a``."""
    if b.data.ndim != 2 or a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    k = b.shape[0]

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [..., k, n]`` with identical leading dims."""
    if (a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result("bmm", a.data @ b.data, (a, b), bw)


# --------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return _result("reshape", out, (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    out = np.swapaxes(x.data, a1, a2)
    return _result("swapaxes", out, (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    """Stack token rows of ``a`` then ``b`` along axis -2."""
    if a.data.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_tokens: {a.shape} and {b.shape} do not align")
    n1 = a.shape[-2]
    out = np.concatenate([a.data, b.data], axis=-2)
    return _result("concat", out, (a, b), lambda g: (g[..., :n1, :], g[..., n1:, :]))


def slice_tokens(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[-2]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_tokens: [{start}:{stop}] outside {n} rows")

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _result("slice", x.data[..., start:stop, :], (x,), bw)


def expand_leading(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``x`` over new leading dims ``lead``; gradient sums them back."""
    lead = tuple(lead)
    if not lead:
        return x
    out = np.broadcast_to(x.data, lead + x.shape).copy()
    nl = len(lead)
    return _result("expand", out, (x,), lambda g: (g.sum(axis=tuple(range(nl))),))


# --------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor) -> Tensor:
    return _result("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_soft(logits: Tensor, target) -> Tensor:
    """Mean over rows of ``-sum_k target * log_softmax(logits)``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")
    if (target < 0).any() or not np.allclose(target.sum(axis=-1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("target rows must be probability distributions")
    rows = target.size // target.shape[-1]
    logp = log_softmax_np(logits.data)
    loss = -(target * logp).sum() / rows

    def bw(g):
        p = np.exp(logp)
        return (float(g) * (p * target.sum(axis=-1, keepdims=True) - target) / rows,)

    return _result("cross_entropy", np.asarray(loss), (logits,), bw)


# --------------------------------------------------------------------------
# backward


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Leaf grads are added into, never overwritten; call ``zero_grad`` between
    steps.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = loss.grad + 1.0
            return
        raise UsageError("loss was not recorded on a tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def grad_of(f: Callable[[], Tensor], params: Iterable[Tensor]) -> float:
    """Zero ``params`` grads, run ``f`` on a fresh tape and backprop. Returns the loss."""
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    return loss.item()


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    analytic: np.ndarray | None = None,
) -> float:
    """Max relative error between the analytic gradient of scalar ``f(x)`` and
    central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h``.

    Relative error per coordinate is ``|a-b| / max(|a|, |b|, 1e-8)``.
    ``analytic`` overrides the tape gradient (used for negative controls).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if analytic is None:
        saved = x.grad
        x.requires_grad = True
        x.grad = np.zeros_like(x.data)
        with Tape() as tape:
            out = f(x)
        backward(out, tape)
        analytic = x.grad.copy()
        x.grad = saved if saved is not None else np.zeros_like(x.data)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
