"""Dense tensors with reverse-mode differentiation on a numpy backend.

Design constraints, kept deliberately narrow so the numeric kernel stays
auditable:

* row-major float32 by default, float64 available for gradient checking
  (see :func:`default_dtype`);
* elementwise ops broadcast only a scalar or a last-axis vector, nothing
  fancier;
* masking happens inside :func:`masked_softmax` as additive ``-inf`` before
  the softmax, so masked cells carry exactly zero weight and exactly zero
  gradient;
* the graph is built per forward pass and consumed by a single
  :func:`backward` call.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    ArgumentError,
    DegenerateInputError,
    DimensionError,
    NumericError,
    StateError,
)

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_FINITE_CHECKS = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype newly created tensors default to."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Verify every op output is finite. Off by default; tests switch it on."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(_DEFAULT_DTYPE)
        elif arr.dtype != _DEFAULT_DTYPE and arr.dtype.kind == "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; the actual math lives in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


class Parameter(Tensor):
    """A named, trainable leaf. Freezing removes it from graph construction entirely."""

    __slots__ = ()

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen, name=name)

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    def freeze(self) -> None:
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.requires_grad = True


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out._consumed = False
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # `+` allocates a fresh array so pass-through gradients are never mutated in place.
    t.grad = g if t.grad is None else t.grad + g


def _affine_kind(a: Tensor, b: Tensor) -> str:
    """Classify the only broadcasts we allow: same shape, scalar, or last-axis vector."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "lastaxis"
    raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape}; only scalars or last-axis vectors broadcast")


def _reduce_to(g: np.ndarray, kind: str, shape: tuple[int, ...]) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum())
    axes = tuple(range(g.ndim - 1))
    return g.sum(axis=axes) if axes else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _affine_kind(a, b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, _reduce_to(g, kind, b.shape))

    return _node(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _affine_kind(a, b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, _reduce_to(g * a.data, kind, b.shape))

    return _node(data, (a, b), backward, "mul")


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    data = a.data * s

    def backward(g):
        _accumulate(a, g * s)

    return _node(data, (a,), backward, "scale")


def take_scalar(a: Tensor, index: int) -> Tensor:
    """Select a single element of a 1-D tensor as a 0-d tensor."""
    if a.ndim != 1:
        raise DimensionError("take_scalar expects a 1-D tensor")
    data = np.asarray(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return _node(data, (a,), backward, "take_scalar")


def matmul(a, b) -> Tensor:
    """Matrix product with stacked leading dims; a 2-D operand is applied per batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ga.ndim > a.ndim:
                ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
            _accumulate(a, ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.ndim > b.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
            _accumulate(b, gb)

    return _node(data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _node(data, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ArgumentError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node(data, tuple(tensors), backward, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _node(data, (a,), backward, "narrow")


def repeat(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Tile each slice along `axis` `repeats` times (block layout, like np.repeat)."""
    a = _as_tensor(a)
    if repeats < 1:
        raise ArgumentError("repeats must be >= 1")
    if repeats == 1:
        return a
    data = np.repeat(a.data, repeats, axis=axis)
    n = a.shape[axis]

    def backward(g):
        shaped = g.reshape(g.shape[:axis] + (n, repeats) + g.shape[axis + 1:])
        _accumulate(a, shaped.sum(axis=axis + 1))

    return _node(data, (a,), backward, "repeat")


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: ids may be any integer-shaped array; output appends the embed dim."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ArgumentError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ArgumentError(f"embedding id out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _node(data, (table,), backward, "embedding")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax; tolerates -inf entries as long as each slice keeps one finite."""
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    if np.isnan(m).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - np.where(np.isfinite(m), m, 0.0)
    e = np.exp(shifted)
    z = e.sum(axis=axis, keepdims=True)
    if not np.all(z > 0):
        raise NumericError("softmax slice with no finite entry")
    s = e / z

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(x, s * (g - inner))

    return _node(s, (x,), backward, "softmax")


def masked_softmax(x: Tensor, visible: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over `x` with hidden cells forced to exactly zero weight.

    `visible` is a boolean array broadcastable to `x.shape`. Every slice along
    `axis` must keep at least one visible cell.
    """
    x = _as_tensor(x)
    visible = np.asarray(visible, dtype=bool)
    vis = np.broadcast_to(visible, x.shape)
    if np.isnan(x.data).any():
        raise NumericError("masked_softmax received NaN input")
    if not vis.any(axis=axis).all():
        raise DegenerateInputError("masked_softmax: a row is fully masked")
    scores = np.where(vis, x.data, -np.inf)
    m = scores.max(axis=axis, keepdims=True)
    e = np.exp(scores - m)
    # exp(-inf - m) underflows to exactly 0, so hidden cells drop out of the sum.
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(x, s * (g - inner))

    return _node(s, (x,), backward, "masked_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm affine params must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (gx - m1 - xhat * m2) * inv)

    return _node(data, (x, gamma, beta), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x), no tanh approximation."""
    x = _as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * phi

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accumulate(x, g * (phi + x.data * pdf))

    return _node(data.astype(x.dtype, copy=False), (x,), backward, "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; p=0 is the identity and adds no graph node."""
    if not 0.0 <= p < 1.0:
        raise ArgumentError(f"dropout rate {p} outside [0, 1)")
    if p == 0.0:
        return x
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    factor = 1.0 / (1.0 - p)
    data = x.data * keep * factor

    def backward(g):
        _accumulate(x, g * keep * factor)

    return _node(data, (x,), backward, "dropout")


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _node(data, (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    data = np.asarray(a.data.mean())

    def backward(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False))

    return _node(data, (a,), backward, "mean")


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position twist over the last axis of [..., T, head_dim].

    `cos`/`sin` are constant tables shaped [T, head_dim] built by the caller;
    the rotation pairs the two halves of the head dimension.
    """
    x = _as_tensor(x)
    hd = x.shape[-1]
    if hd % 2:
        raise DimensionError("rope head_dim must be even")
    if cos.shape != x.shape[-2:] or sin.shape != x.shape[-2:]:
        raise DimensionError("rope tables must be shaped [T, head_dim]")

    def rot(v):
        return np.concatenate([-v[..., hd // 2:], v[..., : hd // 2]], axis=-1)

    def rot_t(v):
        return np.concatenate([v[..., hd // 2:], -v[..., : hd // 2]], axis=-1)

    data = x.data * cos + rot(x.data) * sin

    def backward(g):
        _accumulate(x, g * cos + rot_t(g * sin))

    return _node(data.astype(x.dtype, copy=False), (x,), backward, "rope")


def cross_entropy(
    logits: Tensor,
    targets,
    mask=None,
    label_smoothing: float = 0.0,
) -> Tensor:
    """Mean token-level cross-entropy over unmasked positions.

    `logits` is [..., V]; `targets` holds class ids shaped like the leading
    axes; `mask` (same shape as `targets`, True = counted) selects which
    positions contribute. Gradients at masked positions are exactly zero.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    v = logits.shape[-1]
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise DimensionError(f"targets shape {targets.shape} must match logit leading axes {lead}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ArgumentError(f"target id out of range [0, {v})")
    if not 0.0 <= label_smoothing < 1.0:
        raise ArgumentError("label_smoothing must lie in [0, 1)")

    flat = logits.data.reshape(-1, v)
    tgt = targets.reshape(-1)
    if mask is None:
        keep = np.ones(tgt.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        if keep.shape != tgt.shape:
            raise DimensionError("mask must be shaped like targets")
    n = int(keep.sum())
    if n == 0:
        raise DegenerateInputError("cross_entropy: every position is masked out")

    m = flat.max(axis=-1, keepdims=True)
    if np.isnan(m).any():
        raise NumericError("cross_entropy received NaN logits")
    shifted = flat - m
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(flat.shape[0])
    nll = -logp[rows, tgt]
    if label_smoothing > 0.0:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * logp.mean(axis=-1)
    loss = np.asarray((nll * keep).sum() / n)

    def backward(g):
        p = np.exp(logp)
        q = np.zeros_like(p)
        q[rows, tgt] = 1.0 - label_smoothing
        if label_smoothing > 0.0:
            q += label_smoothing / v
        gl = (p - q) * (keep[:, None].astype(p.dtype) * (float(g) / n))
        _accumulate(logits, gl.reshape(logits.shape))

    return _node(loss.astype(logits.dtype, copy=False), (logits,), backward, "cross_entropy")


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Populates `.grad` on every reachable tensor that requires a gradient
    (gradients accumulate across calls on leaves, which is what gradient
    accumulation over micro-batches relies on). A graph can only be walked
    once; reusing the same loss raises StateError.
    """
    if loss.data.ndim != 0:
        raise DimensionError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise StateError("loss does not require grad (frozen inputs or no_grad block)")
    if loss._consumed:
        raise StateError("backward called twice on the same graph")
    if not np.isfinite(loss.data):
        raise NumericError("backward on a non-finite loss")
    loss._consumed = True

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # Intermediates are single-use; drop their grads and closures eagerly.
            if not isinstance(node, Parameter):
                node.grad = None
            node._backward = None
            node._parents = ()


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of `f` against central finite differences.

    `f` rebuilds the forward pass from the current parameter values on every
    call. All unfrozen parameters must be float64; frozen ones are skipped.
    Returns the worst relative error, |a - n| / max(|a|, |n|, 1e-3); the
    floor keeps finite-difference noise on near-zero coordinates from
    dominating the report.
    """
    params = [p for p in params if not p.frozen]
    if not params:
        raise ArgumentError("grad_check needs at least one unfrozen parameter")
    for p in params:
        if p.dtype != np.float64:
            raise ArgumentError(f"grad_check requires float64 parameters, got {p.dtype} for {p.name!r}")
        p.zero_grad()

    loss = f()
    if loss.data.dtype != np.float64:
        raise ArgumentError("grad_check requires the loss to be computed in float64")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ref in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ref.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * eps)
                a = float(gflat[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
                if err > worst:
                    worst = err
    return worst
