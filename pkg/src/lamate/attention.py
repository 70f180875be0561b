"""Masked multi-head attention, grouped KV heads, position tables, KV caching.

Masks are explicit boolean visibility grids built once per shape and applied
as additive ``-inf`` inside the softmax, which is what makes hidden cells
carry exactly zero weight (and exactly zero gradient). The causal rule is
end-aligned: query ``i`` over ``K`` keys and ``Q`` queries sees key ``j`` iff
``j <= i + (K - Q)``, so a single-row incremental step sees every cached key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArgumentError, CapacityError, DimensionError, StateError

MASK_KINDS = ("causal", "fully_visible", "prefix")


@dataclass(frozen=True)
class AttentionMask:
    kind: str
    query_len: int
    key_len: int
    prefix_len: int | None = None
    visibility: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.visibility is None:
            object.__setattr__(self, "visibility", _visibility(self))


def _visibility(mask: AttentionMask) -> np.ndarray:
    q, k = mask.query_len, mask.key_len
    grid = np.zeros((q, k), dtype=bool)
    if mask.kind == "fully_visible":
        grid[:] = True
        return grid
    offset = k - q
    rows = np.arange(q)[:, None]
    cols = np.arange(k)[None, :]
    causal = cols <= rows + offset
    if mask.kind == "causal":
        return causal
    grid = causal.copy()
    grid[:, : mask.prefix_len] = True
    return grid


def build_mask(kind: str, query_len: int, key_len: int, prefix_len: int | None = None) -> AttentionMask:
    """Construct a visibility mask; every query row is guaranteed a visible key."""
    if kind not in MASK_KINDS:
        raise ArgumentError(f"unknown mask kind {kind!r}, expected one of {MASK_KINDS}")
    if query_len < 1 or key_len < 1:
        raise DimensionError("mask lengths must be positive")
    if kind == "prefix":
        if prefix_len is None:
            raise ArgumentError("prefix mask needs prefix_len")
        if not 0 <= prefix_len <= key_len:
            raise ArgumentError(f"prefix_len {prefix_len} outside [0, {key_len}]")
    elif prefix_len is not None:
        raise ArgumentError(f"prefix_len is only meaningful for prefix masks, not {kind!r}")
    if kind in ("causal", "prefix") and key_len < query_len and (prefix_len or 0) == 0:
        # A query aligned before every key would have an empty row.
        raise DimensionError(f"causal mask with key_len {key_len} < query_len {query_len}")
    mask = AttentionMask(kind, query_len, key_len, prefix_len)
    if not mask.visibility.any(axis=1).all():
        raise DimensionError("mask leaves a query row with no visible key")
    return mask


def rope_tables(positions: np.ndarray, head_dim: int, base: float = 10000.0, dtype=np.float64):
    """cos/sin tables [len(positions), head_dim] for the half-split rotary twist."""
    if head_dim % 2:
        raise DimensionError("rotary head_dim must be even")
    positions = np.asarray(positions, dtype=np.float64)
    freqs = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = positions[:, None] * freqs[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1).astype(dtype)
    return cos, sin


def sinusoid_table(max_len: int, dim: int, base: float = 10000.0, dtype=np.float64) -> np.ndarray:
    """Classic fixed sin/cos absolute-position table [max_len, dim]."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(base, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


class KVCache:
    """Preallocated per-layer key/value store for incremental decoding.

    Arrays are [batch, kv_heads, capacity, head_dim]; `append` writes past the
    current fill line of one layer. Byte accounting covers exactly the filled
    region: 2 * layers * batch * cached_len * kv_heads * head_dim * itemsize.
    """

    def __init__(self, layers: int, batch: int, kv_heads: int, head_dim: int, capacity: int, dtype=np.float32):
        if min(layers, batch, kv_heads, head_dim, capacity) < 1:
            raise ArgumentError("KVCache dims must be positive")
        self.layers = layers
        self.batch = batch
        self.kv_heads = kv_heads
        self.head_dim = head_dim
        self.capacity = capacity
        shape = (batch, kv_heads, capacity, head_dim)
        self.k = [np.zeros(shape, dtype=dtype) for _ in range(layers)]
        self.v = [np.zeros(shape, dtype=dtype) for _ in range(layers)]
        self._len = [0] * layers

    @property
    def cached_len(self) -> int:
        return self._len[0]

    def append(self, layer: int, k_new: np.ndarray, v_new: np.ndarray) -> None:
        n = k_new.shape[2]
        expect = (self.batch, self.kv_heads, n, self.head_dim)
        if k_new.shape != expect or v_new.shape != expect:
            raise DimensionError(f"cache append shape {k_new.shape}, expected {expect}")
        fill = self._len[layer]
        if fill + n > self.capacity:
            raise CapacityError(f"KV cache layer {layer} over capacity: {fill}+{n} > {self.capacity}")
        self.k[layer][:, :, fill : fill + n] = k_new
        self.v[layer][:, :, fill : fill + n] = v_new
        self._len[layer] = fill + n

    def view(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        fill = self._len[layer]
        return self.k[layer][:, :, :fill], self.v[layer][:, :, :fill]

    def size_bytes(self) -> int:
        itemsize = self.k[0].dtype.itemsize
        return 2 * self.batch * self.kv_heads * self.head_dim * itemsize * sum(self._len)

    def clone(self) -> "KVCache":
        other = KVCache.__new__(KVCache)
        other.layers = self.layers
        other.batch = self.batch
        other.kv_heads = self.kv_heads
        other.head_dim = self.head_dim
        other.capacity = self.capacity
        other.k = [a.copy() for a in self.k]
        other.v = [a.copy() for a in self.v]
        other._len = list(self._len)
        return other


@dataclass
class AttentionParams:
    """Projections for one attention site; kv_heads < heads shares keys/values."""

    wq: T.Parameter
    wk: T.Parameter
    wv: T.Parameter
    wo: T.Parameter
    heads: int
    kv_heads: int
    head_dim: int

    def parameters(self) -> list[T.Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]


def init_attention(
    name: str,
    dim: int,
    heads: int,
    rng: np.random.Generator,
    kv_heads: int | None = None,
    kv_dim: int | None = None,
    out_dim: int | None = None,
    init_std: float = 1.0,
    zero_out: bool = True,
) -> AttentionParams:
    kv_heads = heads if kv_heads is None else kv_heads
    kv_dim = dim if kv_dim is None else kv_dim
    out_dim = dim if out_dim is None else out_dim
    if dim % heads:
        raise DimensionError(f"dim {dim} not divisible by heads {heads}")
    if heads % kv_heads:
        raise DimensionError(f"heads {heads} not divisible by kv_heads {kv_heads}")
    hd = dim // heads

    def w(label, rows, cols):
        # Fan-in scaled init keeps activation magnitude width-independent.
        std = init_std / math.sqrt(rows)
        data = rng.normal(0.0, std, size=(rows, cols)).astype(T.default_dtype())
        return T.Parameter(data, name=f"{name}.{label}")

    def zero(label, rows, cols):
        return T.Parameter(np.zeros((rows, cols), dtype=T.default_dtype()), name=f"{name}.{label}")

    # `zero_out` starts the residual branch at zero so the block is an identity
    # map at init; deep stacks that must preserve token content (the frozen
    # encoder, the adaptor stack) want this, while shallow trainable stacks
    # learn faster with a standard random output projection.
    return AttentionParams(
        wq=w("wq", dim, heads * hd),
        wk=w("wk", kv_dim, kv_heads * hd),
        wv=w("wv", kv_dim, kv_heads * hd),
        wo=zero("wo", heads * hd, out_dim) if zero_out else w("wo", heads * hd, out_dim),
        heads=heads,
        kv_heads=kv_heads,
        head_dim=hd,
    )


def _split_heads(x: T.Tensor, heads: int, head_dim: int) -> T.Tensor:
    b, t, _ = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, head_dim)), (0, 2, 1, 3))


def _merge_heads(x: T.Tensor) -> T.Tensor:
    b, h, t, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * hd))


def attend(
    q_input: T.Tensor,
    kv_input: T.Tensor | None,
    mask: AttentionMask,
    params: AttentionParams,
    *,
    rope_q: tuple[np.ndarray, np.ndarray] | None = None,
    rope_k: tuple[np.ndarray, np.ndarray] | None = None,
    key_valid: np.ndarray | None = None,
    cache: KVCache | None = None,
    layer: int = 0,
    static_kv: tuple[np.ndarray, np.ndarray] | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention.

    `q_input` is [B, Q, d] (or [Q, d], treated as batch 1 and returned 2-D);
    `kv_input` holds the *new* key/value rows. With a cache, the new rows are
    projected, rotated, appended to `cache[layer]`, and attention runs over
    the whole filled cache (the inference path, callers wrap it in no_grad).
    `static_kv` supplies already-projected [B, kv_heads, K, hd] keys/values
    (e.g. a precomputed cross-attention cache), in which case `kv_input` is
    ignored. `mask.key_len` must equal the total key count. `key_valid` is an
    optional [B, key_len] bool that knocks out padded key columns per batch
    row. Returns the output tensor, plus the softmax weights
    [B, heads, Q, K] as a plain array when `return_weights` is set.
    """
    squeeze = q_input.ndim == 2
    if squeeze:
        q_input = T.reshape(q_input, (1,) + q_input.shape)
    if q_input.ndim != 3:
        raise DimensionError("attend expects [B, T, d] inputs")
    b, q_len, _ = q_input.shape

    h, kvh, hd = params.heads, params.kv_heads, params.head_dim
    q = _split_heads(T.matmul(q_input, params.wq), h, hd)
    if rope_q is not None:
        q = T.rope(q, rope_q[0].astype(q.dtype, copy=False), rope_q[1].astype(q.dtype, copy=False))

    if static_kv is not None:
        k, v = T.Tensor(static_kv[0]), T.Tensor(static_kv[1])
    else:
        if kv_input.ndim == 2:
            kv_input = T.reshape(kv_input, (1,) + kv_input.shape)
        if kv_input.shape[0] != b:
            raise DimensionError("query/key batch sizes differ")
        k = _split_heads(T.matmul(kv_input, params.wk), kvh, hd)
        v = _split_heads(T.matmul(kv_input, params.wv), kvh, hd)
        if rope_k is not None:
            k = T.rope(k, rope_k[0].astype(k.dtype, copy=False), rope_k[1].astype(k.dtype, copy=False))
        if cache is not None:
            if k.requires_grad or v.requires_grad:
                raise StateError("KV cache is an inference path; wrap generation in no_grad()")
            cache.append(layer, k.data, v.data)
            k_all, v_all = cache.view(layer)
            k, v = T.Tensor(k_all), T.Tensor(v_all)

    key_len = k.shape[2]
    if mask.query_len != q_len or mask.key_len != key_len:
        raise DimensionError(
            f"mask is {mask.query_len}x{mask.key_len} but attention sees {q_len} queries over {key_len} keys"
        )

    if kvh != h:
        k = T.repeat(k, h // kvh, axis=1)
        v = T.repeat(v, h // kvh, axis=1)

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    visible = mask.visibility[None, None]
    if key_valid is not None:
        key_valid = np.asarray(key_valid, dtype=bool)
        if key_valid.shape != (b, key_len):
            raise DimensionError(f"key_valid must be [B={b}, K={key_len}], got {key_valid.shape}")
        visible = visible & key_valid[:, None, None, :]
    weights = T.masked_softmax(scores, visible)
    out = _merge_heads(T.matmul(weights, v))
    out = T.matmul(out, params.wo)
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    if return_weights:
        return out, weights.data.copy()
    return out
