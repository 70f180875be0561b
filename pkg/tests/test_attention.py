"""Mask grids, position tables, the KV cache, and the attention kernel."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lamate import attention as A
from lamate import tensor as T
from lamate.errors import ArgumentError, CapacityError, DimensionError, StateError

# ---------------------------------------------------------------- mask oracles


def test_causal_square_grid():
    mask = A.build_mask("causal", 3, 3)
    np.testing.assert_array_equal(
        mask.visibility,
        [[True, False, False], [True, True, False], [True, True, True]],
    )


def test_causal_end_aligned_rectangular():
    # 2 queries over 4 keys: the queries are the *last* two positions, so the
    # first query row already sees the three oldest keys.
    mask = A.build_mask("causal", 2, 4)
    np.testing.assert_array_equal(
        mask.visibility,
        [[True, True, True, False], [True, True, True, True]],
    )


def test_causal_single_row_sees_all_cached_keys():
    mask = A.build_mask("causal", 1, 5)
    assert mask.visibility.all()


def test_fully_visible_grid():
    assert A.build_mask("fully_visible", 2, 3).visibility.all()


def test_prefix_grid():
    mask = A.build_mask("prefix", 3, 5, prefix_len=2)
    np.testing.assert_array_equal(
        mask.visibility,
        [
            [True, True, True, False, False],
            [True, True, True, True, False],
            [True, True, True, True, True],
        ],
    )


def test_mask_argument_errors():
    with pytest.raises(ArgumentError):
        A.build_mask("diagonal", 2, 2)
    with pytest.raises(DimensionError):
        A.build_mask("causal", 0, 2)
    with pytest.raises(ArgumentError):
        A.build_mask("prefix", 2, 2)
    with pytest.raises(ArgumentError):
        A.build_mask("prefix", 2, 2, prefix_len=3)
    with pytest.raises(ArgumentError):
        A.build_mask("causal", 2, 2, prefix_len=1)
    with pytest.raises(DimensionError):
        A.build_mask("causal", 3, 2)


@given(
    st.sampled_from(A.MASK_KINDS),
    st.integers(1, 8),
    st.integers(1, 8),
    st.integers(0, 8),
)
def test_mask_rows_never_empty_and_left_contiguous(kind, q, k, prefix):
    if kind == "prefix":
        prefix = min(prefix, k)
        if k < q and prefix == 0:
            return
        mask = A.build_mask(kind, q, k, prefix_len=prefix)
    else:
        if kind == "causal" and k < q:
            return
        mask = A.build_mask(kind, q, k)
    vis = mask.visibility
    assert vis.any(axis=1).all()
    # every row is a run of True starting at key 0 (no holes)
    for row in vis:
        n = int(row.sum())
        assert row[:n].all() and not row[n:].any()


# ---------------------------------------------------------------- position tables


def test_rope_position_zero_is_identity(rng):
    cos, sin = A.rope_tables(np.array([0]), 8)
    x = rng.normal(size=(1, 2, 1, 8))
    out = T.rope(T.Tensor(x), cos, sin)
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_rope_preserves_norm(rng):
    cos, sin = A.rope_tables(np.arange(5), 8)
    x = rng.normal(size=(2, 3, 5, 8))
    out = T.rope(T.Tensor(x.astype(np.float64)), cos, sin)
    np.testing.assert_allclose(
        np.linalg.norm(out.data, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-9
    )


@given(st.integers(0, 20), st.integers(0, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_rope_dot_products_depend_only_on_offset(m, n, shift, seed):
    rng = np.random.default_rng(seed)
    qv = rng.normal(size=8)
    kv = rng.normal(size=8)

    def rotated_dot(pos_q, pos_k):
        cos, sin = A.rope_tables(np.array([pos_q, pos_k]), 8)
        x = np.stack([qv, kv])[None]
        out = T.rope(T.Tensor(x.astype(np.float64)), cos, sin).data[0]
        return float(out[0] @ out[1])

    assert rotated_dot(m, n) == pytest.approx(rotated_dot(m + shift, n + shift), abs=1e-9)


def test_sinusoid_table_hand_values():
    table = A.sinusoid_table(3, 4, base=100.0)
    for p in range(3):
        np.testing.assert_allclose(
            table[p],
            [math.sin(p), math.cos(p), math.sin(p / 10.0), math.cos(p / 10.0)],
            atol=1e-12,
        )


def test_sinusoid_table_row_zero():
    table = A.sinusoid_table(1, 6)
    np.testing.assert_allclose(table[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0], atol=1e-12)


# ---------------------------------------------------------------- KV cache


def test_cache_append_view_and_bytes(rng):
    cache = A.KVCache(layers=2, batch=3, kv_heads=2, head_dim=4, capacity=10)
    k = rng.normal(size=(3, 2, 4, 4)).astype(np.float32)
    v = rng.normal(size=(3, 2, 4, 4)).astype(np.float32)
    cache.append(0, k, v)
    got_k, got_v = cache.view(0)
    np.testing.assert_array_equal(got_k, k)
    np.testing.assert_array_equal(got_v, v)
    assert cache.view(1)[0].shape[2] == 0
    # 2 (k and v) * batch * kv_heads * head_dim * itemsize * total filled rows
    assert cache.size_bytes() == 2 * 3 * 2 * 4 * 4 * 4


def test_cache_capacity_and_shape_errors(rng):
    cache = A.KVCache(layers=1, batch=1, kv_heads=1, head_dim=2, capacity=3)
    block = rng.normal(size=(1, 1, 2, 2)).astype(np.float32)
    cache.append(0, block, block)
    with pytest.raises(CapacityError):
        cache.append(0, block, block)
    with pytest.raises(DimensionError):
        cache.append(0, block[:, :, :, :1], block[:, :, :, :1])
    with pytest.raises(ArgumentError):
        A.KVCache(layers=0, batch=1, kv_heads=1, head_dim=1, capacity=1)


def test_cache_clone_is_independent(rng):
    cache = A.KVCache(layers=1, batch=1, kv_heads=1, head_dim=2, capacity=4)
    block = rng.normal(size=(1, 1, 1, 2)).astype(np.float32)
    cache.append(0, block, block)
    other = cache.clone()
    other.append(0, block, block)
    assert cache.cached_len == 1
    assert other.cached_len == 2
    other.k[0][:] = 0.0
    assert cache.k[0].any()


# ---------------------------------------------------------------- attention kernel


def make_params(rng, dim=8, heads=2, kv_heads=None, zero_out=False):
    return A.init_attention("t", dim, heads, rng, kv_heads=kv_heads, zero_out=zero_out)


def manual_attention(x_q, x_kv, params, visible):
    """Independent numpy re-computation, including the grouped-KV repeat."""
    h, kvh, hd = params.heads, params.kv_heads, params.head_dim
    b, q_len, _ = x_q.shape

    def split(x, n):
        return x.reshape(x.shape[0], x.shape[1], n, hd).transpose(0, 2, 1, 3)

    q = split(x_q @ params.wq.data, h)
    k = split(x_kv @ params.wk.data, kvh)
    v = split(x_kv @ params.wv.data, kvh)
    if kvh != h:
        k = np.repeat(k, h // kvh, axis=1)
        v = np.repeat(v, h // kvh, axis=1)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(hd)
    scores = np.where(visible, scores, -np.inf)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    out = (w @ v).transpose(0, 2, 1, 3).reshape(b, q_len, h * hd)
    return out @ params.wo.data


def test_attend_matches_manual_computation(rng):
    params = make_params(rng)
    x = rng.normal(size=(2, 3, 8)).astype(np.float32)
    mask = A.build_mask("causal", 3, 3)
    out = A.attend(T.Tensor(x), T.Tensor(x), mask, params)
    np.testing.assert_allclose(
        out.data, manual_attention(x, x, params, mask.visibility[None, None]), atol=1e-5
    )


def test_attend_grouped_kv_matches_manual(rng):
    params = make_params(rng, heads=4, kv_heads=2)
    x = rng.normal(size=(1, 4, 8)).astype(np.float32)
    mask = A.build_mask("fully_visible", 4, 4)
    out = A.attend(T.Tensor(x), T.Tensor(x), mask, params)
    np.testing.assert_allclose(
        out.data, manual_attention(x, x, params, mask.visibility[None, None]), atol=1e-5
    )


def test_attend_key_valid_zeroes_padded_columns(rng):
    params = make_params(rng)
    x = rng.normal(size=(2, 3, 8)).astype(np.float32)
    mask = A.build_mask("fully_visible", 2, 3)
    q = rng.normal(size=(2, 2, 8)).astype(np.float32)
    key_valid = np.array([[True, True, False], [True, True, True]])
    out, weights = A.attend(
        T.Tensor(q), T.Tensor(x), mask, params, key_valid=key_valid, return_weights=True
    )
    assert (weights[0, :, :, 2] == 0.0).all()
    assert weights[1, :, :, 2].any()
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
    # row 0 must equal attention computed over only its two valid keys
    solo = A.attend(
        T.Tensor(q[:1]), T.Tensor(x[:1, :2]), A.build_mask("fully_visible", 2, 2), params
    )
    np.testing.assert_allclose(out.data[0], solo.data[0], atol=1e-5)


def test_attend_static_kv_matches_projection(rng):
    params = make_params(rng)
    x_kv = rng.normal(size=(1, 3, 8)).astype(np.float32)
    x_q = rng.normal(size=(1, 2, 8)).astype(np.float32)
    mask = A.build_mask("fully_visible", 2, 3)
    kvh, hd = params.kv_heads, params.head_dim

    def split(x):
        return x.reshape(1, 3, kvh, hd).transpose(0, 2, 1, 3)

    static = (split(x_kv @ params.wk.data), split(x_kv @ params.wv.data))
    via_input = A.attend(T.Tensor(x_q), T.Tensor(x_kv), mask, params)
    via_static = A.attend(T.Tensor(x_q), None, mask, params, static_kv=static)
    np.testing.assert_allclose(via_static.data, via_input.data, atol=1e-5)


def test_attend_incremental_cache_matches_full(rng):
    params = make_params(rng)
    x = rng.normal(size=(1, 4, 8)).astype(np.float32)
    full = A.attend(T.Tensor(x), T.Tensor(x), A.build_mask("causal", 4, 4), params)
    cache = A.KVCache(layers=1, batch=1, kv_heads=params.kv_heads, head_dim=params.head_dim, capacity=4)
    with T.no_grad():
        for t in range(4):
            step = A.attend(
                T.Tensor(x[:, t : t + 1]),
                T.Tensor(x[:, t : t + 1]),
                A.build_mask("causal", 1, t + 1),
                params,
                cache=cache,
            )
            np.testing.assert_allclose(step.data[0, 0], full.data[0, t], atol=1e-5)


def test_attend_cache_rejects_graph_building(rng):
    params = make_params(rng)
    x = rng.normal(size=(1, 1, 8)).astype(np.float32)
    cache = A.KVCache(layers=1, batch=1, kv_heads=params.kv_heads, head_dim=params.head_dim, capacity=2)
    with pytest.raises(StateError):
        A.attend(T.Tensor(x), T.Tensor(x), A.build_mask("causal", 1, 1), params, cache=cache)


def test_attend_mask_size_mismatch(rng):
    params = make_params(rng)
    x = rng.normal(size=(1, 3, 8)).astype(np.float32)
    with pytest.raises(DimensionError):
        A.attend(T.Tensor(x), T.Tensor(x), A.build_mask("causal", 2, 2), params)


def test_init_attention_validation(rng):
    with pytest.raises(DimensionError):
        A.init_attention("t", 9, 2, rng)
    with pytest.raises(DimensionError):
        A.init_attention("t", 8, 4, rng, kv_heads=3)
    zeroed = A.init_attention("t", 8, 2, rng, zero_out=True)
    assert not zeroed.wo.data.any()
    assert zeroed.wq.data.any()
