"""Decoder variants: teacher-forced/incremental parity, masking, cache bytes."""

import math

import numpy as np
import pytest

from lamate import tensor as T
from lamate.decoder import VARIANTS, DecoderConfig, TranslationDecoder
from lamate.errors import ArgumentError, DimensionError, LengthError

from conftest import randomize

DIM = 8


def make_decoder(variant, rng=None, **overrides):
    cfg = dict(vocab_size=13, dim=DIM, layers=2, heads=2, max_len=24, variant=variant)
    cfg.update(overrides)
    dec = TranslationDecoder(DecoderConfig(**cfg), seed=5)
    if rng is not None:
        randomize(dec.parameters(), rng)
    return dec


def teacher_logits(dec, h_src, y_in, src_valid=None):
    return dec.forward_teacher_forced(T.Tensor(h_src), y_in, src_valid=src_valid).data


def incremental_logits(dec, h_src, y_in, src_valid=None):
    state = dec.init_state(h_src, src_valid=src_valid, max_new=y_in.shape[1])
    cols = []
    for t in range(y_in.shape[1]):
        cols.append(dec.decode_step(state, y_in[:, t]))
    return np.stack(cols, axis=1), state


@pytest.mark.parametrize("variant", VARIANTS)
def test_teacher_forced_matches_incremental(variant, rng):
    dec = make_decoder(variant, rng)
    h_src = rng.normal(size=(2, 5, DIM)).astype(np.float32)
    y_in = rng.integers(0, 13, size=(2, 6))
    full = teacher_logits(dec, h_src, y_in)
    stepped, state = incremental_logits(dec, h_src, y_in)
    assert full.shape == (2, 6, 13)
    np.testing.assert_allclose(stepped, full, atol=1e-5)
    assert state.pos == 6


@pytest.mark.parametrize("variant", VARIANTS)
def test_target_causality_is_bitwise(variant, rng):
    dec = make_decoder(variant, rng)
    h_src = rng.normal(size=(1, 4, DIM)).astype(np.float32)
    y_in = rng.integers(0, 13, size=(1, 6))
    base = teacher_logits(dec, h_src, y_in)
    for j in [2, 5]:
        moved = y_in.copy()
        moved[0, j] = (moved[0, j] + 1) % 13
        out = teacher_logits(dec, h_src, moved)
        assert np.array_equal(base[:, :j], out[:, :j])
        assert not np.array_equal(base[:, j:], out[:, j:])


@pytest.mark.parametrize("variant", VARIANTS)
def test_source_reaches_every_target_position(variant, rng):
    dec = make_decoder(variant, rng)
    h_src = rng.normal(size=(1, 4, DIM)).astype(np.float32)
    y_in = rng.integers(0, 13, size=(1, 5))
    base = teacher_logits(dec, h_src, y_in)
    bumped = h_src.copy()
    bumped[0, 3] += 0.5
    out = teacher_logits(dec, bumped, y_in)
    for t in range(5):
        assert not np.array_equal(base[0, t], out[0, t])


@pytest.mark.parametrize("variant", VARIANTS)
def test_src_valid_excludes_padded_columns(variant, rng):
    dec = make_decoder(variant, rng)
    h_src = rng.normal(size=(1, 4, DIM)).astype(np.float32)
    y_in = rng.integers(0, 13, size=(1, 5))
    padded = np.concatenate([h_src, rng.normal(size=(1, 2, DIM)).astype(np.float32)], axis=1)
    src_valid = np.array([[True] * 4 + [False] * 2])
    unpadded = teacher_logits(dec, h_src, y_in)
    masked = teacher_logits(dec, padded, y_in, src_valid=src_valid)
    np.testing.assert_allclose(masked, unpadded, atol=1e-5)
    stepped, _ = incremental_logits(dec, padded, y_in, src_valid=src_valid)
    np.testing.assert_allclose(stepped, unpadded, atol=1e-5)


@pytest.mark.parametrize("variant", VARIANTS)
def test_cache_bytes_formula(variant, rng):
    dec = make_decoder(variant, rng)
    s, t, b = 5, 3, 2
    h_src = rng.normal(size=(b, s, DIM)).astype(np.float32)
    state = dec.init_state(h_src, max_new=8)
    for i in range(t):
        dec.decode_step(state, np.full(b, i % 13))
    # every variant holds exactly the teacher-forced key/value set:
    # 2 (k and v) * layers * (s + t) rows * dim * itemsize, per batch row
    assert state.total_bytes() == 2 * dec.config.layers * (s + t) * DIM * 4 * b


def test_state_clone_is_independent(rng):
    dec = make_decoder("cross", rng)
    h_src = rng.normal(size=(1, 3, DIM)).astype(np.float32)
    y = rng.integers(0, 13, size=(1, 4))
    reference, _ = incremental_logits(dec, h_src, y)

    state = dec.init_state(h_src, max_new=4)
    dec.decode_step(state, y[:, 0])
    fork = state.clone()
    dec.decode_step(fork, np.array([7]))
    dec.decode_step(fork, np.array([9]))
    # the original continues as if the fork never happened
    out1 = dec.decode_step(state, y[:, 1])
    np.testing.assert_allclose(out1, reference[:, 1], atol=1e-6)


def test_return_weights_counts_sites(rng):
    h = np.random.default_rng(1).normal(size=(1, 3, DIM)).astype(np.float32)
    y = np.array([[1, 2]])
    for variant, sites in [("cross", 4), ("concat", 2), ("prefix", 2)]:
        dec = make_decoder(variant, rng)
        _, weights = dec.forward_teacher_forced(T.Tensor(h), y, return_weights=True)
        assert len(weights) == sites
        for w in weights:
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-5)


def test_target_embedding_scale_and_positions(rng):
    dec = make_decoder("cross", rng)
    y = np.array([[3, 8]])
    got = dec._embed_targets(y).data
    expect = dec.emb.data[y] * math.sqrt(DIM) + dec._pe[:2].astype(np.float32)
    np.testing.assert_allclose(got, expect, atol=1e-6)
    step = dec._embed_step(np.array([8]), pos=1).data
    np.testing.assert_allclose(step[:, 0], expect[:, 1], atol=1e-6)


def test_length_and_shape_validation(rng):
    dec = make_decoder("cross", rng)
    h = rng.normal(size=(1, 3, DIM)).astype(np.float32)
    with pytest.raises(LengthError):
        dec.forward_teacher_forced(T.Tensor(h), np.zeros((1, 25), dtype=np.int64))
    with pytest.raises(DimensionError):
        dec.forward_teacher_forced(T.Tensor(h[:, :, :4]), np.array([[1]]))
    with pytest.raises(DimensionError):
        dec.forward_teacher_forced(T.Tensor(h), np.array([[1], [2]]))
    state = dec.init_state(h)
    with pytest.raises(DimensionError):
        dec.decode_step(state, np.array([1, 2]))


def test_config_validation():
    with pytest.raises(ArgumentError):
        DecoderConfig(variant="gated")
    with pytest.raises(ArgumentError):
        DecoderConfig(layers=0)
    with pytest.raises(DimensionError):
        DecoderConfig(dim=10, heads=4)
