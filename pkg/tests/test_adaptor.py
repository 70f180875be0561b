"""Layer-group fusion, the width-matching MLP, and the bidirectional stack."""

import numpy as np
import pytest

from lamate import tensor as T
from lamate.adaptor import Adaptor, AdaptorConfig, group_last_indices
from lamate.errors import ArgumentError, DimensionError

from conftest import randomize


def make_adaptor(rng=None, **overrides):
    cfg = dict(
        groups=2,
        d_in=6,
        d_out=4,
        enc_stack_enabled=True,
        enc_stack_layers=1,
        enc_stack_heads=2,
        max_len=16,
    )
    cfg.update(overrides)
    adaptor = Adaptor(AdaptorConfig(**cfg), seed=3)
    if rng is not None:
        randomize(adaptor.parameters(), rng)
    return adaptor


def manual_layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def test_group_last_indices_oracle():
    assert group_last_indices(8, 4) == [2, 4, 6, 8]
    assert group_last_indices(4, 2) == [2, 4]
    assert group_last_indices(6, 1) == [6]
    assert group_last_indices(6, 6) == [1, 2, 3, 4, 5, 6]
    with pytest.raises(DimensionError):
        group_last_indices(6, 4)


def test_fuse_weighted_mean_hand_check(rng):
    adaptor = make_adaptor()
    adaptor.fuse_w.data = np.array([2.0, 4.0], dtype=np.float32)
    # 4 block outputs + embedding state; groups=2 picks states[2] and states[4]
    states_np = [rng.normal(size=(1, 3, 6)).astype(np.float32) for _ in range(5)]
    out = adaptor.fuse([T.Tensor(s) for s in states_np])
    expect = manual_layer_norm((2.0 * states_np[2] + 4.0 * states_np[4]) / 2.0)
    np.testing.assert_allclose(out.data, expect, atol=1e-5)


def test_fuse_rejects_wrong_width(rng):
    adaptor = make_adaptor()
    states = [T.Tensor(rng.normal(size=(1, 3, 5)).astype(np.float32)) for _ in range(5)]
    with pytest.raises(DimensionError):
        adaptor.fuse(states)


def test_project_is_biasless_gelu_mlp(rng):
    adaptor = make_adaptor(rng)
    h = rng.normal(size=(1, 3, 6)).astype(np.float32)
    out = adaptor.project(T.Tensor(h))
    hidden = h @ adaptor.mlp_w1.data
    from scipy.special import erf

    hidden = hidden * 0.5 * (1.0 + erf(hidden / np.sqrt(2.0)))
    np.testing.assert_allclose(out.data, hidden @ adaptor.mlp_w2.data, atol=1e-5)


def test_enc_stack_is_bidirectional(rng):
    adaptor = make_adaptor(rng)
    h = rng.normal(size=(1, 4, 4)).astype(np.float32)
    base = adaptor.enc_stack(T.Tensor(h)).data
    bumped = h.copy()
    bumped[0, 3] += 1.0
    moved = adaptor.enc_stack(T.Tensor(bumped)).data
    # a change at the last position reaches position 0: not a causal stack
    assert not np.array_equal(base[0, 0], moved[0, 0])


def test_enc_stack_adds_positions_at_input(rng):
    adaptor = make_adaptor(rng)
    h = rng.normal(size=(1, 2, 4)).astype(np.float32)
    # identical rows at different positions must produce different outputs,
    # which can only come from the additive position table
    same = np.concatenate([h[:, :1], h[:, :1]], axis=1)
    out = adaptor.enc_stack(T.Tensor(same)).data
    assert not np.array_equal(out[0, 0], out[0, 1])


def test_forward_applies_final_layer_norm(rng):
    adaptor = make_adaptor(rng)
    # default gamma/beta survive randomize only if we reset them
    adaptor.final_ln_g.data = np.ones(4, dtype=np.float32)
    adaptor.final_ln_b.data = np.zeros(4, dtype=np.float32)
    states = [T.Tensor(rng.normal(size=(2, 3, 6)).astype(np.float32)) for _ in range(5)]
    out = adaptor.forward(states).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)


def test_forward_without_stack_keeps_projection_path(rng):
    adaptor = make_adaptor(rng, enc_stack_enabled=False, enc_stack_layers=0)
    assert adaptor.stack == []
    states_np = [rng.normal(size=(1, 3, 6)).astype(np.float32) for _ in range(5)]
    out = adaptor.forward([T.Tensor(s) for s in states_np])
    manual = adaptor.project(adaptor.fuse([T.Tensor(s) for s in states_np]))
    expect = T.layer_norm(manual, adaptor.final_ln_g, adaptor.final_ln_b)
    np.testing.assert_allclose(out.data, expect.data, atol=1e-6)


def test_stack_starts_as_identity_over_positioned_input():
    # freshly built (zero residual projections): stack(x) == x + positions
    adaptor = make_adaptor()
    rng = np.random.default_rng(7)
    h = rng.normal(size=(1, 3, 4)).astype(np.float32)
    out = adaptor.enc_stack(T.Tensor(h)).data
    np.testing.assert_allclose(out, h + adaptor._pe[:3].astype(np.float32), atol=1e-6)


def test_config_validation():
    with pytest.raises(DimensionError):
        AdaptorConfig(d_out=6, enc_stack_heads=4)
    with pytest.raises(ArgumentError):
        AdaptorConfig(groups=0)
    with pytest.raises(ArgumentError):
        AdaptorConfig(enc_stack_enabled=True, enc_stack_layers=0)
