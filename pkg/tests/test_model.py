"""Assembled model: partitions, wiring validation, the generation protocol."""

import numpy as np
import pytest

from lamate import tensor as T
from lamate.adaptor import AdaptorConfig
from lamate.decoder import DecoderConfig
from lamate.encoder import CausalLM, EncoderConfig
from lamate.errors import ConfigError, DimensionError
from lamate.model import CausalLMTranslator, LamateConfig, LamateModel
from lamate.tasks import BOS, EOS, SEP, Example
from lamate.training import collate

from conftest import TINY_VOCAB, make_model, randomize, tiny_config


def test_partitions_are_disjoint_and_complete(tiny_model):
    parts = tiny_model.partitions()
    assert set(parts) == {"theta", "omega", "phi"}
    ids = [id(p) for ps in parts.values() for p in ps]
    assert len(ids) == len(set(ids))
    assert ids == [id(p) for p in tiny_model.parameters()]
    names = tiny_model.partition_names()
    assert all(n.startswith("encoder.") for n in names["theta"])
    assert all(n.startswith("adaptor.") for n in names["omega"])
    assert all(n.startswith("decoder.") for n in names["phi"])


def test_config_cross_checks():
    good = tiny_config()
    with pytest.raises(ConfigError):
        LamateConfig(
            encoder=good.encoder,
            adaptor=AdaptorConfig(groups=4, d_in=16, d_out=8, enc_stack_heads=2, max_len=24),
            decoder=good.decoder,
        )
    with pytest.raises(ConfigError):
        LamateConfig(
            encoder=good.encoder,
            adaptor=AdaptorConfig(groups=2, d_in=32, d_out=8, enc_stack_heads=2, max_len=24),
            decoder=good.decoder,
        )
    with pytest.raises(ConfigError):
        LamateConfig(
            encoder=good.encoder,
            adaptor=good.adaptor,
            decoder=DecoderConfig(vocab_size=TINY_VOCAB, dim=16, layers=1, heads=2, max_len=24),
        )
    with pytest.raises(ConfigError):
        LamateConfig(
            encoder=good.encoder,
            adaptor=good.adaptor,
            decoder=DecoderConfig(vocab_size=64, dim=8, layers=1, heads=2, max_len=24),
        )


def test_source_states_shape(tiny_model, rng):
    randomize(tiny_model.parameters(), rng)
    ids = rng.integers(0, TINY_VOCAB, size=(3, 7))
    h = tiny_model.source_states(ids)
    assert h.shape == (3, 7, 8)


def test_batch_loss_runs_and_backward_reaches_all_partitions(rng):
    model = make_model()
    randomize(model.parameters(), rng)
    examples = [
        Example(task="general", prompt=list(r[:2]), source=list(r[2:6]), target=list(r[6:10]))
        for r in rng.integers(4, TINY_VOCAB, size=(4, 10))
    ]
    batch = collate(examples)
    loss = model.batch_loss(batch)
    T.backward(loss)
    for part, params in model.partitions().items():
        assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in params), part


def test_start_appends_eos_and_step_protocol(rng):
    model = make_model()
    randomize(model.parameters(), rng)
    prompt, source = [4, 5], [6, 7, 8]
    state = model.start(prompt, source, max_new=4)
    # the encoder read [prompt + source + EOS]: 6 positions in the cross cache
    assert state.cross_cache.cached_len == 6
    logits = model.step(state, np.array([model.initial_token]))
    assert logits.shape == (1, TINY_VOCAB)
    assert model.initial_token == BOS
    assert model.eos_token == EOS


def test_sequence_log_prob_matches_incremental_scoring(rng):
    model = make_model()
    randomize(model.parameters(), rng)
    prompt, source = [4, 9], [10, 11]
    tokens = [5, 7, 2]
    via_forward = model.sequence_log_prob(prompt, source, tokens)

    state = model.start(prompt, source, max_new=len(tokens))
    feed = model.initial_token
    total = 0.0
    for tok in tokens:
        logits = model.step(state, np.array([feed])).astype(np.float64)[0]
        logits -= logits.max()
        logp = logits - np.log(np.exp(logits).sum())
        total += logp[tok]
        feed = tok
    assert via_forward == pytest.approx(total, abs=1e-4)
    assert model.sequence_log_prob(prompt, source, []) == 0.0


def test_batched_start_pads_and_masks(rng):
    model = make_model()
    randomize(model.parameters(), rng)
    # two rows of different lengths: padding must not change the short row
    state_pair = model.start([[4], [4, 5]], [[6, 7], [6, 7, 8]], max_new=3)
    state_solo = model.start([4], [6, 7], max_new=3)
    batched = model.step(state_pair, np.array([BOS, BOS]))
    solo = model.step(state_solo, np.array([BOS]))
    np.testing.assert_allclose(batched[0], solo[0], atol=1e-5)


def test_decoder_only_translator_protocol(rng):
    lm = CausalLM(EncoderConfig(vocab_size=TINY_VOCAB, dim=16, layers=2, heads=2, groups=1, max_len=32), seed=1)
    randomize(lm.parameters(), rng)
    wrap = CausalLMTranslator(lm)
    assert wrap.initial_token == SEP
    state = wrap.start([1, 2], [3, 4], max_new=3)
    assert state.pos == 4
    logits = wrap.step(state, np.array([SEP]))
    assert logits.shape == (1, TINY_VOCAB)
    assert state.total_bytes() == state.cache.size_bytes()
    with pytest.raises(DimensionError):
        wrap.start([[1], [1, 2]], [[3, 4], [3, 4]])


def test_decoder_only_step_matches_full_forward(rng):
    lm = CausalLM(EncoderConfig(vocab_size=TINY_VOCAB, dim=16, layers=2, heads=2, groups=1, max_len=32), seed=1)
    randomize(lm.parameters(), rng)
    wrap = CausalLMTranslator(lm)
    ids = [3, 9, 4, 8]
    state = wrap.start([], ids, max_new=4)
    out = wrap.step(state, np.array([SEP]))
    with T.no_grad():
        full = lm.lm_logits(np.array([ids + [SEP]])).data
    np.testing.assert_allclose(out, full[:, -1], atol=1e-5)
