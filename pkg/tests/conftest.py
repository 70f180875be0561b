"""Shared fixtures: tiny model configs sized for fast, exact unit checks."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lamate.adaptor import AdaptorConfig
from lamate.decoder import DecoderConfig
from lamate.encoder import EncoderConfig
from lamate.model import LamateConfig, LamateModel

settings.register_profile(
    "default",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


TINY_VOCAB = 32
TINY_MAX_LEN = 24


def tiny_config(variant: str = "cross", **decoder_overrides) -> LamateConfig:
    dec = dict(
        vocab_size=TINY_VOCAB,
        dim=8,
        layers=2,
        heads=2,
        max_len=TINY_MAX_LEN,
        variant=variant,
    )
    dec.update(decoder_overrides)
    return LamateConfig(
        encoder=EncoderConfig(
            vocab_size=TINY_VOCAB, dim=16, layers=4, heads=2, groups=2, max_len=TINY_MAX_LEN
        ),
        adaptor=AdaptorConfig(
            groups=2,
            d_in=16,
            d_out=8,
            enc_stack_enabled=True,
            enc_stack_layers=1,
            enc_stack_heads=2,
            max_len=TINY_MAX_LEN,
        ),
        decoder=DecoderConfig(**dec),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model():
    return LamateModel(tiny_config(), seed=0)


def make_model(variant: str = "cross", seed: int = 0) -> LamateModel:
    return LamateModel(tiny_config(variant), seed=seed)


def randomize(params, rng, scale: float = 0.05) -> None:
    """Give every parameter a generic random value.

    Several residual-branch projections are zero at construction; gradient
    and equivalence checks must not run at that special point, where a
    broken gradient path could hide behind an exactly-zero gradient.
    """
    for p in params:
        p.data = rng.normal(0.0, scale, size=p.shape).astype(p.dtype)
