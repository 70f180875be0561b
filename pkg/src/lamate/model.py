"""Assembled translation models and their shared generation interface.

`LamateModel` wires the three components together: causal encoder (theta),
adaptor (omega), translation decoder (phi). `CausalLMTranslator` wraps the
bare causal LM as a decoder-only translator (prompt + source, then continue
after a separator), which is both the LM-pretraining target and the
efficiency comparison point.

Generation protocol shared by both (and by the scripted test models in the
decoding tests): `start(prompt_ids, source_ids)` builds a state,
`step(state, tokens)` feeds one token per batch row and returns next-token
logits [B, V]; `initial_token` is what a decode loop feeds first, and
`state.clone()` gives beam search private copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adaptor import Adaptor, AdaptorConfig
from .attention import KVCache
from .decoder import DecoderConfig, DecoderState, TranslationDecoder
from .encoder import CausalLM, EncoderConfig
from .errors import ConfigError, DimensionError
from .tasks import BOS, EOS, SEP


@dataclass
class LamateConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adaptor: AdaptorConfig = field(default_factory=AdaptorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.adaptor.groups != self.encoder.groups:
            raise ConfigError(
                f"adaptor groups {self.adaptor.groups} != encoder groups {self.encoder.groups}"
            )
        if self.adaptor.d_in != self.encoder.dim:
            raise ConfigError(f"adaptor d_in {self.adaptor.d_in} != encoder dim {self.encoder.dim}")
        if self.adaptor.d_out != self.decoder.dim:
            raise ConfigError(f"adaptor d_out {self.adaptor.d_out} != decoder dim {self.decoder.dim}")
        if self.encoder.vocab_size != self.decoder.vocab_size:
            raise ConfigError("encoder and decoder must share a vocabulary")
        if self.adaptor.max_len < self.encoder.max_len:
            raise ConfigError("adaptor max_len must cover encoder max_len")


def _as_batch(ids, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Lists of id-lists (or one list, or an array) -> padded [B, T] ids + validity."""
    if isinstance(ids, np.ndarray):
        if ids.ndim == 1:
            ids = ids[None]
        return ids.astype(np.int64), np.ones(ids.shape, dtype=bool)
    if ids and isinstance(ids[0], (int, np.integer)):
        ids = [list(ids)]
    width = max(len(r) for r in ids)
    out = np.full((len(ids), width), pad, dtype=np.int64)
    valid = np.zeros((len(ids), width), dtype=bool)
    for i, row in enumerate(ids):
        out[i, : len(row)] = row
        valid[i, : len(row)] = True
    return out, valid


class LamateModel:
    """Frozen-encoder translation model: S = Dec_phi(H', y), H' = F_omega(Dec_theta([c, x]))."""

    def __init__(self, config: LamateConfig, seed: int = 0):
        self.config = config
        self.encoder = CausalLM(config.encoder, seed=seed, name="encoder")
        self.adaptor = Adaptor(config.adaptor, seed=seed + 1, name="adaptor")
        self.decoder = TranslationDecoder(config.decoder, seed=seed + 2, name="decoder")
        self.initial_token = BOS
        self.eos_token = EOS

    # ---- parameters ---------------------------------------------------------

    def partitions(self) -> dict[str, list[T.Parameter]]:
        return {
            "theta": self.encoder.parameters(),
            "omega": self.adaptor.parameters(),
            "phi": self.decoder.parameters(),
        }

    def parameters(self) -> list[T.Parameter]:
        return self.encoder.parameters() + self.adaptor.parameters() + self.decoder.parameters()

    def named_parameters(self) -> dict[str, T.Parameter]:
        return {p.name: p for p in self.parameters()}

    def partition_names(self) -> dict[str, list[str]]:
        return {k: [p.name for p in v] for k, v in self.partitions().items()}

    def set_dropout(self, p: float, rng: np.random.Generator | None) -> None:
        self.encoder.set_dropout(p, rng)
        self.adaptor.set_dropout(p, rng)
        self.decoder.set_dropout(p, rng)

    # ---- training-side forward ------------------------------------------------

    def source_states(self, enc_ids: np.ndarray, enc_valid: np.ndarray | None = None) -> T.Tensor:
        """H' [B, S, d2] for a padded encoder-input batch."""
        states = self.encoder.forward_states(enc_ids, key_valid=enc_valid)
        return self.adaptor.forward(states, key_valid=enc_valid)

    def batch_loss(self, batch, label_smoothing: float = 0.0) -> T.Tensor:
        h = self.source_states(batch.enc_ids, batch.enc_valid)
        logits = self.decoder.forward_teacher_forced(h, batch.dec_in, src_valid=batch.enc_valid)
        return T.cross_entropy(logits, batch.dec_tgt, mask=batch.dec_mask, label_smoothing=label_smoothing)

    # ---- generation -----------------------------------------------------------

    def start(self, prompt_ids, source_ids, max_new: int | None = None) -> DecoderState:
        """Encode [prompt + source + <eos>] rows and prime a decoder state."""
        rows = _join_rows(prompt_ids, source_ids, tail=[EOS])
        enc_ids, enc_valid = _as_batch(rows)
        with T.no_grad():
            h = self.source_states(enc_ids, enc_valid)
        max_new = self.config.decoder.max_len if max_new is None else max_new
        return self.decoder.init_state(h, src_valid=enc_valid, max_new=max_new)

    def step(self, state: DecoderState, tokens) -> np.ndarray:
        return self.decoder.decode_step(state, tokens)

    def sequence_log_prob(self, prompt_ids, source_ids, tokens: list[int]) -> float:
        """Sum of log P(token_j | prefix) via the teacher-forced (cache-free)
        path; lets callers cross-check incremental decoding scores."""
        if not tokens:
            return 0.0
        enc_ids, enc_valid = _as_batch(_join_rows(prompt_ids, source_ids, tail=[EOS]))
        with T.no_grad():
            h = self.source_states(enc_ids, enc_valid)
            y_in = np.array([[self.initial_token] + list(tokens[:-1])], dtype=np.int64)
            logits = self.decoder.forward_teacher_forced(h, y_in, src_valid=enc_valid).data[0]
        x = logits.astype(np.float64)
        x = x - x.max(axis=-1, keepdims=True)
        logp = x - np.log(np.exp(x).sum(axis=-1, keepdims=True))
        return float(logp[np.arange(len(tokens)), np.asarray(tokens)].sum())


def _join_rows(prompt_ids, source_ids, tail: list[int] | None = None) -> list[list[int]]:
    """Pair up prompt/source rows, optionally appending a closing marker."""
    tail = tail or []
    if prompt_ids is None:
        prompt_ids = []
    if prompt_ids and isinstance(prompt_ids[0], (int, np.integer)):
        prompt_ids = [list(prompt_ids)]
    if isinstance(source_ids, np.ndarray):
        source_ids = [list(map(int, r)) for r in np.atleast_2d(source_ids)]
    elif source_ids and isinstance(source_ids[0], (int, np.integer)):
        source_ids = [list(source_ids)]
    if not prompt_ids:
        prompt_ids = [[] for _ in source_ids]
    if len(prompt_ids) != len(source_ids):
        raise DimensionError("prompt and source batch sizes differ")
    return [list(p) + list(s) + tail for p, s in zip(prompt_ids, source_ids)]


@dataclass
class LMState:
    cache: KVCache
    pos: int

    def total_bytes(self) -> int:
        return self.cache.size_bytes()

    def clone(self) -> "LMState":
        return LMState(cache=self.cache.clone(), pos=self.pos)


class CausalLMTranslator:
    """Decoder-only translation: prefill [prompt + source], continue after <sep>."""

    def __init__(self, lm: CausalLM):
        self.lm = lm
        self.initial_token = SEP
        self.eos_token = EOS

    def parameters(self) -> list[T.Parameter]:
        return self.lm.parameters()

    def start(self, prompt_ids, source_ids, max_new: int | None = None) -> LMState:
        rows = _join_rows(prompt_ids, source_ids)
        enc_ids, valid = _as_batch(rows)
        if not valid.all():
            raise DimensionError("decoder-only prefill requires equal-length rows")
        max_new = self.lm.config.max_len if max_new is None else max_new
        capacity = min(self.lm.config.max_len, enc_ids.shape[1] + 1 + max_new)
        cache = self.lm.make_cache(enc_ids.shape[0], capacity)
        with T.no_grad():
            self.lm.prefill(enc_ids, cache)
        return LMState(cache=cache, pos=enc_ids.shape[1])

    def step(self, state: LMState, tokens) -> np.ndarray:
        tokens = np.atleast_1d(np.asarray(tokens))
        with T.no_grad():
            logits = self.lm.step(tokens, state.cache)
        state.pos += 1
        return logits
