"""Causal language model that doubles as the translation encoder.

A stack of pre-norm blocks (rotary self-attention + GELU feed-forward) over a
token embedding. Three roles share these weights:

* plain LM: next-token training objective and incremental generation, which
  also makes it the decoder-only comparison model;
* frozen encoder: :meth:`encode` exposes the residual stream after every
  block, X^0 (the embedding) through X^L, and downstream layer-group fusion
  picks states out of that list;
* baseline for cache accounting: `kv_heads` may divide `heads` so grouped
  key/value sharing is exercised at toy scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, KVCache, attend, build_mask, init_attention, rope_tables
from .errors import ArgumentError, DimensionError, LengthError


@dataclass
class EncoderConfig:
    layers: int = 8
    dim: int = 256
    heads: int = 8
    kv_heads: int | None = None
    vocab_size: int = 512
    max_len: int = 256
    groups: int = 4
    ffn_mult: int = 4
    rope_base: float = 10000.0
    init_std: float = 1.0

    def __post_init__(self):
        if self.kv_heads is None:
            self.kv_heads = self.heads
        if self.layers < 1:
            raise ArgumentError("encoder needs at least one layer")
        if self.dim % self.heads:
            raise DimensionError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.heads % self.kv_heads:
            raise DimensionError(f"heads {self.heads} not divisible by kv_heads {self.kv_heads}")
        if self.groups < 1 or self.layers % self.groups:
            raise DimensionError(f"layers {self.layers} must split into {self.groups} equal groups")
        if (self.dim // self.heads) % 2:
            raise DimensionError("rotary attention needs an even head_dim")
        if self.vocab_size < 2 or self.max_len < 1:
            raise ArgumentError("vocab_size must be >= 2 and max_len >= 1")


@dataclass
class _Block:
    ln1_g: T.Parameter
    ln1_b: T.Parameter
    attn: AttentionParams
    ln2_g: T.Parameter
    ln2_b: T.Parameter
    ffn_w1: T.Parameter
    ffn_w2: T.Parameter

    def parameters(self) -> list[T.Parameter]:
        return [self.ln1_g, self.ln1_b, *self.attn.parameters(), self.ln2_g, self.ln2_b, self.ffn_w1, self.ffn_w2]


def _ln_pair(name: str, dim: int) -> tuple[T.Parameter, T.Parameter]:
    dt = T.default_dtype()
    return (
        T.Parameter(np.ones(dim, dtype=dt), name=f"{name}.gamma"),
        T.Parameter(np.zeros(dim, dtype=dt), name=f"{name}.beta"),
    )


def _weight(name: str, rows: int, cols: int, rng: np.random.Generator, gain: float) -> T.Parameter:
    """Fan-in scaled Gaussian init: std = gain / sqrt(rows)."""
    std = gain / math.sqrt(rows)
    return T.Parameter(rng.normal(0.0, std, size=(rows, cols)).astype(T.default_dtype()), name=name)


def _zero_weight(name: str, rows: int, cols: int) -> T.Parameter:
    """Residual-branch output projections start at zero (identity blocks)."""
    return T.Parameter(np.zeros((rows, cols), dtype=T.default_dtype()), name=name)


def _embedding(name: str, vocab: int, dim: int, rng: np.random.Generator, gain: float) -> T.Parameter:
    """Rows are unit-norm in expectation: std = gain / sqrt(dim)."""
    std = gain / math.sqrt(dim)
    return T.Parameter(rng.normal(0.0, std, size=(vocab, dim)).astype(T.default_dtype()), name=name)


class CausalLM:
    """Decoder-only transformer; see the module docstring for its three roles."""

    def __init__(self, config: EncoderConfig, seed: int = 0, name: str = "encoder"):
        self.config = config
        self.name = name
        rng = np.random.default_rng(seed)
        c = config
        std = c.init_std
        self.emb = _embedding(f"{name}.emb", c.vocab_size, c.dim, rng, std)
        self.blocks: list[_Block] = []
        for i in range(c.layers):
            ln1_g, ln1_b = _ln_pair(f"{name}.layers.{i}.ln1", c.dim)
            ln2_g, ln2_b = _ln_pair(f"{name}.layers.{i}.ln2", c.dim)
            self.blocks.append(
                _Block(
                    ln1_g=ln1_g,
                    ln1_b=ln1_b,
                    attn=init_attention(
                        f"{name}.layers.{i}.attn", c.dim, c.heads, rng, kv_heads=c.kv_heads, init_std=std
                    ),
                    ln2_g=ln2_g,
                    ln2_b=ln2_b,
                    ffn_w1=_weight(f"{name}.layers.{i}.ffn.w1", c.dim, c.ffn_mult * c.dim, rng, std),
                    ffn_w2=_zero_weight(f"{name}.layers.{i}.ffn.w2", c.ffn_mult * c.dim, c.dim),
                )
            )
        self.final_ln_g, self.final_ln_b = _ln_pair(f"{name}.final_ln", c.dim)
        self.lm_head = _weight(f"{name}.lm_head", c.dim, c.vocab_size, rng, std)
        self._rope = rope_tables(np.arange(c.max_len), c.dim // c.heads, c.rope_base, dtype=np.float64)
        self.dropout = 0.0
        self.drop_rng: np.random.Generator | None = None

    def set_dropout(self, p: float, rng: np.random.Generator | None) -> None:
        """Training-time sublayer dropout; trainers reset it to 0 when done."""
        self.dropout = p
        self.drop_rng = rng

    def _drop(self, x: T.Tensor) -> T.Tensor:
        if self.dropout > 0.0 and self.drop_rng is not None:
            return T.dropout(x, self.dropout, self.drop_rng)
        return x

    # ---- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[T.Parameter]:
        out = [self.emb]
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend([self.final_ln_g, self.final_ln_b, self.lm_head])
        return out

    def named_parameters(self) -> dict[str, T.Parameter]:
        return {p.name: p for p in self.parameters()}

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.unfreeze()

    # ---- forward passes -----------------------------------------------------

    def _rope_slice(self, start: int, stop: int):
        cos, sin = self._rope
        return cos[start:stop], sin[start:stop]

    def _check_len(self, t: int) -> None:
        if t > self.config.max_len:
            raise LengthError(f"sequence length {t} exceeds encoder max_len {self.config.max_len}")

    def _block_forward(self, x: T.Tensor, i: int, mask, rope_q, rope_k, key_valid=None, cache: KVCache | None = None):
        b = self.blocks[i]
        normed = T.layer_norm(x, b.ln1_g, b.ln1_b)
        h = attend(
            normed,
            normed,
            mask,
            b.attn,
            rope_q=rope_q,
            rope_k=rope_k,
            key_valid=key_valid,
            cache=cache,
            layer=i,
        )
        x = T.add(x, self._drop(h))
        f = T.matmul(T.gelu(T.matmul(T.layer_norm(x, b.ln2_g, b.ln2_b), b.ffn_w1)), b.ffn_w2)
        return T.add(x, self._drop(f))

    def forward_states(self, ids: np.ndarray, key_valid: np.ndarray | None = None) -> list[T.Tensor]:
        """Residual-stream states [X^0 .. X^L] for a [B, T] id batch."""
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise DimensionError("forward_states expects [B, T] ids")
        t = ids.shape[1]
        self._check_len(t)
        mask = build_mask("causal", t, t)
        rope_qk = self._rope_slice(0, t)
        x = T.embedding(self.emb, ids)
        states = [x]
        for i in range(self.config.layers):
            x = self._block_forward(x, i, mask, rope_qk, rope_qk, key_valid=key_valid)
            states.append(x)
        return states

    def encode(self, prompt_ids: Sequence[int], source_ids: Sequence[int]) -> list[T.Tensor]:
        """Per-layer states for one [prompt + source] sequence, each [T, dim].

        Pure: same ids give the same states, nothing on the model mutates.
        """
        ids = np.asarray(list(prompt_ids) + list(source_ids), dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ArgumentError("encode expects non-empty 1-D id sequences")
        states = self.forward_states(ids[None, :])
        return [T.reshape(s, s.shape[1:]) for s in states]

    def lm_logits(self, ids: np.ndarray, key_valid: np.ndarray | None = None) -> T.Tensor:
        x = self.forward_states(ids, key_valid=key_valid)[-1]
        return T.matmul(T.layer_norm(x, self.final_ln_g, self.final_ln_b), self.lm_head)

    def lm_loss(self, ids: np.ndarray, targets: np.ndarray, loss_mask: np.ndarray | None = None) -> T.Tensor:
        """Next-token cross-entropy; `targets` is `ids` shifted left by the caller."""
        return T.cross_entropy(self.lm_logits(ids), targets, mask=loss_mask)

    # ---- incremental decoding (the decoder-only baseline path) ---------------

    def make_cache(self, batch: int, capacity: int | None = None) -> KVCache:
        c = self.config
        capacity = c.max_len if capacity is None else capacity
        return KVCache(c.layers, batch, c.kv_heads, c.dim // c.heads, capacity, dtype=T.default_dtype())

    def prefill(self, ids: np.ndarray, cache: KVCache) -> np.ndarray:
        """Append `ids` [B, n] at the current cache position; return logits [B, n, V]."""
        ids = np.asarray(ids)
        start = cache.cached_len
        n = ids.shape[1]
        self._check_len(start + n)
        mask = build_mask("causal", n, start + n)
        rope_q = self._rope_slice(start, start + n)
        x = T.embedding(self.emb, ids)
        for i in range(self.config.layers):
            x = self._block_forward(x, i, mask, rope_q, rope_q, cache=cache)
        logits = T.matmul(T.layer_norm(x, self.final_ln_g, self.final_ln_b), self.lm_head)
        return logits.data

    def step(self, token_ids: np.ndarray, cache: KVCache) -> np.ndarray:
        """One decode step for [B] token ids; returns next-token logits [B, V]."""
        return self.prefill(np.asarray(token_ids)[:, None], cache)[:, 0]
