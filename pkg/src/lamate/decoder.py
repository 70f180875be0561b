"""Lightweight translation decoder over adaptor states H'.

Three ways of consuming H', selected by ``DecoderConfig.variant``:

* ``cross``: classic encoder-decoder block order, causal self-attention
  then cross-attention over H' (fully visible) then feed-forward;
* ``concat``: self-attention only, but every layer's keys/values come from
  ``[H', Y^(l-1)]`` while queries come from the target rows, under a prefix
  mask (H' columns visible everywhere, target columns causal). H' itself is
  not advanced through the layers;
* ``prefix``: H' is prepended to the target embeddings once, the combined
  sequence runs through plain self-attention under a prefix-LM mask (H'
  positions mutually fully visible, target positions causal), and logits are
  taken at target positions only.

Targets carry sinusoidal absolute positions starting at 0; H' enters as-is.
All variants share the incremental path: per layer a KV cache accumulates
exactly the keys/values the teacher-forced pass would see, so `decode_step`
reproduces teacher-forced logit columns, and after ``s`` source and ``t``
generated tokens every variant holds ``2 * layers * (s + t) * dim`` cached
values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, KVCache, attend, build_mask, init_attention, sinusoid_table
from .errors import ArgumentError, DimensionError, LengthError

VARIANTS = ("cross", "concat", "prefix")


@dataclass
class DecoderConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    kv_heads: int | None = None
    vocab_size: int = 512
    max_len: int = 256
    variant: str = "cross"
    ffn_mult: int = 4
    sinusoid_base: float = 10000.0
    init_std: float = 1.0

    def __post_init__(self):
        if self.kv_heads is None:
            self.kv_heads = self.heads
        if self.variant not in VARIANTS:
            raise ArgumentError(f"unknown decoder variant {self.variant!r}, expected one of {VARIANTS}")
        if self.layers < 1:
            raise ArgumentError("decoder needs at least one layer")
        if self.dim % self.heads:
            raise DimensionError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.heads % self.kv_heads:
            raise DimensionError(f"heads {self.heads} not divisible by kv_heads {self.kv_heads}")


@dataclass
class _DecBlock:
    ln1_g: T.Parameter
    ln1_b: T.Parameter
    self_attn: AttentionParams
    ln2_g: T.Parameter | None
    ln2_b: T.Parameter | None
    cross_attn: AttentionParams | None
    ln3_g: T.Parameter
    ln3_b: T.Parameter
    ffn_w1: T.Parameter
    ffn_w2: T.Parameter

    def parameters(self) -> list[T.Parameter]:
        out = [self.ln1_g, self.ln1_b, *self.self_attn.parameters()]
        if self.cross_attn is not None:
            out.extend([self.ln2_g, self.ln2_b, *self.cross_attn.parameters()])
        out.extend([self.ln3_g, self.ln3_b, self.ffn_w1, self.ffn_w2])
        return out


@dataclass
class DecoderState:
    """Everything a generation session carries between steps."""

    variant: str
    self_cache: KVCache
    cross_cache: KVCache | None
    self_valid: np.ndarray  # [B, filled] key validity for the self cache
    cross_valid: np.ndarray | None  # [B, s] for the cross variant
    pos: int  # next target position

    def total_bytes(self) -> int:
        total = self.self_cache.size_bytes()
        if self.cross_cache is not None:
            total += self.cross_cache.size_bytes()
        return total

    def clone(self) -> "DecoderState":
        return DecoderState(
            variant=self.variant,
            self_cache=self.self_cache.clone(),
            cross_cache=self.cross_cache,  # static after init, safe to share
            self_valid=self.self_valid.copy(),
            cross_valid=self.cross_valid,
            pos=self.pos,
        )


class TranslationDecoder:
    def __init__(self, config: DecoderConfig, seed: int = 0, name: str = "decoder"):
        self.config = config
        self.name = name
        rng = np.random.default_rng(seed)
        c = config
        dt = T.default_dtype()
        std = c.init_std

        def ln(label, dim):
            return (
                T.Parameter(np.ones(dim, dtype=dt), name=f"{label}.gamma"),
                T.Parameter(np.zeros(dim, dtype=dt), name=f"{label}.beta"),
            )

        def weight(label, rows, cols):
            # Fan-in scaled init keeps activation magnitude width-independent.
            s = std / math.sqrt(rows)
            return T.Parameter(rng.normal(0.0, s, size=(rows, cols)).astype(dt), name=label)

        def embedding(label, vocab, dim):
            # Rows are unit-norm in expectation; the forward pass rescales by sqrt(dim)
            # so token content and the unit-amplitude sinusoid table stay balanced.
            s = std / math.sqrt(dim)
            return T.Parameter(rng.normal(0.0, s, size=(vocab, dim)).astype(dt), name=label)

        self.emb = embedding(f"{name}.emb", c.vocab_size, c.dim)
        self.blocks: list[_DecBlock] = []
        for i in range(c.layers):
            pre = f"{name}.layers.{i}"
            ln1_g, ln1_b = ln(f"{pre}.ln1", c.dim)
            ln3_g, ln3_b = ln(f"{pre}.ln3", c.dim)
            if c.variant == "cross":
                ln2_g, ln2_b = ln(f"{pre}.ln2", c.dim)
                cross = init_attention(
                    f"{pre}.cross", c.dim, c.heads, rng, kv_heads=c.kv_heads, init_std=std, zero_out=False
                )
            else:
                ln2_g = ln2_b = cross = None
            self.blocks.append(
                _DecBlock(
                    ln1_g=ln1_g,
                    ln1_b=ln1_b,
                    self_attn=init_attention(
                        f"{pre}.self", c.dim, c.heads, rng, kv_heads=c.kv_heads, init_std=std, zero_out=False
                    ),
                    ln2_g=ln2_g,
                    ln2_b=ln2_b,
                    cross_attn=cross,
                    ln3_g=ln3_g,
                    ln3_b=ln3_b,
                    ffn_w1=weight(f"{pre}.ffn.w1", c.dim, c.ffn_mult * c.dim),
                    ffn_w2=weight(f"{pre}.ffn.w2", c.ffn_mult * c.dim, c.dim),
                )
            )
        self.final_ln_g, self.final_ln_b = ln(f"{name}.final_ln", c.dim)
        self.out_proj = weight(f"{name}.out_proj", c.dim, c.vocab_size)
        self._pe = sinusoid_table(c.max_len, c.dim, c.sinusoid_base, dtype=np.float64)
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

    def parameters(self) -> list[T.Parameter]:
        out = [self.emb]
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend([self.final_ln_g, self.final_ln_b, self.out_proj])
        return out

    def named_parameters(self) -> dict[str, T.Parameter]:
        return {p.name: p for p in self.parameters()}

    # ---- shared pieces --------------------------------------------------------

    def _embed_targets(self, y_ids: np.ndarray) -> T.Tensor:
        y_ids = np.asarray(y_ids)
        t = y_ids.shape[1]
        if t > self.config.max_len:
            raise LengthError(f"target length {t} exceeds decoder max_len {self.config.max_len}")
        x = T.scale(T.embedding(self.emb, y_ids), math.sqrt(self.config.dim))
        pe = np.broadcast_to(self._pe[:t].astype(x.dtype, copy=False), x.shape)
        return T.add(x, T.Tensor(pe))

    def _embed_step(self, tokens: np.ndarray, pos: int) -> T.Tensor:
        if pos >= self.config.max_len:
            raise LengthError(f"target position {pos} exceeds decoder max_len {self.config.max_len}")
        x = T.scale(T.embedding(self.emb, np.asarray(tokens)[:, None]), math.sqrt(self.config.dim))
        pe = np.broadcast_to(self._pe[pos : pos + 1].astype(x.dtype, copy=False), x.shape)
        return T.add(x, T.Tensor(pe))

    def _ffn(self, x: T.Tensor, b: _DecBlock) -> T.Tensor:
        f = T.matmul(T.gelu(T.matmul(T.layer_norm(x, b.ln3_g, b.ln3_b), b.ffn_w1)), b.ffn_w2)
        return T.add(x, self._drop(f))

    def _logits(self, x: T.Tensor) -> T.Tensor:
        return T.matmul(T.layer_norm(x, self.final_ln_g, self.final_ln_b), self.out_proj)

    # ---- teacher-forced forward ----------------------------------------------

    def forward_teacher_forced(
        self,
        h_src: T.Tensor,
        y_in: np.ndarray,
        src_valid: np.ndarray | None = None,
        return_weights: bool = False,
    ):
        """Logits [B, t, V] for target inputs y_in given adaptor states h_src [B, s, d].

        `src_valid` masks padded source columns. With `return_weights`, also
        returns one attention-weight array per attention site, in layer order.
        """
        if h_src.ndim != 3 or h_src.shape[-1] != self.config.dim:
            raise DimensionError(f"h_src must be [B, s, {self.config.dim}]")
        y_in = np.asarray(y_in)
        if y_in.ndim != 2 or y_in.shape[0] != h_src.shape[0]:
            raise DimensionError("y_in must be [B, t] with the h_src batch size")
        b_sz, s = h_src.shape[0], h_src.shape[1]
        t = y_in.shape[1]
        weights: list[np.ndarray] = []

        def att(q, kv, mask, params, key_valid):
            if return_weights:
                out, w = attend(q, kv, mask, params, key_valid=key_valid, return_weights=True)
                weights.append(w)
                return self._drop(out)
            return self._drop(attend(q, kv, mask, params, key_valid=key_valid))

        variant = self.config.variant
        y = self._embed_targets(y_in)
        ones_t = np.ones((b_sz, t), dtype=bool)

        if variant == "cross":
            self_mask = build_mask("causal", t, t)
            cross_mask = build_mask("fully_visible", t, s)
            x = y
            for blk in self.blocks:
                normed = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
                x = T.add(x, att(normed, normed, self_mask, blk.self_attn, None))
                q = T.layer_norm(x, blk.ln2_g, blk.ln2_b)
                x = T.add(x, att(q, h_src, cross_mask, blk.cross_attn, src_valid))
                x = self._ffn(x, blk)
            return (self._logits(x), weights) if return_weights else self._logits(x)

        key_valid = None
        if src_valid is not None:
            key_valid = np.concatenate([np.asarray(src_valid, dtype=bool), ones_t], axis=1)

        if variant == "concat":
            mask = build_mask("prefix", t, s + t, prefix_len=s)
            x = y
            for blk in self.blocks:
                normed = T.layer_norm(T.concat([h_src, x], axis=1), blk.ln1_g, blk.ln1_b)
                q = T.narrow(normed, 1, s, t)
                x = T.add(x, att(q, normed, mask, blk.self_attn, key_valid))
                x = self._ffn(x, blk)
            return (self._logits(x), weights) if return_weights else self._logits(x)

        # prefix: one combined sequence through plain self-attention
        mask = build_mask("prefix", s + t, s + t, prefix_len=s)
        x = T.concat([h_src, y], axis=1)
        for blk in self.blocks:
            normed = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
            x = T.add(x, att(normed, normed, mask, blk.self_attn, key_valid))
            x = self._ffn(x, blk)
        logits = self._logits(T.narrow(x, 1, s, t))
        return (logits, weights) if return_weights else logits

    # ---- incremental decoding --------------------------------------------------

    def _project_kv(self, params: AttentionParams, x: T.Tensor) -> tuple[np.ndarray, np.ndarray]:
        b_sz, n, _ = x.shape
        kvh, hd = params.kv_heads, params.head_dim
        k = T.matmul(x, params.wk).data.reshape(b_sz, n, kvh, hd).transpose(0, 2, 1, 3)
        v = T.matmul(x, params.wv).data.reshape(b_sz, n, kvh, hd).transpose(0, 2, 1, 3)
        return k, v

    def init_state(self, h_src, src_valid: np.ndarray | None = None, max_new: int | None = None) -> DecoderState:
        """Prime caches from adaptor states; afterwards only `decode_step` runs."""
        if isinstance(h_src, T.Tensor):
            h_src = h_src.data
        h_src = np.asarray(h_src)
        if h_src.ndim == 2:
            h_src = h_src[None]
        b_sz, s, _ = h_src.shape
        c = self.config
        max_new = c.max_len if max_new is None else max_new
        if src_valid is None:
            src_valid = np.ones((b_sz, s), dtype=bool)
        else:
            src_valid = np.asarray(src_valid, dtype=bool)
        hd = c.dim // c.heads
        h = T.Tensor(h_src)

        with T.no_grad():
            if c.variant == "cross":
                self_cache = KVCache(c.layers, b_sz, c.kv_heads, hd, max_new, dtype=h_src.dtype)
                cross_cache = KVCache(c.layers, b_sz, c.kv_heads, hd, s, dtype=h_src.dtype)
                for i, blk in enumerate(self.blocks):
                    k, v = self._project_kv(blk.cross_attn, h)
                    cross_cache.append(i, k, v)
                return DecoderState(
                    variant="cross",
                    self_cache=self_cache,
                    cross_cache=cross_cache,
                    self_valid=np.ones((b_sz, 0), dtype=bool),
                    cross_valid=src_valid,
                    pos=0,
                )

            self_cache = KVCache(c.layers, b_sz, c.kv_heads, hd, s + max_new, dtype=h_src.dtype)
            if c.variant == "concat":
                for i, blk in enumerate(self.blocks):
                    normed = T.layer_norm(h, blk.ln1_g, blk.ln1_b)
                    k, v = self._project_kv(blk.self_attn, normed)
                    self_cache.append(i, k, v)
            else:  # prefix: run H' through the blocks, caching as we go
                mask = build_mask("fully_visible", s, s)
                x = h
                for i, blk in enumerate(self.blocks):
                    normed = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
                    x = T.add(
                        x,
                        attend(
                            normed, normed, mask, blk.self_attn,
                            key_valid=src_valid, cache=self_cache, layer=i,
                        ),
                    )
                    x = self._ffn(x, blk)
            return DecoderState(
                variant=c.variant,
                self_cache=self_cache,
                cross_cache=None,
                self_valid=src_valid.copy(),
                cross_valid=None,
                pos=0,
            )

    def decode_step(self, state: DecoderState, tokens) -> np.ndarray:
        """Feed one target token per batch row; returns next-token logits [B, V]."""
        tokens = np.atleast_1d(np.asarray(tokens))
        b_sz = state.self_cache.batch
        if tokens.shape != (b_sz,):
            raise DimensionError(f"decode_step expects [B={b_sz}] tokens, got {tokens.shape}")

        with T.no_grad():
            x = self._embed_step(tokens, state.pos)
            if state.variant == "cross":
                # Each layer's cache is one entry shorter until its own append runs,
                # so both masks are fixed up front from the step counter alone.
                self_mask = build_mask("causal", 1, state.pos + 1)
                cross_mask = build_mask("fully_visible", 1, state.cross_cache.cached_len)
                for i, blk in enumerate(self.blocks):
                    normed = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
                    x = T.add(
                        x,
                        attend(normed, normed, self_mask, blk.self_attn, cache=state.self_cache, layer=i),
                    )
                    q = T.layer_norm(x, blk.ln2_g, blk.ln2_b)
                    k_all, v_all = state.cross_cache.view(i)
                    x = T.add(
                        x,
                        attend(
                            q, None, cross_mask, blk.cross_attn,
                            static_kv=(k_all, v_all), key_valid=state.cross_valid,
                        ),
                    )
                    x = self._ffn(x, blk)
            else:
                new_valid = np.ones((b_sz, 1), dtype=bool)
                state.self_valid = np.concatenate([state.self_valid, new_valid], axis=1)
                mask = build_mask("causal", 1, state.self_valid.shape[1])
                for i, blk in enumerate(self.blocks):
                    normed = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
                    x = T.add(
                        x,
                        attend(
                            normed, normed, mask, blk.self_attn,
                            key_valid=state.self_valid, cache=state.self_cache, layer=i,
                        ),
                    )
                    x = self._ffn(x, blk)
            logits = self._logits(x)
        state.pos += 1
        return logits.data[:, 0]
