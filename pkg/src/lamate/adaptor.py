"""Bridges the frozen causal encoder to the lightweight decoder.

Three stages, matching H' = EncStack(MLP(Fuse(states))):

1. `fuse`: split the L block outputs into K equal groups, take the last
   state of each group, average them under learnable scalar weights (init
   1.0, unconstrained), then LayerNorm: ``LN((1/K) * sum_k w_k * g_k)``.
2. `project`: a two-matrix MLP without biases, ``GELU(h @ W1) @ W2``,
   mapping encoder width d_in down to decoder width d_out.
3. `enc_stack`: optional bidirectional (fully-visible) transformer blocks
   over the projected states, with sinusoidal positions added at the stack
   input. With the stack disabled the output keeps the encoder's causal
   structure; with it enabled every position can read every other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionParams, attend, build_mask, init_attention, sinusoid_table
from .errors import ArgumentError, DimensionError


@dataclass
class AdaptorConfig:
    groups: int = 4
    d_in: int = 256
    d_out: int = 64
    enc_stack_layers: int = 2
    enc_stack_enabled: bool = True
    enc_stack_heads: int = 4
    ffn_mult: int = 4
    max_len: int = 256
    sinusoid_base: float = 10000.0
    init_std: float = 1.0

    def __post_init__(self):
        if self.groups < 1:
            raise ArgumentError("need at least one layer group")
        if self.d_out % self.enc_stack_heads:
            raise DimensionError(f"d_out {self.d_out} not divisible by enc_stack_heads {self.enc_stack_heads}")
        if self.enc_stack_enabled and self.enc_stack_layers < 1:
            raise ArgumentError("enc_stack_enabled requires at least one layer")


def group_last_indices(layers: int, groups: int) -> list[int]:
    """Indices into [X^0 .. X^L] of the last state of each of the K groups."""
    if layers % groups:
        raise DimensionError(f"layers {layers} must split into {groups} equal groups")
    size = layers // groups
    return [size * (k + 1) for k in range(groups)]


@dataclass
class _StackBlock:
    ln1_g: T.Parameter
    ln1_b: T.Parameter
    attn: AttentionParams
    ln2_g: T.Parameter
    ln2_b: T.Parameter
    ffn_w1: T.Parameter
    ffn_w2: T.Parameter

    def parameters(self) -> list[T.Parameter]:
        return [self.ln1_g, self.ln1_b, *self.attn.parameters(), self.ln2_g, self.ln2_b, self.ffn_w1, self.ffn_w2]


class Adaptor:
    def __init__(self, config: AdaptorConfig, seed: int = 0, name: str = "adaptor"):
        self.config = config
        self.name = name
        rng = np.random.default_rng(seed)
        c = config
        dt = T.default_dtype()
        self.fuse_w = T.Parameter(np.ones(c.groups, dtype=dt), name=f"{name}.fuse_w")
        self.fuse_ln_g = T.Parameter(np.ones(c.d_in, dtype=dt), name=f"{name}.fuse_ln.gamma")
        self.fuse_ln_b = T.Parameter(np.zeros(c.d_in, dtype=dt), name=f"{name}.fuse_ln.beta")
        def w(label, rows, cols):
            # Fan-in scaled init keeps activation magnitude width-independent.
            std = c.init_std / math.sqrt(rows)
            return T.Parameter(rng.normal(0.0, std, size=(rows, cols)).astype(dt), name=f"{name}.{label}")

        self.mlp_w1 = w("mlp.w1", c.d_in, c.d_out)
        self.mlp_w2 = w("mlp.w2", c.d_out, c.d_out)
        self.stack: list[_StackBlock] = []
        if c.enc_stack_enabled:
            for i in range(c.enc_stack_layers):
                pre = f"{name}.stack.{i}"
                self.stack.append(
                    _StackBlock(
                        ln1_g=T.Parameter(np.ones(c.d_out, dtype=dt), name=f"{pre}.ln1.gamma"),
                        ln1_b=T.Parameter(np.zeros(c.d_out, dtype=dt), name=f"{pre}.ln1.beta"),
                        attn=init_attention(f"{pre}.attn", c.d_out, c.enc_stack_heads, rng, init_std=c.init_std),
                        ln2_g=T.Parameter(np.ones(c.d_out, dtype=dt), name=f"{pre}.ln2.gamma"),
                        ln2_b=T.Parameter(np.zeros(c.d_out, dtype=dt), name=f"{pre}.ln2.beta"),
                        ffn_w1=w(f"stack.{i}.ffn.w1", c.d_out, c.ffn_mult * c.d_out),
                        # Residual-branch output projection starts at zero so the
                        # stack begins as the identity over its input.
                        ffn_w2=T.Parameter(
                            np.zeros((c.ffn_mult * c.d_out, c.d_out), dtype=dt), name=f"{name}.stack.{i}.ffn.w2"
                        ),
                    )
                )
        self.final_ln_g = T.Parameter(np.ones(c.d_out, dtype=dt), name=f"{name}.final_ln.gamma")
        self.final_ln_b = T.Parameter(np.zeros(c.d_out, dtype=dt), name=f"{name}.final_ln.beta")
        self._pe = sinusoid_table(c.max_len, c.d_out, c.sinusoid_base, dtype=np.float64)
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
        out = [self.fuse_w, self.fuse_ln_g, self.fuse_ln_b, self.mlp_w1, self.mlp_w2]
        for b in self.stack:
            out.extend(b.parameters())
        out.extend([self.final_ln_g, self.final_ln_b])
        return out

    def named_parameters(self) -> dict[str, T.Parameter]:
        return {p.name: p for p in self.parameters()}

    def fuse(self, states: list[T.Tensor]) -> T.Tensor:
        """Weighted mean of the last state of each layer group, then LayerNorm."""
        k = self.config.groups
        idx = group_last_indices(len(states) - 1, k)
        picked = [states[i] for i in idx]
        for s in picked:
            if s.shape[-1] != self.config.d_in:
                raise DimensionError(f"group state width {s.shape[-1]} != adaptor d_in {self.config.d_in}")
        acc = T.mul(picked[0], T.take_scalar(self.fuse_w, 0))
        for j in range(1, k):
            acc = T.add(acc, T.mul(picked[j], T.take_scalar(self.fuse_w, j)))
        return T.layer_norm(T.scale(acc, 1.0 / k), self.fuse_ln_g, self.fuse_ln_b)

    def project(self, h: T.Tensor) -> T.Tensor:
        return T.matmul(T.gelu(T.matmul(h, self.mlp_w1)), self.mlp_w2)

    def enc_stack(self, h: T.Tensor, key_valid: np.ndarray | None = None) -> T.Tensor:
        t = h.shape[-2]
        pe = np.broadcast_to(self._pe[:t].astype(h.dtype, copy=False), h.shape)
        x = T.add(h, T.Tensor(pe))
        mask = build_mask("fully_visible", t, t)
        for i, b in enumerate(self.stack):
            normed = T.layer_norm(x, b.ln1_g, b.ln1_b)
            x = T.add(x, self._drop(attend(normed, normed, mask, b.attn, key_valid=key_valid, layer=i)))
            f = T.matmul(T.gelu(T.matmul(T.layer_norm(x, b.ln2_g, b.ln2_b), b.ffn_w1)), b.ffn_w2)
            x = T.add(x, self._drop(f))
        return x

    def forward(self, states: list[T.Tensor], key_valid: np.ndarray | None = None) -> T.Tensor:
        """Full adaptor: states [X^0 .. X^L] in, decoder-ready H' out.

        Pre-norm stacks leave the residual stream unnormalized, so a final
        LayerNorm keeps the memory fed to the decoder at unit scale.
        """
        h = self.project(self.fuse(states))
        if self.config.enc_stack_enabled:
            h = self.enc_stack(h, key_valid=key_valid)
        return T.layer_norm(h, self.final_ln_g, self.final_ln_b)
