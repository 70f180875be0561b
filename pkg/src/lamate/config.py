"""Flat key=value run configuration.

One namespace, no nesting: a config file is lines of ``key = value`` with
``#`` comments.  Every key has a typed default below; unknown keys are
rejected so that run snapshots stay diffable and typo-proof.  Command-line
``--set key=value`` overrides beat file values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # vocabulary / model shape
    content_size: int = 512
    enc_layers: int = 8
    enc_dim: int = 256
    enc_heads: int = 8
    enc_kv_heads: int = 0  # 0 means equal to enc_heads
    enc_groups: int = 4
    enc_max_len: int = 256
    dec_layers: int = 2
    dec_dim: int = 64
    dec_heads: int = 4
    dec_kv_heads: int = 0  # 0 means equal to dec_heads
    dec_max_len: int = 256
    variant: str = "cross"
    enc_stack_layers: int = 2
    enc_stack_enabled: bool = True
    enc_stack_heads: int = 4
    ffn_mult: int = 4
    init_seed: int = 0

    # language-model pretraining
    lm_lr: float = 5e-4
    lm_schedule: str = "inverse_sqrt"
    lm_steps: int = 1000
    lm_batch: int = 64

    # stage 1: encoder frozen, adaptor + decoder learn
    stage1_lr: float = 5e-4
    stage1_schedule: str = "inverse_sqrt"
    stage1_steps: int = 2000
    stage1_batch: int = 64
    stage1_adaptor_lr_scale: float = 1.0
    stage1_adaptor_delay: float = 0.0

    # stage 2: all parameters, multi-task mixture
    stage2_lr: float = 2e-5
    stage2_schedule: str = "cosine"
    stage2_steps: int = 500
    stage2_batch: int = 32
    stage2_encoder_lr_scale: float = 1.0

    # shared optimizer knobs
    warmup_ratio: float = 0.01
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    accum_steps: int = 1
    label_smoothing: float = 0.0
    dropout: float = 0.0
    train_seed: int = 0

    # generation
    beam_size: int = 5
    max_new: int = 64
    temperature: float = 0.7
    top_k: int = 50
    top_p: float = 0.8
    gen_seed: int = 0

    def vocab_size(self) -> int:
        from .tasks import RESERVED

        return RESERVED + self.content_size


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    """Parse a raw string into the declared type of `key`."""
    target = _FIELDS[key]
    raw = raw.strip()
    if target == "bool" or target is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target == "int" or target is int:
            return int(raw)
        if target == "float" or target is float:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """key = value lines -> typed dict; rejects unknown keys and bad syntax."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults <- config file <- --set overrides, in that order."""
    merged: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        merged.update(parse_config_text(p.read_text(encoding="utf-8"), origin=str(p)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, raw)
    return RunConfig(**merged)


def snapshot_text(cfg: RunConfig) -> str:
    """Canonical key = value dump; reparsing it reproduces `cfg` exactly."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def write_snapshot(cfg: RunConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "config.snapshot"
    out.write_text(snapshot_text(cfg), encoding="utf-8")
    return out


def build_model_config(cfg: RunConfig):
    """RunConfig -> the nested model configuration dataclasses."""
    from .adaptor import AdaptorConfig
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig
    from .model import LamateConfig

    vocab_size = cfg.vocab_size()
    enc = EncoderConfig(
        layers=cfg.enc_layers,
        dim=cfg.enc_dim,
        heads=cfg.enc_heads,
        kv_heads=cfg.enc_kv_heads or None,
        vocab_size=vocab_size,
        max_len=cfg.enc_max_len,
        groups=cfg.enc_groups,
        ffn_mult=cfg.ffn_mult,
    )
    adaptor = AdaptorConfig(
        groups=cfg.enc_groups,
        d_in=cfg.enc_dim,
        d_out=cfg.dec_dim,
        enc_stack_layers=cfg.enc_stack_layers,
        enc_stack_enabled=cfg.enc_stack_enabled,
        enc_stack_heads=cfg.enc_stack_heads,
        ffn_mult=cfg.ffn_mult,
        max_len=cfg.enc_max_len,
    )
    dec = DecoderConfig(
        layers=cfg.dec_layers,
        dim=cfg.dec_dim,
        heads=cfg.dec_heads,
        kv_heads=cfg.dec_kv_heads or None,
        vocab_size=vocab_size,
        max_len=cfg.dec_max_len,
        variant=cfg.variant,
        ffn_mult=cfg.ffn_mult,
    )
    return LamateConfig(encoder=enc, adaptor=adaptor, decoder=dec)


def hyperparams_for(cfg: RunConfig, phase: str):
    """Per-phase Hyperparams assembled from the flat keys."""
    from .training import Hyperparams

    shared = dict(
        warmup_ratio=cfg.warmup_ratio,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        adam_eps=cfg.adam_eps,
        accum_steps=cfg.accum_steps,
        label_smoothing=cfg.label_smoothing,
        dropout=cfg.dropout,
        seed=cfg.train_seed,
    )
    if phase == "lm":
        return Hyperparams(lr=cfg.lm_lr, schedule=cfg.lm_schedule, steps=cfg.lm_steps, batch_size=cfg.lm_batch, **shared)
    if phase == "stage1":
        return Hyperparams(
            lr=cfg.stage1_lr, schedule=cfg.stage1_schedule, steps=cfg.stage1_steps, batch_size=cfg.stage1_batch,
            adaptor_lr_scale=cfg.stage1_adaptor_lr_scale, adaptor_delay_ratio=cfg.stage1_adaptor_delay, **shared
        )
    if phase == "stage2":
        return Hyperparams(
            lr=cfg.stage2_lr, schedule=cfg.stage2_schedule, steps=cfg.stage2_steps, batch_size=cfg.stage2_batch,
            encoder_lr_scale=cfg.stage2_encoder_lr_scale, **shared
        )
    raise ConfigError(f"unknown training phase {phase!r}")
