"""Exact KV-cache memory model and a decoding wall-clock benchmark.

The analytic model reproduces the per-token cache sizes of seven reference
architectures.  Decoder-only models cache keys and values for every layer
across the whole running sequence:

    bytes = 2 * dec_layers * dim * (kv_heads / heads) * bytes_per_element * b * (s + t)

Encoder-decoder models (including the frozen-encoder translation model)
retain only the decoder-side caches — cross-attention keys/values over the
s source positions plus self-attention over the t generated positions, both
at decoder width:

    bytes = 2 * dec_layers * dim * bytes_per_element * b * (s + t)

Kilobytes are decimal and floored (524288 B -> 524 kB) because that is the
convention the reference table's digits follow.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigError, DataError

__all__ = [
    "ArchSpec",
    "CacheReport",
    "BenchCell",
    "kv_bytes",
    "per_token_kb",
    "kv_reduction",
    "REFERENCE_SPECS",
    "load_specs",
    "bench_decode",
    "bench_csv",
    "bench_table",
]


@dataclass(frozen=True)
class ArchSpec:
    """Cache-relevant shape of one architecture.

    `dim` is the width the decoder caches at (decoder width for
    encoder-decoder models); `enc_layers == 0` marks a decoder-only model.
    """

    name: str
    dim: int
    enc_layers: int
    dec_layers: int
    heads: int
    kv_heads: int
    bytes_per_element: int = 2
    vocab_size: int | None = None
    params_count: float | None = None

    def __post_init__(self):
        if self.dim < 1 or self.dec_layers < 1 or self.heads < 1 or self.kv_heads < 1:
            raise ArgumentError("dim, dec_layers, heads, kv_heads must be >= 1")
        if self.enc_layers < 0:
            raise ArgumentError("enc_layers must be >= 0")
        if self.heads % self.kv_heads:
            raise ConfigError(f"kv_heads {self.kv_heads} must divide heads {self.heads}")
        if self.bytes_per_element < 1:
            raise ArgumentError("bytes_per_element must be >= 1")

    @property
    def decoder_only(self) -> bool:
        return self.enc_layers == 0


@dataclass(frozen=True)
class CacheReport:
    spec: ArchSpec
    b: int
    s: int
    t: int
    bytes_exact: int
    kb_decimal_floored: int  # per b*(s+t) token unit


def _per_token_bytes(spec: ArchSpec) -> int:
    if spec.decoder_only:
        num = 2 * spec.dec_layers * spec.dim * spec.kv_heads * spec.bytes_per_element
        if num % spec.heads:
            raise ConfigError(f"{spec.name}: dim*kv_heads not divisible by heads; bytes would be fractional")
        return num // spec.heads
    return 2 * spec.dec_layers * spec.dim * spec.bytes_per_element


def kv_bytes(spec: ArchSpec, b: int, s: int, t: int) -> CacheReport:
    """Exact decode-time cache footprint for batch `b`, source `s`, target `t`."""
    if b < 0 or s < 0 or t < 0:
        raise ArgumentError("b, s, t must be >= 0")
    per_token = _per_token_bytes(spec)
    return CacheReport(
        spec=spec,
        b=b,
        s=s,
        t=t,
        bytes_exact=per_token * b * (s + t),
        kb_decimal_floored=per_token // 1000,
    )


def per_token_kb(spec: ArchSpec) -> int:
    """Floored decimal kilobytes per b*(s+t) unit — the reference table's digit."""
    return _per_token_bytes(spec) // 1000


def kv_reduction(a: ArchSpec, b: ArchSpec) -> float:
    """Fractional cache saving of `a` relative to `b` (same b, s, t)."""
    denom = _per_token_bytes(b)
    if denom == 0:
        raise ArgumentError(f"{b.name} has zero cache; reduction undefined")
    return 1.0 - _per_token_bytes(a) / denom


REFERENCE_SPECS: dict[str, ArchSpec] = {
    s.name: s
    for s in [
        ArchSpec("Llama2-7B", dim=4096, enc_layers=0, dec_layers=32, heads=32, kv_heads=32,
                 vocab_size=32000, params_count=6.73e9),
        ArchSpec("Llama3-8B", dim=4096, enc_layers=0, dec_layers=32, heads=32, kv_heads=8,
                 vocab_size=128000, params_count=8.01e9),
        ArchSpec("Llama2-13B", dim=5120, enc_layers=0, dec_layers=40, heads=40, kv_heads=40,
                 vocab_size=32000, params_count=13.01e9),
        ArchSpec("NMT-40-8", dim=1024, enc_layers=40, dec_layers=8, heads=16, kv_heads=16,
                 vocab_size=128000, params_count=0.77e9),
        ArchSpec("mT5-large", dim=1024, enc_layers=24, dec_layers=24, heads=16, kv_heads=16,
                 vocab_size=256000, params_count=1.23e9),
        ArchSpec("NLLB-3.3B", dim=2048, enc_layers=24, dec_layers=24, heads=16, kv_heads=16,
                 vocab_size=256000, params_count=3.34e9),
        ArchSpec("LaMaTE", dim=1024, enc_layers=32, dec_layers=8, heads=16, kv_heads=16,
                 vocab_size=128000, params_count=8.5e9),
    ]
}


_SPEC_FIELDS = {
    "name", "dim", "enc_layers", "dec_layers", "heads", "kv_heads",
    "bytes_per_element", "vocab_size", "params_count",
}
_REQUIRED_FIELDS = {"name", "dim", "enc_layers", "dec_layers", "heads", "kv_heads"}


def load_specs(path) -> list[ArchSpec]:
    """Read a JSON array of ArchSpec records (field names exactly as the type)."""
    path = Path(path)
    try:
        records = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read arch specs: {e}", path=str(path)) from e
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON: {e.msg}", path=str(path), line=e.lineno) from e
    if not isinstance(records, list):
        raise DataError("arch spec file must hold a JSON array", path=str(path))
    specs = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise DataError(f"record {i} is not an object", path=str(path))
        unknown = set(rec) - _SPEC_FIELDS
        if unknown:
            raise DataError(f"record {i} has unknown fields {sorted(unknown)}", path=str(path))
        missing = _REQUIRED_FIELDS - set(rec)
        if missing:
            raise DataError(f"record {i} missing fields {sorted(missing)}", path=str(path))
        try:
            specs.append(ArchSpec(**rec))
        except (ArgumentError, ConfigError, TypeError) as e:
            raise DataError(f"record {i} ({rec.get('name', '?')}): {e}", path=str(path)) from e
    return specs


# ---------------------------------------------------------------------------
# wall-clock decode benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchCell:
    batch: int
    src_len: int
    tgt_len: int
    tokens_per_s_a: float | None
    tokens_per_s_b: float | None
    oom_a: bool = False
    oom_b: bool = False

    @property
    def speedup(self) -> float | None:
        if self.tokens_per_s_a is None or self.tokens_per_s_b is None or self.tokens_per_s_b == 0:
            return None
        return self.tokens_per_s_a / self.tokens_per_s_b


def _cache_budget_exceeded(model, rows, tgt_len: int, budget: int | None) -> bool:
    if budget is None:
        return False
    state = model.start(None, rows, max_new=tgt_len)
    # Grow the self-attention side to its end-of-decode size analytically:
    # each generated token adds one cache slot per layer at decoder width.
    per_step = _state_step_bytes(state)
    return state.total_bytes() + per_step * tgt_len > budget


def _state_step_bytes(state) -> int:
    cache = getattr(state, "self_cache", None) or getattr(state, "cache", None)
    itemsize = cache.k[0].dtype.itemsize
    return 2 * cache.layers * cache.batch * cache.kv_heads * cache.head_dim * itemsize


def _time_decode(model, rows, tgt_len: int, reps: int, warmup: int, rng: np.random.Generator) -> float:
    """Median tokens/s over `reps` timed runs of a forced `tgt_len`-step decode."""
    b = len(rows)
    vocab = _model_vocab(model)
    # Fixed per-step token batches: the timing must not depend on the
    # (untrained) model's own outputs.
    steps = [rng.integers(0, vocab, size=b).astype(np.int64) for _ in range(tgt_len)]
    times = []
    for rep in range(warmup + reps):
        state = model.start(None, rows, max_new=tgt_len)
        t0 = time.perf_counter()
        for tok in steps:
            model.step(state, tok)
        elapsed = time.perf_counter() - t0
        if rep >= warmup:
            times.append(elapsed)
    return b * tgt_len / float(np.median(times))


def _model_vocab(model) -> int:
    cfg = getattr(model, "config", None)
    if cfg is not None and hasattr(cfg, "decoder"):
        return cfg.decoder.vocab_size
    if cfg is not None and hasattr(cfg, "vocab_size"):
        return cfg.vocab_size
    lm = getattr(model, "lm", None)
    if lm is not None:
        return lm.config.vocab_size
    raise ArgumentError("cannot infer vocab size for benchmark inputs")


def bench_decode(
    model_a,
    model_b,
    batch_sizes: list[int],
    source_lengths: list[int],
    target_len: int,
    repetitions: int = 5,
    warmup: int = 2,
    max_cache_bytes: int | None = None,
    seed: int = 0,
) -> list[BenchCell]:
    """Median decode throughput of two models over a (batch x src_len) grid.

    Timing covers the generation loop only (prefill excluded).  Cells whose
    end-of-decode cache would exceed `max_cache_bytes` are marked as
    out-of-memory rather than run.  BLAS threading is pinned to one thread
    during measurement for timer stability.
    """
    if repetitions < 1 or warmup < 0:
        raise ArgumentError("need repetitions >= 1 and warmup >= 0")
    from threadpoolctl import threadpool_limits

    cells = []
    with threadpool_limits(limits=1):
        for b in batch_sizes:
            for s in source_lengths:
                rng = np.random.default_rng((seed, b, s))
                vocab_a, vocab_b = _model_vocab(model_a), _model_vocab(model_b)
                rows = rng.integers(0, min(vocab_a, vocab_b), size=(b, s)).astype(np.int64)
                cell = BenchCell(batch=b, src_len=s, tgt_len=target_len, tokens_per_s_a=None, tokens_per_s_b=None)
                if _cache_budget_exceeded(model_a, rows, target_len, max_cache_bytes):
                    cell.oom_a = True
                else:
                    cell.tokens_per_s_a = _time_decode(model_a, rows, target_len, repetitions, warmup, rng)
                if _cache_budget_exceeded(model_b, rows, target_len, max_cache_bytes):
                    cell.oom_b = True
                else:
                    cell.tokens_per_s_b = _time_decode(model_b, rows, target_len, repetitions, warmup, rng)
                cells.append(cell)
    return cells


def _fmt(value: float | None, oom: bool, spec: str = ".1f") -> str:
    if oom:
        return "OOM"
    if value is None:
        return "-"
    return format(value, spec)


def bench_csv(cells: list[BenchCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["batch", "src_len", "tokens_per_s_a", "tokens_per_s_b", "speedup"])
    for c in cells:
        w.writerow(
            [
                c.batch,
                c.src_len,
                _fmt(c.tokens_per_s_a, c.oom_a, ".3f"),
                _fmt(c.tokens_per_s_b, c.oom_b, ".3f"),
                _fmt(c.speedup, c.oom_a or c.oom_b, ".3f"),
            ]
        )
    return buf.getvalue()


def bench_table(cells: list[BenchCell], name_a: str = "model_a", name_b: str = "model_b") -> str:
    header = f"{'batch':>6} {'src':>6} {name_a + ' tok/s':>16} {name_b + ' tok/s':>16} {'speedup':>8}"
    lines = [header, "-" * len(header)]
    for c in cells:
        lines.append(
            f"{c.batch:>6} {c.src_len:>6} "
            f"{_fmt(c.tokens_per_s_a, c.oom_a):>16} "
            f"{_fmt(c.tokens_per_s_b, c.oom_b):>16} "
            f"{_fmt(c.speedup, c.oom_a or c.oom_b, '.2f'):>8}"
        )
    return "\n".join(lines)
