"""Two-stage training: adapt-then-finetune, plus causal-LM pretraining.

Stage 1 freezes the causal encoder and trains only the adaptor and the
lightweight decoder.  Stage 2 unfreezes everything and continues on the
multi-task mixture at a lower learning rate.  `lm_pretrain` teaches the
encoder the next-token stream format (`prompt source <sep> target <eos>`)
before either stage runs.

Optimization is Adam with bias correction and decoupled weight decay; the
learning rate follows either an inverse-sqrt or a cosine schedule, both with
linear warmup.  Gradient accumulation splits a batch into microbatches whose
losses are combined with weights n_i / sum(n_j) (n_i = unmasked target
tokens), which reproduces the full-batch loss exactly.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ArgumentError, DegenerateInputError, NumericError
from .tasks import PAD, Example, decoder_io, encoder_input, lm_stream

SCHEDULES = ("inverse_sqrt", "cosine", "constant")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded id arrays for one optimizer step (or microbatch)."""

    enc_ids: np.ndarray  # [B, S] int64, PAD-padded
    enc_valid: np.ndarray  # [B, S] bool
    dec_in: np.ndarray  # [B, T] int64, starts with BOS
    dec_tgt: np.ndarray  # [B, T] int64, ends with EOS
    dec_mask: np.ndarray  # [B, T] bool, True at real target positions
    tasks: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return self.enc_ids.shape[0]

    @property
    def target_tokens(self) -> int:
        return int(self.dec_mask.sum())


def _pad_rows(rows: list[list[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), pad, dtype=np.int64)
    valid = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        valid[i, : len(r)] = True
    return ids, valid


def collate(examples: list[Example]) -> Batch:
    """Pad a list of examples into one batch for teacher-forced training."""
    if not examples:
        raise DegenerateInputError("cannot collate an empty batch")
    enc_rows = [encoder_input(ex) for ex in examples]
    dec_pairs = [decoder_io(ex) for ex in examples]
    enc_ids, enc_valid = _pad_rows(enc_rows)
    dec_in, _ = _pad_rows([p[0] for p in dec_pairs])
    dec_tgt, dec_mask = _pad_rows([p[1] for p in dec_pairs])
    if dec_in.shape[1] != dec_tgt.shape[1]:  # same length by construction (BOS+y vs y+EOS)
        raise DegenerateInputError("decoder input/target length mismatch")
    return Batch(
        enc_ids=enc_ids,
        enc_valid=enc_valid,
        dec_in=dec_in,
        dec_tgt=dec_tgt,
        dec_mask=dec_mask,
        tasks=tuple(ex.task for ex in examples),
    )


def collate_lm(examples: list[Example]) -> Batch:
    """Next-token prediction over the flat LM stream; loss on every real token."""
    if not examples:
        raise DegenerateInputError("cannot collate an empty batch")
    streams = [lm_stream(ex) for ex in examples]
    ids, valid = _pad_rows(streams)
    return Batch(
        enc_ids=ids[:, :-1],
        enc_valid=valid[:, :-1],
        dec_in=ids[:, :-1],
        dec_tgt=ids[:, 1:],
        dec_mask=valid[:, 1:],
        tasks=tuple(ex.task for ex in examples),
    )


def batch_stream(examples: list[Example], batch_size: int, rng: np.random.Generator):
    """Endless shuffled batches; reshuffles at each epoch boundary."""
    if batch_size < 1:
        raise ArgumentError("batch_size must be >= 1")
    if not examples:
        raise DegenerateInputError("empty training corpus")
    while True:
        order = rng.permutation(len(examples))
        for lo in range(0, len(examples) - batch_size + 1, batch_size):
            yield [examples[i] for i in order[lo : lo + batch_size]]
        if len(examples) < batch_size:  # tiny corpora: one short batch per epoch
            yield [examples[i] for i in order]


# ---------------------------------------------------------------------------
# schedules and optimizer
# ---------------------------------------------------------------------------


def lr_schedule(kind: str, step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Learning rate at 1-based `step`.

    inverse_sqrt: peak * min(step / warmup, sqrt(warmup / step))
    cosine:       linear warmup to peak, then 0.5 * peak * (1 + cos(pi * t))
                  with t the post-warmup progress in [0, 1]; reaches 0 at the end.
    constant:     linear warmup to peak, then flat.
    """
    if kind not in SCHEDULES:
        raise ArgumentError(f"unknown schedule {kind!r}; expected one of {SCHEDULES}")
    if step < 1:
        raise ArgumentError("schedule steps are 1-based")
    warmup = max(1, warmup_steps)
    if kind == "inverse_sqrt":
        return peak * min(step / warmup, math.sqrt(warmup / step))
    if step <= warmup:
        return peak * step / warmup
    if kind == "constant":
        return peak
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Parameters without a gradient this step are skipped entirely (no decay,
    no moment update); frozen parameters never appear in the step at all.
    A non-finite gradient raises NumericError before any state is mutated.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def step(self, params: list[T.Parameter], lr: float) -> None:
        live = [p for p in params if not p.frozen and p.grad is not None]
        for p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {p.name or 'parameter'}; step aborted")
        for p in live:
            key = id(p)
            g = p.grad.astype(np.float64, copy=False)
            m = self._m.get(key)
            if m is None:
                m = np.zeros(p.data.shape, dtype=np.float64)
                v = np.zeros(p.data.shape, dtype=np.float64)
            else:
                v = self._v[key]
            t = self._t.get(key, 0) + 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            new = p.data.astype(np.float64, copy=False) - lr * update
            if self.weight_decay:
                new = new - lr * self.weight_decay * p.data.astype(np.float64, copy=False)
            p.data = new.astype(p.data.dtype)
            self._m[key], self._v[key], self._t[key] = m, v, t


def zero_grads(params: list[T.Parameter]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# hyperparameters and reports
# ---------------------------------------------------------------------------


@dataclass
class Hyperparams:
    lr: float = 5e-4
    schedule: str = "inverse_sqrt"
    steps: int = 2000
    batch_size: int = 64
    warmup_ratio: float = 0.01
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    accum_steps: int = 1
    label_smoothing: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    log_every: int = 1
    # Per-partition overrides.  The decoder always trains at the full rate;
    # the adaptor can train slower and start later (the decoder's read-out of
    # the frozen states needs to stabilize before the states themselves move,
    # otherwise the two chase each other and neither converges), and the
    # encoder can train slower in stage 2 to protect its pretrained features.
    adaptor_lr_scale: float = 1.0
    adaptor_delay_ratio: float = 0.0
    encoder_lr_scale: float = 1.0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ArgumentError(f"unknown schedule {self.schedule!r}")
        if self.steps < 1 or self.batch_size < 1 or self.accum_steps < 1:
            raise ArgumentError("steps, batch_size, and accum_steps must be >= 1")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ArgumentError("warmup_ratio must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ArgumentError("dropout must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ArgumentError("label_smoothing must lie in [0, 1)")
        if self.adaptor_lr_scale < 0.0 or self.encoder_lr_scale < 0.0:
            raise ArgumentError("lr scales must be >= 0")
        if not 0.0 <= self.adaptor_delay_ratio <= 1.0:
            raise ArgumentError("adaptor_delay_ratio must lie in [0, 1]")

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_ratio * self.steps))

    @classmethod
    def stage1(cls, **overrides) -> "Hyperparams":
        base = dict(lr=5e-4, schedule="inverse_sqrt", steps=2000, batch_size=64)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def stage2(cls, **overrides) -> "Hyperparams":
        base = dict(lr=2e-5, schedule="cosine", steps=500, batch_size=32)
        base.update(overrides)
        return cls(**base)


@dataclass
class ParamGroup:
    """A slice of the parameter list with its own rate multiplier and start step.

    `lr_scale` multiplies the shared schedule; `delay_ratio` holds the group
    fixed (and out of the backward graph) for the first `delay_ratio * steps`
    optimizer steps.  Each group gets its own Adam state.
    """

    params: list[T.Parameter]
    lr_scale: float = 1.0
    delay_ratio: float = 0.0


@dataclass
class TrainReport:
    steps: int
    final_loss: float
    mean_tail_loss: float  # mean over the last 20 logged losses
    wall_seconds: float
    log_path: str | None = None
    checkpoint_path: str | None = None
    losses: list[float] = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# core loop
# ---------------------------------------------------------------------------


def _batch_label(tasks: tuple[str, ...]) -> str:
    uniq = set(tasks)
    return next(iter(uniq)) if len(uniq) == 1 else "mixed"


def _microbatches(examples: list[Example], accum_steps: int) -> list[list[Example]]:
    if accum_steps == 1:
        return [examples]
    chunks = np.array_split(np.arange(len(examples)), accum_steps)
    return [[examples[i] for i in chunk] for chunk in chunks if len(chunk)]


def run_loop(
    loss_fn,
    params: list[T.Parameter],
    examples: list[Example],
    hyper: Hyperparams,
    run_dir=None,
    log_name: str = "losses.csv",
    make_batch=collate,
    groups: list[ParamGroup] | None = None,
) -> TrainReport:
    """Generic optimizer loop shared by LM pretraining and both stages.

    `loss_fn(batch) -> Tensor` must produce a scalar mean loss over the
    batch's unmasked target tokens.  Randomness (batch order, dropout) is
    fully determined by `hyper.seed`.  When `groups` is given, each group
    follows the shared schedule times its own `lr_scale`, waking up after
    its `delay_ratio` share of the run; parameters outside every group are
    not updated.
    """
    if groups is None:
        groups = [ParamGroup(params)]
    active = [g for g in groups if g.lr_scale > 0.0 and g.delay_ratio < 1.0]
    if not any(not p.frozen for g in active for p in g.params):
        raise ArgumentError("no trainable parameters; everything is frozen")
    rng = np.random.default_rng(hyper.seed)
    opts = {id(g): Adam(hyper.beta1, hyper.beta2, hyper.adam_eps, hyper.weight_decay) for g in active}
    starts = {id(g): int(math.floor(g.delay_ratio * hyper.steps)) for g in active}
    # Sleeping groups sit outside the backward graph entirely; keep the entry
    # flags so model-level freezing survives the loop.
    entry_grad = {id(p): p.requires_grad for g in groups for p in g.params}
    for g in groups:
        if id(g) not in opts:
            for p in g.params:
                p.requires_grad = False
    stream = batch_stream(examples, hyper.batch_size, rng)
    losses: list[float] = []
    writer = None
    log_path = None
    log_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / log_name
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "lr", "loss", "task"])

    t0 = time.perf_counter()
    try:
        for step in range(1, hyper.steps + 1):
            awake = []
            for g in active:
                if step > starts[id(g)]:
                    awake.append(g)
                    for p in g.params:
                        p.requires_grad = entry_grad[id(p)]
                else:
                    for p in g.params:
                        p.requires_grad = False
            batch_examples = next(stream)
            lr = lr_schedule(hyper.schedule, step, hyper.steps, hyper.warmup_steps, hyper.lr)
            zero_grads(params)

            micro = _microbatches(batch_examples, hyper.accum_steps)
            batches = [make_batch(chunk) for chunk in micro]
            total_tokens = sum(b.target_tokens for b in batches)
            step_loss = 0.0
            for b in batches:
                loss = loss_fn(b)
                weight = b.target_tokens / total_tokens
                step_loss += loss.item() * weight
                T.backward(T.scale(loss, weight) if len(batches) > 1 else loss)

            for g in awake:
                opts[id(g)].step(g.params, lr * g.lr_scale)
            losses.append(step_loss)
            if writer is not None and (step % hyper.log_every == 0 or step == hyper.steps):
                label = _batch_label(tuple(ex.task for ex in batch_examples))
                writer.writerow([step, f"{lr:.8g}", f"{step_loss:.6f}", label])
    finally:
        for g in groups:
            for p in g.params:
                p.requires_grad = entry_grad[id(p)]
        if log_file is not None:
            log_file.close()

    tail = losses[-20:]
    return TrainReport(
        steps=hyper.steps,
        final_loss=losses[-1],
        mean_tail_loss=float(np.mean(tail)),
        wall_seconds=time.perf_counter() - t0,
        log_path=str(log_path) if log_path else None,
        losses=losses,
    )


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def _write_config_snapshot(run_dir, payload: dict) -> None:
    if run_dir is None:
        return
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=repr) + "\n")


def lm_pretrain(lm, examples: list[Example], hyper: Hyperparams, run_dir=None) -> TrainReport:
    """Next-token pretraining of the causal encoder on flat task streams."""
    _write_config_snapshot(run_dir, {"phase": "lm_pretrain", "hyper": asdict(hyper), "config": asdict(lm.config)})
    lm.unfreeze()
    drop_rng = np.random.default_rng(hyper.seed + 1)
    lm.set_dropout(hyper.dropout, drop_rng)

    def loss_fn(batch: Batch):
        return lm.lm_loss(batch.dec_in, batch.dec_tgt, batch.dec_mask)

    try:
        report = run_loop(loss_fn, lm.parameters(), examples, hyper, run_dir, make_batch=collate_lm)
    finally:
        lm.set_dropout(0.0, None)
    if run_dir is not None:
        ckpt = Path(run_dir) / "lm.ckpt"
        checkpoint.save_model(ckpt, lm, {"phase": "lm_pretrain"})
        report.checkpoint_path = str(ckpt)
    return report


def _stage(model, examples, hyper, run_dir, phase: str, freeze_encoder: bool) -> TrainReport:
    _write_config_snapshot(
        run_dir,
        {"phase": phase, "hyper": asdict(hyper), "config": _model_config_dict(model)},
    )
    if freeze_encoder:
        model.encoder.freeze()
    else:
        model.encoder.unfreeze()
    drop_rng = np.random.default_rng(hyper.seed + 1)
    model.set_dropout(hyper.dropout, drop_rng)

    def loss_fn(batch: Batch):
        return model.batch_loss(batch, label_smoothing=hyper.label_smoothing)

    parts = model.partitions()
    groups = [
        ParamGroup(parts["theta"], lr_scale=hyper.encoder_lr_scale),
        ParamGroup(parts["omega"], lr_scale=hyper.adaptor_lr_scale, delay_ratio=hyper.adaptor_delay_ratio),
        ParamGroup(parts["phi"]),
    ]
    try:
        report = run_loop(loss_fn, model.parameters(), examples, hyper, run_dir, groups=groups)
    finally:
        model.set_dropout(0.0, None)
    if run_dir is not None:
        ckpt = Path(run_dir) / f"{phase}.ckpt"
        checkpoint.save_model(ckpt, model, {"phase": phase})
        report.checkpoint_path = str(ckpt)
    return report


def train_stage1(model, examples: list[Example], hyper: Hyperparams | None = None, run_dir=None) -> TrainReport:
    """Encoder frozen; adaptor + decoder learn to read its states."""
    return _stage(model, examples, hyper or Hyperparams.stage1(), run_dir, "stage1", freeze_encoder=True)


def train_stage2(model, examples: list[Example], hyper: Hyperparams | None = None, run_dir=None) -> TrainReport:
    """Everything trains on the multi-task mixture at a low learning rate."""
    return _stage(model, examples, hyper or Hyperparams.stage2(), run_dir, "stage2", freeze_encoder=False)


def _model_config_dict(model) -> dict:
    cfg = getattr(model, "config", None)
    if cfg is None:
        return {}
    return asdict(cfg)
