"""Autoregressive generation: beam search and temperature/top-k/top-p sampling.

Both drivers work against a small model protocol:

    model.start(prompt_ids, source_ids, max_new) -> state   (owns a KV cache)
    model.step(state, tokens[B]) -> next-token logits [B, V]
    model.initial_token / model.eos_token

States support ``.clone()`` so each hypothesis owns its cache.

Scoring is the plain sum of model log-probabilities — never temperature-
scaled or filter-renormalized, and with no length normalization unless
`length_normalize` is set.  A beam that emits EOS is frozen and keeps
competing by its total score; search stops once the best unfinished score
cannot beat the best finished one, or after `max_len` generated tokens.
Ties break deterministically: higher score, then lower token id, then lower
beam index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, StateError

__all__ = [
    "GenerationConfig",
    "Hypothesis",
    "beam_search",
    "greedy",
    "sample",
    "rescore",
    "log_softmax",
    "filter_top_k",
    "filter_top_p",
]


@dataclass
class GenerationConfig:
    beam_size: int = 5
    max_len: int = 64  # generated tokens, including the terminal EOS
    temperature: float = 0.7
    top_k: int = 50
    top_p: float = 0.8
    seed: int = 0
    length_normalize: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ArgumentError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ArgumentError("max_len must be >= 1")
        if self.temperature <= 0.0:
            raise ArgumentError("temperature must be > 0")
        if self.top_k < 1:
            raise ArgumentError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ArgumentError("top_p must lie in (0, 1]")


@dataclass
class Hypothesis:
    """One decoded sequence.

    `tokens` are the generated ids, including the terminal EOS when the
    model emitted one.  `log_prob` is the exact sum of the model's raw
    log-probabilities of those tokens.  `finished` means the sequence
    terminated (EOS emitted, or the generation budget was hit).
    """

    tokens: list[int]
    log_prob: float
    finished: bool
    state: object | None = field(default=None, repr=False, compare=False)

    def content(self, eos_token: int) -> list[int]:
        """Tokens with the terminal EOS stripped."""
        if self.tokens and self.tokens[-1] == eos_token:
            return list(self.tokens[:-1])
        return list(self.tokens)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax in float64 over the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _rank(log_prob: float, n_tokens: int, length_normalize: bool) -> float:
    return log_prob / n_tokens if (length_normalize and n_tokens) else log_prob


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------


@dataclass
class _Beam:
    """Invariant: `state` has consumed the start context plus every token in
    `tokens` except the last; the next step feeds tokens[-1] (or the model's
    initial token when nothing has been generated yet)."""

    tokens: list[int]
    log_prob: float
    state: object
    eos: bool


def beam_search(model, prompt_ids, source_ids, cfg: GenerationConfig | None = None):
    """Returns (best finished Hypothesis, full beam sorted best-first)."""
    cfg = cfg or GenerationConfig()
    width = cfg.beam_size
    start = model.start(prompt_ids, source_ids, max_new=cfg.max_len)
    beams = [_Beam(tokens=[], log_prob=0.0, state=start, eos=False)]
    eos = model.eos_token

    for _ in range(cfg.max_len):
        live_idx = [i for i, b in enumerate(beams) if not b.eos]
        if not live_idx:
            break

        # One model step per live beam; children of the same parent share the
        # stepped state until selection, then get their own clones.
        stepped: dict[int, tuple[object, np.ndarray]] = {}
        for i in live_idx:
            b = beams[i]
            st = b.state.clone()
            feed = b.tokens[-1] if b.tokens else model.initial_token
            logits = model.step(st, np.array([feed], dtype=np.int64))
            stepped[i] = (st, log_softmax(logits[0]))

        # Candidate pool: frozen beams carry over unchanged (token slot -1 so
        # they win exact score ties against new extensions), live beams
        # contribute every vocabulary continuation.
        scores: list[float] = []
        toks: list[int] = []
        parents: list[int] = []
        for i, b in enumerate(beams):
            if b.eos:
                scores.append(_rank(b.log_prob, len(b.tokens), cfg.length_normalize))
                toks.append(-1)
                parents.append(i)
        for i in live_idx:
            b = beams[i]
            _, logp = stepped[i]
            n_after = len(b.tokens) + 1
            for tok in range(logp.shape[0]):
                scores.append(_rank(b.log_prob + logp[tok], n_after, cfg.length_normalize))
                toks.append(tok)
                parents.append(i)

        order = np.lexsort((np.asarray(parents), np.asarray(toks), -np.asarray(scores, dtype=np.float64)))
        new_beams: list[_Beam] = []
        used_state: set[int] = set()
        for c in order[:width]:
            i, tok = parents[c], toks[c]
            parent = beams[i]
            if tok == -1:  # frozen carry-over
                new_beams.append(parent)
                continue
            st, logp = stepped[i]
            if i in used_state:  # another selected child already owns `st`
                st = st.clone()
            else:
                used_state.add(i)
            new_beams.append(
                _Beam(
                    tokens=parent.tokens + [tok],
                    log_prob=parent.log_prob + float(logp[tok]),
                    state=st,
                    eos=tok == eos,
                )
            )
        beams = new_beams

        done = [_rank(b.log_prob, len(b.tokens), cfg.length_normalize) for b in beams if b.eos]
        live = [_rank(b.log_prob, len(b.tokens), cfg.length_normalize) for b in beams if not b.eos]
        if done and (not live or max(live) <= max(done)):
            break

    hyps = [
        Hypothesis(
            tokens=list(b.tokens),
            log_prob=b.log_prob,
            finished=b.eos or len(b.tokens) >= cfg.max_len,
            state=b.state,
        )
        for b in beams
    ]
    ranked = sorted(
        range(len(hyps)),
        key=lambda i: (-_rank(hyps[i].log_prob, len(hyps[i].tokens), cfg.length_normalize), i),
    )
    hyps = [hyps[i] for i in ranked]
    best = next((h for h in hyps if h.finished), hyps[0])
    return best, hyps


def greedy(model, prompt_ids, source_ids, max_len: int = 64) -> Hypothesis:
    """Argmax decoding (ties go to the lower token id)."""
    state = model.start(prompt_ids, source_ids, max_new=max_len)
    tokens: list[int] = []
    total = 0.0
    feed = model.initial_token
    finished = False
    for _ in range(max_len):
        logits = model.step(state, np.array([feed], dtype=np.int64))
        logp = log_softmax(logits[0])
        tok = int(np.argmax(logp))
        tokens.append(tok)
        total += float(logp[tok])
        if tok == model.eos_token:
            finished = True
            break
        feed = tok
    return Hypothesis(tokens=tokens, log_prob=total, finished=finished or len(tokens) >= max_len, state=state)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def filter_top_k(probs: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask keeping the k most probable entries (ties: lower id)."""
    if k < 1:
        raise ArgumentError("top_k must be >= 1")
    v = probs.shape[-1]
    keep = np.zeros(v, dtype=bool)
    order = np.lexsort((np.arange(v), -np.asarray(probs, dtype=np.float64)))
    keep[order[: min(k, v)]] = True
    return keep


def filter_top_p(probs: np.ndarray, p: float, keep: np.ndarray | None = None) -> np.ndarray:
    """Mask keeping the smallest descending-probability prefix whose
    cumulative mass reaches `p` (computed over already-kept entries, using
    their unrenormalized probabilities)."""
    if not 0.0 < p <= 1.0:
        raise ArgumentError("top_p must lie in (0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    v = probs.shape[-1]
    keep = np.ones(v, dtype=bool) if keep is None else keep.copy()
    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((idx, -probs[idx]))]
    cum = np.cumsum(probs[order])
    # smallest prefix with cum >= p; if the kept mass never reaches p, keep all
    cut = int(np.searchsorted(cum, p, side="left"))
    cut = min(cut, len(order) - 1)
    out = np.zeros(v, dtype=bool)
    out[order[: cut + 1]] = True
    return out


def _sample_step(logits: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator) -> tuple[int, float]:
    """One draw; returns (token, raw untempered log-prob of that token)."""
    raw_logp = log_softmax(logits)
    x = np.asarray(logits, dtype=np.float64) / cfg.temperature
    x = x - x.max()
    probs = np.exp(x)
    probs /= probs.sum()
    keep = filter_top_k(probs, cfg.top_k)
    keep = filter_top_p(probs, cfg.top_p, keep=keep)
    if not keep.any():
        raise StateError("sampling filters removed every token; invariant violated")
    filtered = np.where(keep, probs, 0.0)
    filtered /= filtered.sum()
    tok = int(rng.choice(probs.shape[0], p=filtered))
    return tok, float(raw_logp[tok])


def sample(model, prompt_ids, source_ids, cfg: GenerationConfig | None = None) -> Hypothesis:
    """Temperature → top-k → top-p sampling, reproducible given cfg.seed."""
    cfg = cfg or GenerationConfig()
    rng = np.random.default_rng(cfg.seed)
    state = model.start(prompt_ids, source_ids, max_new=cfg.max_len)
    tokens: list[int] = []
    total = 0.0
    feed = model.initial_token
    finished = False
    for _ in range(cfg.max_len):
        logits = model.step(state, np.array([feed], dtype=np.int64))
        tok, lp = _sample_step(logits[0], cfg, rng)
        tokens.append(tok)
        total += lp
        if tok == model.eos_token:
            finished = True
            break
        feed = tok
    return Hypothesis(tokens=tokens, log_prob=total, finished=finished or len(tokens) >= cfg.max_len, state=state)


# ---------------------------------------------------------------------------
# rescoring
# ---------------------------------------------------------------------------


def rescore(model, prompt_ids, source_ids, tokens: list[int]) -> float:
    """Sum of model log-probs of `tokens` via a fresh incremental replay."""
    state = model.start(prompt_ids, source_ids, max_new=max(1, len(tokens)))
    total = 0.0
    feed = model.initial_token
    for tok in tokens:
        logits = model.step(state, np.array([feed], dtype=np.int64))
        total += float(log_softmax(logits[0])[tok])
        feed = tok
    return total
