"""Synthetic multi-task translation corpora with exact oracles.

Every task is built from deterministic symbol-substitution ciphers over a
content vocabulary, so the correct output for any input can be recomputed
independently of the generator (`task_oracle`). Cipher tables derive from a
fixed constant seed, *not* from the corpus seed: corpora drawn with
different seeds (train vs. held-out) share the same underlying "language
pair", which is what makes held-out evaluation meaningful.

Tasks
-----
* ``general``    sentence in, ciphered sentence out; the direction tag picks
                 the table (``bwd`` is the exact inverse of ``fwd``).
* ``doc``        2-6 sentences joined by ``<sep>``; ciphered sentence-wise,
                 order and separators preserved.
* ``domain``     one of three pairwise-disjoint cipher tables, selected by a
                 domain tag in the prompt.
* ``terminology`` the prompt carries ``<sep> src tgt`` override pairs that
                 take precedence over the general cipher.
* ``postedit``   the source is a corrupted draft translation, ``<sep>``, then
                 the original sentence; the target is the correct translation.
* ``copy``       identity benchmark task (not part of the five-task mix).

File format: one JSON object per line with keys ``task``, ``prompt``,
``source``, ``target``, ``meta``; token fields are space-separated symbol
strings resolved against the vocabulary file (one symbol per line, line
number = id).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DataError, VocabError

PAD, BOS, EOS, SEP = 0, 1, 2, 3
TASK_TAGS = {"general": 4, "doc": 5, "domain": 6, "terminology": 7, "postedit": 8, "copy": 14}
DIR_TAGS = {"fwd": 9, "bwd": 10}
DOMAIN_TAGS = {0: 11, 1: 12, 2: 13}
RESERVED = 16

_SPECIAL_SYMBOLS = [
    "<pad>", "<bos>", "<eos>", "<sep>",
    "<task:general>", "<task:doc>", "<task:domain>", "<task:terminology>", "<task:postedit>",
    "<dir:fwd>", "<dir:bwd>",
    "<dom:0>", "<dom:1>", "<dom:2>",
    "<task:copy>", "<reserved:15>",
]

TASKS = ("general", "doc", "domain", "terminology", "postedit")
ALL_TASKS = TASKS + ("copy",)

# Constant across the whole artifact; corpus seeds never touch the ciphers.
CIPHER_SEED = 24301
N_DOMAINS = 3


class Vocab:
    """Symbol table: 16 reserved ids, then `content_size` content symbols w0, w1, ..."""

    def __init__(self, symbols: list[str]):
        if len(symbols) < RESERVED + 2:
            raise VocabError(f"vocabulary needs at least {RESERVED + 2} symbols, got {len(symbols)}")
        if symbols[: len(_SPECIAL_SYMBOLS)] != _SPECIAL_SYMBOLS:
            raise VocabError("vocabulary must start with the reserved symbol block")
        self.symbols = list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise VocabError("duplicate symbol in vocabulary")

    @classmethod
    def build(cls, content_size: int = 512) -> "Vocab":
        if content_size < N_DOMAINS:
            raise ArgumentError(f"content_size must be >= {N_DOMAINS}")
        return cls(_SPECIAL_SYMBOLS + [f"w{i}" for i in range(content_size)])

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def content_size(self) -> int:
        return len(self.symbols) - RESERVED

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Whitespace-split symbols to ids; an unknown symbol raises VocabError."""
    ids = []
    for sym in text.split():
        if sym not in vocab.index:
            raise VocabError(f"unknown symbol {sym!r}")
        ids.append(vocab.index[sym])
    return ids


def detokenize(ids, vocab: Vocab) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise VocabError(f"token id {i} outside vocabulary of size {len(vocab)}")
        out.append(vocab.symbols[i])
    return " ".join(out)


# ---- cipher tables -------------------------------------------------------------


class CipherSuite:
    """All substitution tables for one content-vocabulary size.

    Tables map content *offsets* (0 .. n-1). The three domain tables are
    pairwise disjoint by construction: they read one base permutation at
    shifts 0, n//3 and 2n//3, so no symbol maps identically in two domains.
    """

    def __init__(self, content_size: int):
        if content_size < N_DOMAINS:
            raise ArgumentError(f"ciphers need content_size >= {N_DOMAINS}")
        self.n = content_size
        rng = np.random.default_rng(CIPHER_SEED)
        self.general_fwd = rng.permutation(content_size)
        self.general_bwd = np.argsort(self.general_fwd)
        base = rng.permutation(content_size)
        off = content_size // N_DOMAINS
        self.domain_fwd = []
        self.domain_bwd = []
        for d in range(N_DOMAINS):
            table = base[(np.arange(content_size) + d * off) % content_size]
            self.domain_fwd.append(table)
            self.domain_bwd.append(np.argsort(table))

    def table(self, direction: str, domain: int | None = None) -> np.ndarray:
        if direction not in DIR_TAGS:
            raise ArgumentError(f"unknown direction {direction!r}")
        if domain is None:
            return self.general_fwd if direction == "fwd" else self.general_bwd
        if not 0 <= domain < N_DOMAINS:
            raise ArgumentError(f"domain must be in [0, {N_DOMAINS})")
        return self.domain_fwd[domain] if direction == "fwd" else self.domain_bwd[domain]

    def map_ids(self, ids, direction: str, domain: int | None = None) -> list[int]:
        """Apply a cipher tokenwise; <sep> passes through, other specials are rejected."""
        table = self.table(direction, domain)
        out = []
        for i in ids:
            i = int(i)
            if i == SEP:
                out.append(SEP)
            elif i >= RESERVED and i - RESERVED < self.n:
                out.append(int(table[i - RESERVED]) + RESERVED)
            else:
                raise ArgumentError(f"cipher input id {i} is not a content symbol")
        return out


_SUITES: dict[int, CipherSuite] = {}


def cipher_suite(content_size: int) -> CipherSuite:
    if content_size not in _SUITES:
        _SUITES[content_size] = CipherSuite(content_size)
    return _SUITES[content_size]


# ---- examples ------------------------------------------------------------------


@dataclass
class Example:
    task: str
    prompt: list[int]
    source: list[int]
    target: list[int]
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LengthProfile:
    """Length knobs for corpus generation; content_lo/hi restrict the symbol range."""

    min_len: int = 4
    max_len: int = 16
    min_sentences: int = 2
    max_sentences: int = 6
    doc_sent_min: int = 4
    doc_sent_max: int = 8
    max_corruptions: int = 3
    max_term_pairs: int = 3
    content_lo: int = 0
    content_hi: int | None = None


def _content_range(profile: LengthProfile, vocab: Vocab) -> tuple[int, int]:
    hi = vocab.content_size if profile.content_hi is None else profile.content_hi
    if not 0 <= profile.content_lo < hi <= vocab.content_size:
        raise ArgumentError("length profile content range outside the vocabulary")
    return profile.content_lo, hi


def _sentence(rng: np.random.Generator, lo: int, hi: int, min_len: int, max_len: int) -> list[int]:
    n = int(rng.integers(min_len, max_len + 1))
    return [int(t) + RESERVED for t in rng.integers(lo, hi, size=n)]


def _direction(rng: np.random.Generator) -> str:
    return "fwd" if rng.integers(0, 2) == 0 else "bwd"


def gen_example(task: str, rng: np.random.Generator, profile: LengthProfile, vocab: Vocab) -> Example:
    if task not in ALL_TASKS:
        raise ArgumentError(f"unknown task {task!r}, expected one of {ALL_TASKS}")
    suite = cipher_suite(vocab.content_size)
    lo, hi = _content_range(profile, vocab)

    if task == "copy":
        x = _sentence(rng, lo, hi, profile.min_len, profile.max_len)
        return Example("copy", [TASK_TAGS["copy"]], x, list(x), {})

    if task in ("terminology", "postedit") and hi - lo < 2:
        raise ArgumentError(f"{task} needs at least two drawable content symbols")
    direction = _direction(rng)
    prompt = [TASK_TAGS[task], DIR_TAGS[direction]]

    if task == "general":
        x = _sentence(rng, lo, hi, profile.min_len, profile.max_len)
        return Example(task, prompt, x, suite.map_ids(x, direction), {"direction": direction})

    if task == "doc":
        m = int(rng.integers(profile.min_sentences, profile.max_sentences + 1))
        parts = [_sentence(rng, lo, hi, profile.doc_sent_min, profile.doc_sent_max) for _ in range(m)]
        x: list[int] = []
        for j, p in enumerate(parts):
            if j:
                x.append(SEP)
            x.extend(p)
        return Example(task, prompt, x, suite.map_ids(x, direction), {"direction": direction, "sentences": m})

    if task == "domain":
        d = int(rng.integers(0, N_DOMAINS))
        x = _sentence(rng, lo, hi, profile.min_len, profile.max_len)
        return Example(
            task,
            prompt + [DOMAIN_TAGS[d]],
            x,
            suite.map_ids(x, direction, domain=d),
            {"direction": direction, "domain": d},
        )

    if task == "terminology":
        x = _sentence(rng, lo, hi, profile.min_len, profile.max_len)
        uniq = sorted(set(x))
        k = min(int(rng.integers(1, profile.max_term_pairs + 1)), len(uniq))
        sources = [int(s) for s in rng.choice(uniq, size=k, replace=False)]
        table = suite.table(direction)
        overrides: dict[int, int] = {}
        for s in sources:
            plain = int(table[s - RESERVED]) + RESERVED
            t = plain
            while t == plain:
                t = int(rng.integers(lo, hi)) + RESERVED
            overrides[s] = t
        y = [overrides.get(i, int(table[i - RESERVED]) + RESERVED) for i in x]
        for s, t in overrides.items():
            prompt.extend([SEP, s, t])
        pairs = [[vocab.symbols[s], vocab.symbols[t]] for s, t in overrides.items()]
        return Example(task, prompt, x, y, {"direction": direction, "pairs": pairs})

    # postedit: draft with k corruptions, <sep>, original sentence
    x_src = _sentence(rng, lo, hi, profile.min_len, profile.max_len)
    y = suite.map_ids(x_src, direction)
    k = min(int(rng.integers(0, profile.max_corruptions + 1)), len(y))
    draft = list(y)
    if k:
        for pos in rng.choice(len(y), size=k, replace=False):
            wrong = draft[pos]
            while wrong == draft[pos]:
                wrong = int(rng.integers(lo, hi)) + RESERVED
            draft[int(pos)] = wrong
    return Example(task, prompt, draft + [SEP] + x_src, y, {"direction": direction, "corruptions": int(k)})


def gen_corpus(task: str, n: int, seed: int, profile: LengthProfile = LengthProfile(), vocab: Vocab | None = None) -> list[Example]:
    """n examples of one task; byte-for-byte reproducible from (task, n, seed, profile)."""
    if n < 1:
        raise ArgumentError("corpus size must be positive")
    vocab = Vocab.build() if vocab is None else vocab
    rng = np.random.default_rng(seed)
    return [gen_example(task, rng, profile, vocab) for _ in range(n)]


def task_oracle(prompt: list[int], source: list[int], vocab: Vocab) -> list[int]:
    """Recompute the correct target from the prompt and source alone."""
    if not prompt:
        raise ArgumentError("empty prompt")
    suite = cipher_suite(vocab.content_size)
    tag = prompt[0]
    task = {v: k for k, v in TASK_TAGS.items()}.get(tag)
    if task is None:
        raise ArgumentError(f"prompt does not start with a task tag (got id {tag})")
    if task == "copy":
        return list(source)
    dir_lookup = {v: k for k, v in DIR_TAGS.items()}
    if len(prompt) < 2 or prompt[1] not in dir_lookup:
        raise ArgumentError("prompt lacks a direction tag")
    direction = dir_lookup[prompt[1]]
    if task in ("general", "doc"):
        return suite.map_ids(source, direction)
    if task == "domain":
        dom_lookup = {v: k for k, v in DOMAIN_TAGS.items()}
        if len(prompt) < 3 or prompt[2] not in dom_lookup:
            raise ArgumentError("domain prompt lacks a domain tag")
        return suite.map_ids(source, direction, domain=dom_lookup[prompt[2]])
    if task == "terminology":
        rest = prompt[2:]
        if len(rest) % 3:
            raise ArgumentError("terminology prompt pairs must be <sep> src tgt triples")
        overrides = {}
        for j in range(0, len(rest), 3):
            if rest[j] != SEP:
                raise ArgumentError("terminology prompt pairs must be <sep>-delimited")
            overrides[rest[j + 1]] = rest[j + 2]
        table = suite.table(direction)
        return [overrides.get(i, int(table[i - RESERVED]) + RESERVED) for i in source]
    # postedit: everything after the last <sep> is the original source
    if SEP not in source:
        raise ArgumentError("postedit source must contain <sep>")
    cut = len(source) - 1 - source[::-1].index(SEP)
    return suite.map_ids(source[cut + 1 :], direction)


def detranslate(target: list[int], direction: str, domain: int | None = None, vocab: Vocab | None = None) -> list[int]:
    """Invert a cipher translation (general/doc/domain tasks)."""
    vocab = Vocab.build() if vocab is None else vocab
    suite = cipher_suite(vocab.content_size)
    inverse = "bwd" if direction == "fwd" else "fwd"
    return suite.map_ids(target, inverse, domain=domain)


# ---- model-facing sequence layout ----------------------------------------------


def encoder_input(example: Example) -> list[int]:
    """The id sequence the causal encoder reads: prompt, source, closing <eos>."""
    return example.prompt + example.source + [EOS]


def decoder_io(example: Example) -> tuple[list[int], list[int]]:
    """(decoder input, decoder target): <bos>-shifted target predicting target + <eos>."""
    return [BOS] + example.target, example.target + [EOS]


def lm_stream(example: Example) -> list[int]:
    """Flat LM view of an example: prompt, source, <sep>, target, <eos>."""
    return example.prompt + example.source + [SEP] + example.target + [EOS]


# ---- corpus files ---------------------------------------------------------------


def write_corpus(path, examples: list[Example], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            record = {
                "task": ex.task,
                "prompt": detokenize(ex.prompt, vocab),
                "source": detokenize(ex.source, vocab),
                "target": detokenize(ex.target, vocab),
                "meta": ex.meta,
            }
            f.write(json.dumps(record, ensure_ascii=True, sort_keys=False) + "\n")


def read_corpus(path, vocab: Vocab) -> list[Example]:
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                raise DataError("blank line in corpus", path=str(path), line=lineno)
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"invalid JSON ({e.msg})", path=str(path), line=lineno) from e
            if not isinstance(record, dict):
                raise DataError("corpus line is not a JSON object", path=str(path), line=lineno)
            missing = {"task", "prompt", "source", "target"} - record.keys()
            if missing:
                raise DataError(f"missing keys {sorted(missing)}", path=str(path), line=lineno)
            if record["task"] not in ALL_TASKS:
                raise DataError(f"unknown task {record['task']!r}", path=str(path), line=lineno)
            try:
                examples.append(
                    Example(
                        task=record["task"],
                        prompt=tokenize(record["prompt"], vocab),
                        source=tokenize(record["source"], vocab),
                        target=tokenize(record["target"], vocab),
                        meta=record.get("meta", {}) or {},
                    )
                )
            except VocabError as e:
                raise DataError(str(e), path=str(path), line=lineno) from e
    return examples
