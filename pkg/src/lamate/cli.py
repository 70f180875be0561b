"""Command-line pipeline driver.

Subcommands: gen-data, pretrain-lm, train, generate, eval, kv-report, bench.
Exit codes: 0 success, 1 usage/configuration error, 2 data/vocabulary error,
3 numeric failure.

Heavy modules are imported inside the handlers so that the LAMATE_THREADS
environment variable can cap BLAS/OpenMP thread pools before the numeric
stack loads.  All relative paths are resolved against --run-dir.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

from .config import RunConfig, hyperparams_for, load_config, write_snapshot
from .errors import (
    ArgumentError,
    ConfigError,
    DataError,
    DegenerateInputError,
    DimensionError,
    LengthError,
    NumericError,
    StateError,
)

_USAGE_ERRORS = (ConfigError, ArgumentError, DimensionError, LengthError, StateError, ValueError)
_DATA_ERRORS = (DataError, DegenerateInputError)  # VocabError subclasses DataError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage errors to 1
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _apply_thread_cap() -> None:
    threads = os.environ.get("LAMATE_THREADS")
    if not threads:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = threads


def _resolve(path, run_dir: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else run_dir / p


# ---------------------------------------------------------------------------
# shared model/vocab plumbing
# ---------------------------------------------------------------------------


def _ensure_vocab(cfg: RunConfig, vocab_path: Path):
    from .tasks import Vocab

    if vocab_path.exists():
        vocab = Vocab.load(vocab_path)
        if vocab.content_size != cfg.content_size:
            raise ConfigError(
                f"vocab at {vocab_path} has {vocab.content_size} content symbols, "
                f"config expects {cfg.content_size}"
            )
        return vocab
    vocab = Vocab.build(cfg.content_size)
    vocab_path.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(vocab_path)
    return vocab


def _build_model(cfg: RunConfig):
    from .config import build_model_config
    from .model import LamateModel

    return LamateModel(build_model_config(cfg), seed=cfg.init_seed)


def _load_model(cfg: RunConfig, ckpt_path: Path):
    from . import checkpoint

    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    model = _build_model(cfg)
    checkpoint.load_model(ckpt_path, model)
    return model


def _read_examples(path: Path, vocab):
    from .tasks import read_corpus

    if not path.exists():
        raise DataError("corpus file not found", path=str(path))
    return read_corpus(path, vocab)


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_gen_data(args, cfg: RunConfig, run_dir: Path) -> int:
    from .tasks import TASKS, gen_corpus, write_corpus

    vocab = _ensure_vocab(cfg, _resolve(args.vocab, run_dir))
    out = _resolve(args.out, run_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.task == "mix":
        per, extra = divmod(args.n, len(TASKS))
        parts = [
            gen_corpus(task, per + (1 if i < extra else 0), args.seed + i, vocab=vocab)
            for i, task in enumerate(TASKS)
            if per + (1 if i < extra else 0) > 0
        ]
        shortest = min(len(p) for p in parts) if parts else 0
        examples = [p[i] for i in range(shortest) for p in parts]  # round-robin interleave
        for p in parts:
            examples.extend(p[shortest:])
    else:
        examples = gen_corpus(args.task, args.n, args.seed, vocab=vocab)
    write_corpus(out, examples, vocab)
    print(f"gen-data: wrote {len(examples)} {args.task} examples to {out}")
    return 0


def _cmd_pretrain_lm(args, cfg: RunConfig, run_dir: Path) -> int:
    from .training import lm_pretrain

    vocab = _ensure_vocab(cfg, _resolve(args.vocab, run_dir))
    examples = _read_examples(_resolve(args.data, run_dir), vocab)
    hyper = hyperparams_for(cfg, "lm")
    if args.steps is not None:
        hyper.steps = args.steps
    model = _build_model(cfg)
    phase_dir = run_dir / "lm"
    report = lm_pretrain(model.encoder, examples, hyper, run_dir=phase_dir)
    # persist the whole model so later stages start from the pretrained encoder
    from . import checkpoint

    ckpt = phase_dir / "lm.ckpt"
    checkpoint.save_model(ckpt, model, {"phase": "lm_pretrain"})
    print(
        f"pretrain-lm: {report.steps} steps, final loss {report.final_loss:.4f}, "
        f"{report.wall_seconds:.1f}s, checkpoint {ckpt}"
    )
    return 0


def _cmd_train(args, cfg: RunConfig, run_dir: Path) -> int:
    from . import checkpoint
    from .training import train_stage1, train_stage2

    vocab = _ensure_vocab(cfg, _resolve(args.vocab, run_dir))
    examples = _read_examples(_resolve(args.data, run_dir), vocab)
    phase = f"stage{args.stage}"
    hyper = hyperparams_for(cfg, phase)
    if args.steps is not None:
        hyper.steps = args.steps

    model = _build_model(cfg)
    if args.init is not None:
        init_path = _resolve(args.init, run_dir)
    else:
        default = run_dir / ("lm/lm.ckpt" if args.stage == 1 else "stage1/stage1.ckpt")
        if default.exists():
            init_path = default
        elif args.stage == 2:
            raise ConfigError(f"train --stage 2 needs an initial checkpoint (none at {default})")
        else:
            init_path = None  # stage 1 from random init is allowed
    if init_path is not None:
        checkpoint.load_model(init_path, model)

    phase_dir = run_dir / phase
    train = train_stage1 if args.stage == 1 else train_stage2
    report = train(model, examples, hyper, run_dir=phase_dir)
    print(
        f"train {phase}: {report.steps} steps, final loss {report.final_loss:.4f}, "
        f"{report.wall_seconds:.1f}s, checkpoint {report.checkpoint_path}"
    )
    return 0


def _gen_config(args, cfg: RunConfig):
    from .decoding import GenerationConfig

    return GenerationConfig(
        beam_size=args.beam if args.beam is not None else cfg.beam_size,
        max_len=args.max_new if args.max_new is not None else cfg.max_new,
        temperature=args.temperature if args.temperature is not None else cfg.temperature,
        top_k=args.top_k if args.top_k is not None else cfg.top_k,
        top_p=args.top_p if args.top_p is not None else cfg.top_p,
        seed=args.seed if args.seed is not None else cfg.gen_seed,
    )


def _cmd_generate(args, cfg: RunConfig, run_dir: Path) -> int:
    from . import decoding
    from .tasks import detokenize

    vocab = _ensure_vocab(cfg, _resolve(args.vocab, run_dir))
    examples = _read_examples(_resolve(args.data, run_dir), vocab)
    model = _load_model(cfg, _resolve(args.ckpt, run_dir))
    gen_cfg = _gen_config(args, cfg)
    out = _resolve(args.out, run_dir)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.sample:
        settings = {
            "mode": "sample",
            "temperature": gen_cfg.temperature,
            "top_k": gen_cfg.top_k,
            "top_p": gen_cfg.top_p,
            "seed": gen_cfg.seed,
            "max_len": gen_cfg.max_len,
        }
    else:
        settings = {"mode": "beam", "beam_size": gen_cfg.beam_size, "max_len": gen_cfg.max_len}

    n_done = 0
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        for i, ex in enumerate(examples):
            if args.sample:
                per_cfg = decoding.GenerationConfig(**{**_gen_kwargs(gen_cfg), "seed": gen_cfg.seed + i})
                hyp = decoding.sample(model, ex.prompt, ex.source, per_cfg)
            elif gen_cfg.beam_size == 1:
                hyp = decoding.greedy(model, ex.prompt, ex.source, max_len=gen_cfg.max_len)
            else:
                hyp, _ = decoding.beam_search(model, ex.prompt, ex.source, gen_cfg)
            record = {
                "input": detokenize(ex.prompt + ex.source, vocab),
                "tokens": hyp.tokens,
                "text": detokenize(hyp.content(model.eos_token), vocab),
                "log_prob": hyp.log_prob,
                "settings": settings,
            }
            f.write(json.dumps(record, ensure_ascii=True) + "\n")
            n_done += 1
    print(f"generate: wrote {n_done} hypotheses to {out}")
    return 0


def _gen_kwargs(gen_cfg):
    return {
        "beam_size": gen_cfg.beam_size,
        "max_len": gen_cfg.max_len,
        "temperature": gen_cfg.temperature,
        "top_k": gen_cfg.top_k,
        "top_p": gen_cfg.top_p,
        "seed": gen_cfg.seed,
        "length_normalize": gen_cfg.length_normalize,
    }


_METRIC_NAMES = ("bleu", "tsr", "hter", "acc")


def _cmd_eval(args, cfg: RunConfig, run_dir: Path) -> int:
    from . import decoding, metrics
    from .tasks import detokenize, tokenize

    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in wanted if m not in _METRIC_NAMES]
    if unknown:
        raise ArgumentError(f"unknown metrics {unknown}; choose from {_METRIC_NAMES}")
    if not wanted:
        raise ArgumentError("eval needs at least one metric")

    vocab = _ensure_vocab(cfg, _resolve(args.vocab, run_dir))
    examples = _read_examples(_resolve(args.data, run_dir), vocab)
    model = _load_model(cfg, _resolve(args.ckpt, run_dir))
    beam = args.beam if args.beam is not None else 1
    max_new = args.max_new if args.max_new is not None else cfg.max_new

    rows = []  # per-example CSV rows
    by_task: dict[str, dict[str, list]] = {}
    for idx, ex in enumerate(examples):
        if beam == 1:
            hyp = decoding.greedy(model, ex.prompt, ex.source, max_len=max_new)
        else:
            hyp, _ = decoding.beam_search(
                model, ex.prompt, ex.source, decoding.GenerationConfig(beam_size=beam, max_len=max_new)
            )
        pred = hyp.content(model.eos_token)
        bucket = by_task.setdefault(ex.task, {"hyps": [], "refs": [], "tsr": [], "hter": [], "acc": []})
        bucket["hyps"].append(pred)
        bucket["refs"].append(list(ex.target))
        row = {"index": idx, "task": ex.task, "exact": int(pred == list(ex.target))}
        bucket["acc"].append(row["exact"])
        if "hter" in wanted:
            row["hter"] = metrics.hter(pred, ex.target)
            bucket["hter"].append(row["hter"])
        if "tsr" in wanted and ex.meta.get("pairs"):
            pairs = [
                metrics.TermPair(tuple(tokenize(s, vocab)), tuple(tokenize(t, vocab)))
                for s, t in ex.meta["pairs"]
            ]
            row["tsr"] = metrics.tsr(pred, pairs)
            bucket["tsr"].append(row["tsr"])
        rows.append(row)

    report: dict = {}
    for task, bucket in sorted(by_task.items()):
        entry: dict = {"examples": len(bucket["hyps"])}
        if "bleu" in wanted:
            entry["bleu"] = metrics.bleu(bucket["hyps"], bucket["refs"])
        if "acc" in wanted:
            entry["acc"] = sum(bucket["acc"]) / len(bucket["acc"])
        if "hter" in wanted and bucket["hter"]:
            entry["hter"] = sum(bucket["hter"]) / len(bucket["hter"])
        if "tsr" in wanted and bucket["tsr"]:
            entry["tsr"] = sum(bucket["tsr"]) / len(bucket["tsr"])
        report[task] = entry

    out = _resolve(args.out, run_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.per_example:
        import csv as _csv

        per_path = _resolve(args.per_example, run_dir)
        with open(per_path, "w", newline="", encoding="utf-8") as f:
            keys = ["index", "task", "exact"] + [m for m in ("hter", "tsr") if m in wanted]
            w = _csv.DictWriter(f, fieldnames=keys, extrasaction="ignore", restval="")
            w.writeheader()
            w.writerows(rows)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_kv_report(args, cfg: RunConfig, run_dir: Path) -> int:
    from . import kv_analytics as kv

    if args.arch:
        specs = kv.load_specs(_resolve(args.arch, run_dir))
    else:
        specs = list(kv.REFERENCE_SPECS.values())
    rows = []
    for spec in specs:
        rep = kv.kv_bytes(spec, args.batch, args.src, args.tgt)
        rows.append((spec.name, rep.kb_decimal_floored, rep.bytes_exact))
    name_w = max(len(r[0]) for r in rows)
    print(f"{'model':<{name_w}}  {'kB/(b·(s+t))':>14}  bytes@b={args.batch},s={args.src},t={args.tgt}")
    for name, kb, total in rows:
        print(f"{name:<{name_w}}  {kb:>14}  {total}")
    if args.out:
        payload = [
            {"name": n, "kb_per_token_unit": kb, "bytes_exact": total, "b": args.batch, "s": args.src, "t": args.tgt}
            for n, kb, total in rows
        ]
        out = _resolve(args.out, run_dir)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def _load_bench_model(path: Path):
    """Build a runnable toy model from a JSON arch description."""
    from .config import build_model_config
    from .encoder import CausalLM, EncoderConfig
    from .model import CausalLMTranslator, LamateModel

    try:
        desc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read bench arch: {e}", path=str(path)) from e
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON: {e.msg}", path=str(path), line=e.lineno) from e
    if not isinstance(desc, dict) or "kind" not in desc:
        raise DataError("bench arch must be an object with a 'kind' field", path=str(path))
    kind = desc.pop("kind")
    name = desc.pop("name", kind)
    seed = desc.pop("seed", 0)
    if kind == "decoder-only":
        enc_keys = {"layers", "dim", "heads", "kv_heads", "vocab_size", "max_len", "groups", "ffn_mult"}
        unknown = set(desc) - enc_keys
        if unknown:
            raise DataError(f"unknown decoder-only fields {sorted(unknown)}", path=str(path))
        return name, CausalLMTranslator(CausalLM(EncoderConfig(**desc), seed=seed))
    if kind == "lamate":
        defaults = RunConfig()
        for key in desc:
            if not hasattr(defaults, key):
                raise DataError(f"unknown lamate arch field {key!r}", path=str(path))
        return name, LamateModel(build_model_config(RunConfig(**desc)), seed=seed)
    raise DataError(f"unknown bench arch kind {kind!r}", path=str(path))


def _parse_grid(grid: str) -> tuple[list[int], list[int]]:
    try:
        batches_s, srcs_s = grid.lower().split("x", 1)
        batches = [int(b) for b in batches_s.split(",") if b]
        srcs = [int(s) for s in srcs_s.split(",") if s]
    except ValueError as e:
        raise ArgumentError(f"--grid expects 'B1,B2xS1,S2', got {grid!r}") from e
    if not batches or not srcs:
        raise ArgumentError(f"--grid expects 'B1,B2xS1,S2', got {grid!r}")
    return batches, srcs


def _cmd_bench(args, cfg: RunConfig, run_dir: Path) -> int:
    from . import kv_analytics as kv

    name_a, model_a = _load_bench_model(_resolve(args.arch_a, run_dir))
    name_b, model_b = _load_bench_model(_resolve(args.arch_b, run_dir))
    batches, srcs = _parse_grid(args.grid)
    cells = kv.bench_decode(
        model_a,
        model_b,
        batches,
        srcs,
        args.tgt_len,
        repetitions=args.reps,
        warmup=args.warmup,
        max_cache_bytes=args.max_cache_bytes,
        seed=args.seed or 0,
    )
    print(kv.bench_table(cells, name_a, name_b))
    if args.out:
        out = _resolve(args.out, run_dir)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(kv.bench_csv(cells), encoding="utf-8")
        print(f"bench: wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="lamate", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--run-dir", default="runs/default", help="base directory for outputs and relative paths")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--debug", action="store_true", help="print tracebacks on errors")
    sub = p.add_subparsers(dest="command", metavar="subcommand")

    sp = sub.add_parser("gen-data", help="generate a synthetic corpus")
    sp.add_argument("--task", required=True,
                    choices=["general", "doc", "domain", "terminology", "postedit", "copy", "mix"])
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab", default="vocab.txt")
    sp.set_defaults(handler=_cmd_gen_data)

    sp = sub.add_parser("pretrain-lm", help="next-token pretraining of the encoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--vocab", default="vocab.txt")
    sp.add_argument("--steps", type=int, default=None)
    sp.set_defaults(handler=_cmd_pretrain_lm)

    sp = sub.add_parser("train", help="stage 1 (frozen encoder) or stage 2 (full) training")
    sp.add_argument("--stage", type=int, required=True, choices=[1, 2])
    sp.add_argument("--data", required=True)
    sp.add_argument("--vocab", default="vocab.txt")
    sp.add_argument("--init", default=None, help="initial checkpoint (defaults to the previous phase's)")
    sp.add_argument("--steps", type=int, default=None)
    sp.set_defaults(handler=_cmd_train)

    sp = sub.add_parser("generate", help="decode a corpus with a trained model")
    sp.add_argument("--ckpt", default="stage2/stage2.ckpt")
    sp.add_argument("--data", required=True)
    sp.add_argument("--vocab", default="vocab.txt")
    sp.add_argument("--out", default="generations.jsonl")
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--beam", type=int, default=None, help="beam size (beam mode)")
    mode.add_argument("--sample", action="store_true", help="temperature/top-k/top-p sampling")
    sp.add_argument("--temperature", type=float, default=None)
    sp.add_argument("--top-k", type=int, default=None, dest="top_k")
    sp.add_argument("--top-p", type=float, default=None, dest="top_p")
    sp.add_argument("--max-new", type=int, default=None, dest="max_new")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(handler=_cmd_generate)

    sp = sub.add_parser("eval", help="decode and score a corpus")
    sp.add_argument("--ckpt", default="stage2/stage2.ckpt")
    sp.add_argument("--data", required=True)
    sp.add_argument("--vocab", default="vocab.txt")
    sp.add_argument("--metrics", default="bleu,tsr,hter,acc")
    sp.add_argument("--beam", type=int, default=None, help="beam size (default 1 = greedy)")
    sp.add_argument("--max-new", type=int, default=None, dest="max_new")
    sp.add_argument("--out", default="eval.json")
    sp.add_argument("--per-example", default=None, dest="per_example", help="CSV of per-example scores")
    sp.set_defaults(handler=_cmd_eval)

    sp = sub.add_parser("kv-report", help="analytic KV-cache table")
    sp.add_argument("--arch", default=None, help="JSON array of arch specs (default: built-in reference set)")
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--src", type=int, default=1)
    sp.add_argument("--tgt", type=int, default=0)
    sp.add_argument("--out", default=None, help="also write the table as JSON")
    sp.set_defaults(handler=_cmd_kv_report)

    sp = sub.add_parser("bench", help="decode-throughput comparison of two toy models")
    sp.add_argument("--arch-a", required=True, dest="arch_a")
    sp.add_argument("--arch-b", required=True, dest="arch_b")
    sp.add_argument("--grid", required=True, help="'B1,B2xS1,S2' batch sizes x source lengths")
    sp.add_argument("--tgt-len", type=int, default=64, dest="tgt_len")
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--max-cache-bytes", type=int, default=None, dest="max_cache_bytes")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None, help="write the grid as CSV")
    sp.set_defaults(handler=_cmd_bench)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 1
    if not getattr(args, "handler", None):
        parser.print_usage(sys.stderr)
        print("lamate: a subcommand is required", file=sys.stderr)
        return 1

    command = args.command
    try:
        run_dir = Path(args.run_dir)
        cfg = load_config(args.config, args.set)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_snapshot(cfg, run_dir)
        return args.handler(args, cfg, run_dir)
    except NumericError as e:
        _report(command, e, args.debug)
        return 3
    except _DATA_ERRORS as e:
        _report(command, e, args.debug)
        return 2
    except _USAGE_ERRORS as e:
        _report(command, e, args.debug)
        return 1
    except Exception as e:  # anything unexpected: report without a stack trace
        _report(command, e, args.debug)
        return 1


def _report(command: str, error: Exception, debug: bool) -> None:
    if debug:
        traceback.print_exc()
    print(f"lamate {command}: {error}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
