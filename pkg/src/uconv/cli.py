"""``uconv`` command line: describe, bench, train-toy, decode, check.

Exit codes: 0 success, 1 usage error, 2 validation or property failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .bench import ConfigurationError, compare
from .checks import SUITES
from .ctc import Vocabulary, beam_search
from .frontend import AudioError, load_features
from .model import CheckpointError, SequenceBatch, build, count_params, load, load_config, save
from .reduction import stage_lengths
from .trainer import decode_all, load_dataset, train_toy

EXIT_OK, EXIT_USAGE, EXIT_FAILED, EXIT_IO = 0, 1, 2, 3
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _name(source: str) -> str:
    return Path(source).stem if Path(source).suffix else source


# -- subcommands --------------------------------------------------------------------

def cmd_describe(args) -> int:
    cfg = load_config(args.config)
    pol = cfg.policy
    print(f"config: {_name(args.config)}")
    print(f"policy: {pol.level_text()}  layers: {pol.layers_text()}")
    print(f"reduction depth: x{pol.reduction_depth}  final reduction: x{pol.final_reduction}")
    print(f"layer: d={cfg.layer.attn_dim} heads={cfg.layer.heads} ffn={cfg.layer.ffn_dim} "
          f"kernel={cfg.layer.conv_kernel} vocab={cfg.vocab_size}")
    lengths = stage_lengths(pol, args.frames) if args.frames is not None else None
    header = f"{'stage':>5}  {'level':>5}  {'layers':>6}"
    print(header + (f"  {'frames':>6}" if lengths else ""))
    for i, (level, n) in enumerate(zip(pol.levels, pol.layers_per_level)):
        row = f"{i:>5}  {'x' + str(level):>5}  {n:>6}"
        print(row + (f"  {lengths[i]:>6}" if lengths else ""))
    print(f"{count_params(build(cfg, args.seed)):,} params")
    if lengths:
        print("stage lengths: [" + ",".join(map(str, lengths)) + "]")
    return EXIT_OK


def cmd_bench(args) -> int:
    sources = [args.baseline] + args.candidate
    models = [(_name(s), load_config(s)) for s in sources]
    report = compare(models, duration_s=args.seconds, repeats=args.repeats, seed=args.seed,
                     warmup=args.warmup, threads=args.threads)
    print(report.to_markdown(), end="")
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    if args.markdown:
        Path(args.markdown).write_text(report.to_markdown(), encoding="utf-8")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = load_config(args.config)
    dataset, vocab = load_dataset(args.data)
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} entries (with blank), config expects {cfg.vocab_size}")
    result = train_toy(cfg, dataset, args.steps, seed=args.seed, frame_budget=args.frame_budget,
                       augment=args.augment, log_every=args.log_every)
    if result.dropped:
        print(f"dropped {len(result.dropped)} of {len(dataset)} utterances as infeasible: "
              + ", ".join(result.dropped), file=sys.stderr)
    save(result.encoder, args.out)
    trace = Path(args.trace) if args.trace else Path(str(args.out) + ".loss.csv")
    with open(trace, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(result.losses, result.lrs), start=1):
            writer.writerow([i, repr(loss), repr(lr)])
    kept = [u for u in dataset if u.uid not in set(result.dropped)]
    if kept:
        hyps = decode_all(result.encoder, kept)
        exact = sum(h == u.labels for h, u in zip(hyps, kept))
        print(f"exact greedy matches: {exact}/{len(kept)}")
    if result.losses:
        print(f"steps: {len(result.losses)}  final loss: {result.losses[-1]:.4f}")
    if not all(np.isfinite(result.losses)):
        print("non-finite loss encountered", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_decode(args) -> int:
    encoder = load(args.model)
    vocab = Vocabulary.load(args.vocab)
    if len(vocab) != encoder.config.vocab_size:
        raise ValueError(f"vocabulary has {len(vocab)} entries (with blank) but the model "
                         f"outputs {encoder.config.vocab_size}")
    feats = load_features(args.input)
    with nx.no_grad():
        out = encoder.forward(SequenceBatch.from_list([feats]))
    n = int(out.lengths[0])
    best = beam_search(out.final_logits.data[0, :n], args.beam)[0]
    print(vocab.detokenize(best.prefix))
    return EXIT_OK


def cmd_check(args) -> int:
    names = [args.suite] if args.suite else list(SUITES)
    failures = []
    for name in names:
        for r in SUITES[name]():
            status = "PASS" if r.passed else "FAIL"
            print(f"[{status}] {r.name}: {r.detail}")
            if not r.passed:
                failures.append(r.name)
    if failures:
        print(f"{len(failures)} check(s) failed: " + "; ".join(failures), file=sys.stderr)
        return EXIT_FAILED
    print("all checks passed")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uconv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("describe", help="policy, layer table, parameter count")
    d.add_argument("--config", required=True, help="preset name or key=value config file")
    d.add_argument("--frames", type=int, help="also print per-stage lengths for this many input frames")
    d.add_argument("--seed", type=int, default=DEFAULT_SEED)
    d.set_defaults(func=cmd_describe)

    b = sub.add_parser("bench", help="single-thread latency comparison")
    b.add_argument("--baseline", required=True)
    b.add_argument("--candidate", action="append", required=True, help="repeatable")
    b.add_argument("--seconds", type=float, default=30.0)
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=DEFAULT_SEED)
    b.add_argument("--out", help="CSV report path")
    b.add_argument("--markdown", help="Markdown report path")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train-toy", help="overfit a small dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="directory with manifest.tsv and vocab.txt")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=DEFAULT_SEED)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--trace", help="loss-trace CSV (default: <out>.loss.csv)")
    t.add_argument("--frame-budget", type=int, default=100_000)
    t.add_argument("--augment", action="store_true", help="apply time/frequency masking")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train_toy)

    c = sub.add_parser("decode", help="beam-search decode one utterance")
    c.add_argument("--model", required=True)
    c.add_argument("--input", required=True, help="16 kHz mono WAV or FEAT file")
    c.add_argument("--vocab", required=True)
    c.add_argument("--beam", type=int, default=20)
    c.set_defaults(func=cmd_decode)

    k = sub.add_parser("check", help="run property suites")
    k.add_argument("--suite", choices=sorted(SUITES))
    k.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return exc.code or EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "steps", 0) is not None and getattr(args, "steps", 0) < 0:
        print("uconv: error: --steps must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (OSError, AudioError, CheckpointError) as exc:
        print(f"uconv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, ConfigurationError) as exc:
        print(f"uconv: error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
