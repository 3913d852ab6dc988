"""Command-line entry points.

    promptspk gen-corpus --out DIR [--config PATH] [--seed N] [--force]
    promptspk train SYSTEM --corpus DIR --out CKPT [--config PATH] [--seed N] [--force]
    promptspk generate --checkpoint CKPT --records FILE --out FILE.emb [--n N] [--seed N] [--force]
    promptspk evaluate {fad,similarity,ablation} --corpus DIR [--generated FILE.emb]
                       [--checkpoint CKPT ...] [--seed N] [--out FILE.csv]

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``PFE_THREADS``
caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import shutil
import sys
import time
from contextlib import nullcontext
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import formats
from .config import ConfigError, load_config, with_seed
from .mathcore import DivergenceError
from .metrics import cosine_rows, fad_score
from .prompt import load_schema, read_records
from .synthdata import generate_corpus
from .systems import ABLATION_PORTIONS, SYSTEMS, ablation_similarity, corpus_features, train_system

log = logging.getLogger("promptspk")


class UsageError(Exception):
    pass


def _check_new(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} already exists; pass --force to overwrite")


def _write_csv(rows: list[list], out: str | None) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    if out is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(out).write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_gen_corpus(args) -> int:
    out = Path(args.out)
    if out.exists():
        if not args.force:
            raise FileExistsError(f"{out} already exists; pass --force to overwrite")
        shutil.rmtree(out) if out.is_dir() else out.unlink()
    config = with_seed(load_config(args.config), args.seed)
    schema = load_schema()
    corpus = generate_corpus(config.world, schema)
    formats.write_corpus(out, corpus, schema)
    counts = {s: len(r) for s, r in corpus.records.items()}
    log.info("wrote corpus to %s (%s)", out, ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    loss_path = Path(str(out) + ".loss.csv")
    _check_new(out, args.force)
    _check_new(loss_path, args.force)
    config = with_seed(load_config(args.config), args.seed)
    corpus, schema = formats.read_corpus(args.corpus)
    start = time.perf_counter()
    system = train_system(args.system, corpus, config, schema)
    log.info("trained %s in %.1f s", args.system, time.perf_counter() - start)
    formats.save_checkpoint(out, system)
    rows = [["epoch", "loss", "stage"]]
    for stage in ("disc", "flow"):
        for epoch, loss in enumerate(system.traces.get(stage, [])):
            rows.append([epoch, _fmt(loss), stage])
    _write_csv(rows, str(loss_path))
    return 0


def cmd_generate(args) -> int:
    out = Path(args.out)
    _check_new(out, args.force)
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    schema = load_schema()
    system = formats.load_checkpoint(args.checkpoint, schema)
    records = read_records(args.records)
    for r in records:
        r.validate(schema)
    if not system.generative and args.n > 1:
        log.warning("%s is deterministic; emitting 1 embedding per record instead of %d", system.name, args.n)
    reps = args.n if system.generative else 1
    x = system.generate(corpus_features(system.encoder, schema, records), args.n, seed=args.seed)
    meta = [{"speaker_id": r.speaker_id} for r in records for _ in range(reps)]
    formats.write_embeddings(out, x, meta)
    return 0


def _ground_truth(corpus) -> dict:
    table = {}
    for split, (records, x) in ((s, corpus.split(s)) for s in corpus.records):
        for r, row in zip(records, x):
            table[r.speaker_id] = row
    return table


def _load_generated(path, d: int) -> np.ndarray:
    x = formats.read_embeddings(path)
    if x.shape[1] != d:
        raise ValueError(f"generated embeddings have dim {x.shape[1]}, corpus has d={d}")
    return x


def cmd_evaluate(args) -> int:
    corpus, schema = formats.read_corpus(args.corpus)
    d = corpus.config.d
    if args.mode in ("fad", "similarity") and args.generated is None:
        raise UsageError(f"evaluate {args.mode} needs --generated")
    if args.mode == "ablation" and not args.checkpoint:
        raise UsageError("evaluate ablation needs at least one --checkpoint")
    if args.mode == "fad":
        x = _load_generated(args.generated, d)
        _, background = corpus.split("heldout")
        rows = [["metric", "value"], ["fad", _fmt(fad_score(background, x))]]
    elif args.mode == "similarity":
        x = _load_generated(args.generated, d)
        meta = formats.read_sidecar(args.generated)
        truth = _ground_truth(corpus)
        groups: dict[str, list[int]] = {}
        for row in meta:
            if row["speaker_id"] not in truth:
                raise KeyError(f"speaker {row['speaker_id']!r} not in corpus")
            groups.setdefault(row["speaker_id"], []).append(row["index"])
        rows = [["speaker_id", "n", "similarity"]]
        means = []
        for sid, idx in groups.items():
            sim = float(cosine_rows(x[idx], np.broadcast_to(truth[sid], (len(idx), d))).mean())
            means.append(sim)
            rows.append([sid, len(idx), _fmt(sim)])
        rows.append(["mean", len(means), _fmt(np.mean(means))])
    else:
        records, targets = corpus.split(args.split)
        seeds = tuple(range(args.seed, args.seed + args.n_seeds))
        rows = [["system", "portion", "similarity"]]
        for ckpt in args.checkpoint:
            system = formats.load_checkpoint(ckpt, schema)
            if system.d != d:
                raise ValueError(f"{ckpt}: d={system.d} but corpus has d={d}")
            means = ablation_similarity(system, schema, records, targets, ABLATION_PORTIONS, seeds, args.n)
            for portion, m in zip(ABLATION_PORTIONS, means):
                rows.append([system.name, str(Fraction(portion).limit_denominator(10)), _fmt(m)])
    _write_csv(rows, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptspk", description="Prompt-to-speaker-embedding toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="non-negative integer seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("gen-corpus", help="draw a synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train one system on a corpus")
    p.add_argument("system", choices=SYSTEMS)
    p.add_argument("--corpus", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="embeddings for a records file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--n", type=int, default=1, help="draws per record (flow systems)")
    common(p)
    p.set_defaults(func=cmd_generate, seed=0)

    p = sub.add_parser("evaluate", help="FAD, per-speaker similarity or the partial-prompt ablation")
    p.add_argument("mode", choices=("fad", "similarity", "ablation"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--generated")
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--split", default="eval")
    p.add_argument("--n", type=int, default=10, help="draws per record for flow systems (ablation)")
    p.add_argument("--n-seeds", type=int, default=3, help="subset seeds (ablation)")
    common(p, out_required=False)
    p.set_defaults(func=cmd_evaluate, seed=0)
    return parser


def _thread_limit():
    raw = os.environ.get("PFE_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PFE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"PFE_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "seed", None) is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"promptspk: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, DivergenceError) as exc:
        print(f"promptspk: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
