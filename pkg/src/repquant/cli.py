"""Command-line entry points: train, kmeans-train, tokenize, eval-pnmi, report, inspect.

Data goes to files (or stdout for metric lines); diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, DataError, RepquantError
from .featureio import load_corpus, read_feature_file, read_label_table, read_manifest
from .metrics import (
    codebook_utilization,
    distortion_report,
    format_metric_lines,
    pnmi_report,
    utilization_from_counts,
)
from .numkernel import make_rng
from .quantizer import DEFAULT_DEAD_THRESHOLD, TOKEN_SUFFIX, kmeans_fit, read_token_file, write_token_file
from .trainer import (
    TrainingConfig,
    kmeans_state,
    load_checkpoint,
    loss_log_path,
    parse_config,
    save_checkpoint,
    tokenize_sequence,
    token_path_for,
    train,
)

SEED_ENV = "REPQUANT_SEED"
PROG = "repquant"


class _Reporter:
    def __init__(self, command: str):
        self.command = command
        self.errors = 0

    def error(self, msg: str) -> None:
        self.errors += 1
        print(f"{PROG} {self.command}: error: {msg}", file=sys.stderr)

    def warn(self, msg: str) -> None:
        print(f"{PROG} {self.command}: warning: {msg}", file=sys.stderr)

    def info(self, msg: str) -> None:
        print(f"{PROG} {self.command}: {msg}", file=sys.stderr)


def _env_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _config_flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def resolve_config(config_path, overrides: dict) -> TrainingConfig:
    """Defaults, then the seed environment variable, then the config file, then flags."""
    base = TrainingConfig(seed=_env_seed())
    if config_path is not None:
        base = parse_config(Path(config_path).read_text(encoding="utf-8"), base)
    given = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(base, **given) if given else base


def cmd_train(args, rep: _Reporter) -> None:
    names = [f.name for f in dataclasses.fields(TrainingConfig)]
    cfg = resolve_config(args.config, {n: getattr(args, n) for n in names})
    out = train(args.manifest, cfg, args.out, resume=args.resume)
    rep.info(f"wrote {out} and {loss_log_path(out)}")


def cmd_kmeans_train(args, rep: _Reporter) -> None:
    seed = args.seed if args.seed is not None else _env_seed()
    seqs = load_corpus(args.manifest)
    data = np.concatenate([s.frames for s in seqs]).astype(np.float64)
    if args.clusters > data.shape[0]:
        raise ConfigurationError(f"{args.clusters} clusters requested but the corpus has {data.shape[0]} frames")
    history: list[float] = []
    centers, dist = kmeans_fit(data, args.clusters, max_iters=args.iters, rng=make_rng(seed, 0), history=history)
    idx, _ = kernels.nearest(data, centers)
    counts = np.bincount(idx, minlength=args.clusters)
    state = kmeans_state(centers, counts, iterations=len(history) - 1, seed=seed)
    out = Path(args.out)
    save_checkpoint(state, out)
    with open(loss_log_path(out), "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{i}\t{d!r}\n" for i, d in enumerate(history))
    rep.info(f"{len(history) - 1} iterations, distortion {dist!r}")


def cmd_tokenize(args, rep: _Reporter) -> None:
    state = load_checkpoint(args.checkpoint)
    entries = read_manifest(args.manifest)
    if not entries:
        rep.warn(f"{args.manifest} lists no feature files; nothing to do")
        return
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for e in entries:
        try:
            seq = read_feature_file(e.features)
            tokens = tokenize_sequence(state, seq.frames)
            write_token_file(token_path_for(e.features, out_dir), tokens, state.quantizer.size)
        except (RepquantError, OSError) as exc:
            rep.error(f"{e.features}: {exc}")


def _load_token_corpus(tokens_dir: Path, labels_path):
    files = sorted(tokens_dir.glob("*" + TOKEN_SUFFIX))
    if not files:
        raise DataError(f"{tokens_dir}: no token files")
    table = read_label_table(labels_path)
    ids, toks, labs = [], [], []
    for f in files:
        uid = f.stem
        if uid not in table:
            raise DataError(f"utterance {uid}: no labels in {labels_path}")
        t, _ = read_token_file(f)
        ids.append(uid)
        toks.append(t)
        labs.append(table[uid])
    return ids, toks, labs


def cmd_eval_pnmi(args, rep: _Reporter) -> None:
    ids, toks, labs = _load_token_corpus(Path(args.tokens_dir), args.labels)
    report = pnmi_report(toks, labs, args.max_n, utterance_ids=ids)
    for line in format_metric_lines("pnmi", report.per_n):
        print(line)


def cmd_report(args, rep: _Reporter) -> None:
    state = load_checkpoint(args.checkpoint)
    seqs = load_corpus(args.manifest)
    d = distortion_report(state, seqs)
    toks = [tokenize_sequence(state, s.frames) for s in seqs]
    frac, perp = codebook_utilization(toks, state.quantizer.size)
    print(f"l_r\t-\t{d.l_r!r}")
    print(f"l_q\t-\t{d.l_q!r}")
    print(f"frames\t-\t{d.frames}")
    print(f"utilization\t-\t{frac!r}")
    print(f"perplexity\t-\t{perp!r}")


def cmd_inspect(args, rep: _Reporter) -> None:
    state = load_checkpoint(args.checkpoint)
    arch = state.codec.arch
    rows = [
        ("dim", arch.dim),
        ("kernel", arch.kernel),
        ("enc_blocks", arch.enc_blocks),
        ("dec_blocks", arch.dec_blocks),
        ("clusters", arch.clusters),
        ("rvq_layers", arch.rvq_layers),
        ("step", state.step),
        ("seed", state.seed),
        ("encoder_convs", arch.n_encoder_convs),
        ("decoder_convs", arch.n_decoder_convs),
        ("convs", arch.n_encoder_convs + arch.n_decoder_convs),
        ("params", state.codec.n_params),
    ]
    for key, val in rows:
        print(f"{key}\t{val}")
    for i, cb in enumerate(state.quantizer.layers):
        frac, perp = utilization_from_counts(cb.ema_counts, threshold=DEFAULT_DEAD_THRESHOLD)
        print(f"utilization\t{i}\t{frac!r}")
        print(f"perplexity\t{i}\t{perp!r}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=PROG, description="Representation codec tokenizer tools.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = sub.add_parser("train", help="train a codec tokenizer")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path; the loss log goes next to it")
    t.add_argument("--config")
    t.add_argument("--resume", help="checkpoint to continue from")
    for f in dataclasses.fields(TrainingConfig):
        typ = int if f.type in (int, "int") else float
        t.add_argument(_config_flag(f.name), dest=f.name, type=typ, default=None)
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("kmeans-train", help="fit the k-means baseline tokenizer")
    k.add_argument("--manifest", required=True)
    k.add_argument("--clusters", required=True, type=_positive_int)
    k.add_argument("--iters", type=_positive_int, default=100)
    k.add_argument("--seed", type=int)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_kmeans_train)

    z = sub.add_parser("tokenize", help="write one token file per feature file")
    z.add_argument("--checkpoint", required=True)
    z.add_argument("--manifest", required=True)
    z.add_argument("--out-dir", required=True)
    z.set_defaults(func=cmd_tokenize)

    e = sub.add_parser("eval-pnmi", help="n-gram phone-normalized mutual information")
    e.add_argument("--tokens-dir", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--max-n", type=_positive_int, default=1)
    e.set_defaults(func=cmd_eval_pnmi)

    r = sub.add_parser("report", help="corpus distortion and codebook use")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--manifest", required=True)
    r.set_defaults(func=cmd_report)

    i = sub.add_parser("inspect", help="print checkpoint header and codebook health")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    rep = _Reporter(args.command)
    try:
        args.func(args, rep)
    except (RepquantError, OSError) as exc:
        rep.error(str(exc))
    return 1 if rep.errors else 0


if __name__ == "__main__":
    sys.exit(main())
