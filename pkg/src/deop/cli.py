"""Command-line entry point: ``deop <subcommand> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import gradcheck as gc
from . import pipeline as pl
from .config import ConfigFileError, RunConfig, build, reference_text
from .numcore import NonFiniteError
from .synthdata import DatasetSpec, GenerationError, ParseError, generate, read_manifest

log = logging.getLogger("deop")

SUBCOMMANDS = ("gen-data", "pretrain-encoder", "train-proposals", "train-deop", "eval", "bench",
               "gradcheck", "dump-heatmaps", "run")
CONFIG_KEYS = set(RunConfig.__dataclass_fields__)


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="deop", description="One-pass open-vocabulary segmentation on synthetic shapes.",
        epilog="Every run-config key is accepted as --key value (see `deop config`):\n\n"
               + reference_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="subcommand")

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="key = value config file")
        return s

    s = add("gen-data", "render the synthetic dataset")
    s.add_argument("--spec", default="default", help="'default' or an existing dataset directory to copy")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.add_argument("--out", dest="dest", help="dataset directory (default: the data key)")
    add("pretrain-encoder", "align the encoder with the class embeddings")
    add("train-proposals", "train the class-agnostic proposal network")
    add("train-deop", "train prompts, class offsets and the heatmap decoder for --mode")
    s = add("eval", "evaluate --mode on the validation split")
    s.add_argument("--dump", help="directory for prediction and heatmap PGMs")
    s = add("bench", "time one-pass against multi-pass classification")
    s.add_argument("--n-prime", default="1,5,20", help="comma-separated crop counts")
    s.add_argument("--images", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s = add("gradcheck", "finite-difference gradient checks")
    s.add_argument("--target", default="all", help=f"all or a comma list of {','.join(gc.TARGETS)}")
    s = add("dump-heatmaps", "write the anchor heatmaps of one validation image")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--file", help="output PGM path (default <out>/heat_<index>.pgm)")
    s = add("run", "pretrain-encoder, train-proposals, then train-deop and eval for each --modes")
    s.add_argument("--modes", default="baseline+,deop")
    sub.add_parser("config", help="print every config key with its default")
    return p


def _overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown option {tok.split('=')[0]!r}")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"option --{key} needs a value")
            i += 1
            val = extra[i]
        out[key] = val
        i += 1
    return out


def _load_all(cfg: RunConfig, need_stream: bool = True):
    data = pl.Data.open(cfg.data, ("val",))
    enc = pl.load_encoder(cfg)
    net = pl.load_proposals(cfg)
    stream = pl.load_stream(cfg, enc, data.manifest) if need_stream else None
    return data, enc, net, stream


def cmd_gen_data(cfg: RunConfig, args) -> None:
    if args.spec == "default":
        spec = DatasetSpec(seed=cfg.seed, image_size=cfg.image_size)
    else:
        spec = read_manifest(args.spec).dataset_spec()
    if args.n_train is not None:
        spec = DatasetSpec(**{**spec.__dict__, "n_train": args.n_train})
    if args.n_val is not None:
        spec = DatasetSpec(**{**spec.__dict__, "n_val": args.n_val})
    out = generate(spec, args.dest or cfg.data)
    print(f"wrote {spec.n_train} train + {spec.n_val} val images to {out}")


def cmd_pretrain_encoder(cfg: RunConfig, args) -> None:
    manifest = read_manifest(cfg.data)
    enc, losses = pl.pretrain_encoder(cfg, manifest)
    path = pl.save_encoder(cfg, enc)
    tail = losses[-100:] or [float("nan")]
    print(f"encoder saved to {path} (final loss {sum(tail) / len(tail):.4f})")


def cmd_train_proposals(cfg: RunConfig, args) -> None:
    data = pl.Data.open(cfg.data)
    net, losses = pl.train_proposals(cfg, data.train)
    path = pl.save_proposals(cfg, net)
    masks = pl.propose_all(net, data.val)
    seen = set(data.manifest.seen_ids())
    _, r_seen, r_unseen = pl.proposal_recall(masks, data.val, seen, cfg.thresholds())
    rec = " ".join(f"recall_seen@{t:g}={r_seen[t]:.4f} recall_unseen@{t:g}={r_unseen[t]:.4f}"
                   for t in cfg.thresholds())
    print(f"proposals saved to {path} {rec}")


def cmd_train_deop(cfg: RunConfig, args) -> None:
    data = pl.Data.open(cfg.data, ("train",))
    enc = pl.load_encoder(cfg)
    net = pl.load_proposals(cfg)
    stream = pl.train_deop(cfg, enc, net, data)
    path = pl.save_stream(cfg, stream)
    print(f"{cfg.mode} stream saved to {path} (final loss {stream.history[-1] if stream.history else 0:.4f})")


def cmd_eval(cfg: RunConfig, args) -> None:
    data, enc, net, stream = _load_all(cfg)
    masks = pl.propose_all(net, data.val)
    report = pl.evaluate(cfg, stream, data.val, masks, args.dump)
    path = pl.run_path(cfg, f"eval-{cfg.mode.replace('+', 'plus')}.txt")
    report.write(path)
    sys.stdout.write(report.to_text())


def cmd_bench(cfg: RunConfig, args) -> None:
    from . import bench
    data = pl.Data.open(cfg.data, ("val",))
    enc = pl.load_encoder(cfg)
    net = pl.load_proposals(cfg)
    stream = pl.Stream.build(cfg, enc, data.manifest)
    path = pl.run_path(cfg, pl.stream_ckpt_name(cfg.mode))
    if path.exists():
        stream = pl.load_stream(cfg, enc, data.manifest)
    n_primes = [int(n) for n in args.n_prime.split(",") if n.strip()]
    samples = data.val[: args.images + args.warmup]
    masks = pl.propose_all(net, samples)
    report = bench.timed_compare(stream, samples, masks, n_primes, args.images, args.warmup)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(report.to_csv())
    (out / "bench.txt").write_text(report.to_text())
    sys.stdout.write(report.to_csv())


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    targets = gc.TARGETS if args.target == "all" else tuple(t.strip() for t in args.target.split(","))
    results = gc.run(targets, cfg.seed)
    worst = 0.0
    for module, checks in results.items():
        m = max(checks.values())
        worst = max(worst, m)
        print(f"{module} max_rel_err={m:.3e} {'ok' if m < gc.TOLERANCE else 'FAIL'}")
    print(f"all max_rel_err={worst:.3e} tolerance={gc.TOLERANCE:g}")
    return 0 if worst < gc.TOLERANCE else 1


def cmd_dump_heatmaps(cfg: RunConfig, args) -> None:
    data, enc, net, stream = _load_all(cfg)
    if not 0 <= args.index < len(data.val):
        raise ValueError(f"index {args.index} outside the {len(data.val)} validation images")
    s = data.val[args.index]
    masks = pl.propose_all(net, [s])[0]
    path = Path(args.file) if args.file else pl.run_path(cfg, f"heat_{args.index:04d}.pgm")
    path.parent.mkdir(parents=True, exist_ok=True)
    pl.dump_heatmaps(stream, s.image, masks, path)
    print(f"heatmaps written to {path}")


def cmd_run(cfg: RunConfig, args) -> None:
    cmd_pretrain_encoder(cfg, args)
    cmd_train_proposals(cfg, args)
    for mode in [m.strip() for m in args.modes.split(",") if m.strip()]:
        c = cfg.replace(mode=mode)
        cmd_train_deop(c, args)
        args.dump = None
        cmd_eval(c, args)


HANDLERS = {"gen-data": cmd_gen_data, "pretrain-encoder": cmd_pretrain_encoder,
            "train-proposals": cmd_train_proposals, "train-deop": cmd_train_deop, "eval": cmd_eval,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck, "dump-heatmaps": cmd_dump_heatmaps,
            "run": cmd_run}

# exception type -> error kind printed on the single error line
ERROR_KINDS = ((ckpt.FingerprintMismatch, "fingerprint-mismatch"), (ckpt.CheckpointError, "checkpoint"),
               (FileNotFoundError, "missing-file"), (ParseError, "parse"), (ConfigFileError, "config"),
               (pl.TrainingDiverged, "diverged"), (NonFiniteError, "diverged"),
               (pl.FreezeViolation, "freeze-violation"), (GenerationError, "generation"),
               (ValueError, "invalid"))


def error_kind(exc: BaseException) -> str:
    if isinstance(exc, FileNotFoundError) and str(exc).startswith("checkpoint not found"):
        return "checkpoint-missing"
    for t, kind in ERROR_KINDS:
        if isinstance(exc, t):
            return kind
    return "internal"


def main(argv=None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("deop: error: a subcommand is required", file=sys.stderr)
        return 2
    if args.command == "config":
        print(reference_text())
        return 0
    try:
        overrides = _overrides(extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deop: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = build(args.config, overrides)
        log.info("deop %s seed=%d data=%s out=%s", args.command, cfg.seed, cfg.data, cfg.out)
        rc = HANDLERS[args.command](cfg, args)
        return int(rc or 0)
    except Exception as exc:  # one machine-parsable line, no traceback
        msg = " ".join(str(exc).split())
        print(f"error: {error_kind(exc)}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
