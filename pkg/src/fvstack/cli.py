"""Command-line interface: ``fvstack <command> [options]``.

Descriptor directories hold one ``<video>.fvd`` file per video. Extra
transformed extractions of the same video may sit next to it as
``<video>@<tag>.fvd`` (for example ``clip7@s2m.fvd``); when present they are
stacked as given, otherwise the configured transforms are simulated.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline
from .config import PipelineConfig, load_config
from .container import load_container, save_container
from .descriptor_io import ChannelSpec, SynthSpec, TransformTag, read_descriptors, synth_generate, write_descriptors
from .errors import ConfigError, DataError, FvStackError, NumericError
from .fv import read_representation, write_representation

log = logging.getLogger("fvstack")


# -- file helpers -----------------------------------------------------------------------


def read_descriptor_dir(path) -> list:
    """Group ``.fvd`` files by video; returns a list of ``(tag, set)`` lists."""
    root = Path(path)
    files = sorted(root.glob("*.fvd"))
    if not files:
        raise DataError(f"no .fvd files in {root}")
    groups = defaultdict(list)
    for f in files:
        vid, _, tag_text = f.stem.partition("@")
        tag = TransformTag.parse(tag_text) if tag_text else TransformTag()
        groups[vid].append((tag, read_descriptors(f, video_id=vid)))
    out = []
    for vid in sorted(groups):
        variants = sorted(groups[vid], key=lambda p: (not p[0].is_identity, str(p[0])))
        if not variants[0][0].is_identity:
            raise DataError(f"video {vid}: no untransformed {vid}.fvd file")
        out.append(variants[0][1] if len(variants) == 1 else variants)
    return out


def read_rep_dir(path) -> list:
    files = sorted(Path(path).glob("*.fvr"))
    if not files:
        raise DataError(f"no .fvr files in {path}")
    return [read_representation(f) for f in files]


def _seeds(text: str | None, default: int) -> list:
    if not text:
        return [default]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc


def _seeded_path(path: Path, seed: int, many: bool) -> Path:
    return path.with_name(f"{path.stem}.seed{seed}{path.suffix}") if many else path


def _config(args, container=None) -> PipelineConfig:
    if args.config:
        cfg = load_config(args.config)
    elif container is not None:
        cfg = container.config
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


# -- commands ----------------------------------------------------------------------------------


def cmd_synth(args) -> None:
    channels = tuple(
        ChannelSpec(name, int(dim))
        for name, dim in (item.split(":") for item in args.channels.split(","))
    )
    spec = SynthSpec(
        n_classes=args.classes, videos_per_class=args.videos, records_per_video=args.records,
        channels=channels, separation=args.separation, layout=args.layout,
        geometry_seed=args.geometry_seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = synth_generate(spec, args.seed if args.seed is not None else 0)
    for d in sets:
        write_descriptors(d, out / f"{d.video_id}.fvd")
    print(f"wrote {len(sets)} videos to {out}")


def cmd_fit_unsup(args) -> None:
    cfg = _config(args)
    videos = read_descriptor_dir(args.data)
    container = pipeline.fit_unsupervised(pipeline._identity_sets(videos), cfg)
    save_container(container, args.out)
    print(f"saved unsupervised stage to {args.out} (representation dim {container.representation_dim()})")


def cmd_encode(args) -> None:
    container = load_container(args.model)
    videos = read_descriptor_dir(args.data)
    dafs = False if args.no_dafs else None
    reps = pipeline.encode(container, videos, dafs=dafs, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rep in reps:
        write_representation(rep, out / f"{rep.video_id}.fvr")
    print(f"encoded {len(reps)} videos to {out}")


def cmd_train(args) -> None:
    container = load_container(args.model)
    reps = read_rep_dir(args.reps)
    base = _config(args, container)
    seeds = _seeds(args.seeds, base.net.seed)
    for seed in seeds:
        cfg = base.with_seed(seed) if len(seeds) > 1 else base
        out = pipeline.train_classifier(container, reps, cfg)
        path = _seeded_path(Path(args.out), seed, len(seeds) > 1)
        save_container(out, path)
        acc = pipeline.accuracy(out, reps)
        print(f"seed {cfg.net.seed}: train accuracy {acc:.4f}, saved {path}")


def cmd_bag(args) -> None:
    container = load_container(args.model)
    reps = read_rep_dir(args.reps)
    cfg = _config(args, container)
    out = pipeline.bag(container, reps, cfg, count=args.count)
    save_container(out, args.out)
    print(f"seed {cfg.net.seed}: {len(out.classifier.members)}-member ensemble saved to {args.out}")


def cmd_transfer(args) -> None:
    source = load_container(args.source)
    what = {w.strip() for w in args.what.split(",") if w.strip()} if args.what else set()
    cfg = _config(args, source)
    videos = read_descriptor_dir(args.data)
    out, reps = pipeline.transfer(source, videos, what, cfg, threads=args.threads)
    save_container(out, args.out)
    if args.reps_out:
        rep_dir = Path(args.reps_out)
        rep_dir.mkdir(parents=True, exist_ok=True)
        for rep in reps:
            write_representation(rep, rep_dir / f"{rep.video_id}.fvr")
    print(f"transferred {sorted(what) or 'nothing'}; saved {args.out}")


def cmd_eval(args) -> None:
    container = load_container(args.model)
    reps = read_rep_dir(args.reps)
    report = pipeline.eval_model(container, reps, args.protocol, args.negative_class, args.plot)
    print(f"seed {container.config.net.seed}")
    print(report.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())


def cmd_sweep(args) -> None:
    container = load_container(args.model)
    cfg = _config(args, container)
    rows = pipeline.sweep(
        container, read_rep_dir(args.reps), read_rep_dir(args.val_reps), cfg,
        seeds=_seeds(args.seeds, cfg.net.seed),
    )
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_size", "width", "depth", "dropout", "seed", "val_score"])
        for bs, width, depth, p, seed, score in rows:
            w.writerow([bs, width, depth, p, seed, f"{score:.6f}"])
    print(f"wrote {len(rows)} rows to {args.out}")


# -- argument parsing ------------------------------------------------------------------------------


def _add_globals(parser, suppress: bool) -> None:
    # sub-commands accept the global flags too, without clobbering values given earlier
    def d(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--config", default=d(None), help="pipeline configuration file")
    parser.add_argument("--seed", type=int, default=d(None),
                        help="override every seed in the configuration")
    parser.add_argument("--threads", type=int, default=d(1), help="worker threads")
    parser.add_argument("--deterministic", action="store_true", default=d(False),
                        help="single-threaded numerics for bit-reproducible output")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)

    p = argparse.ArgumentParser(prog="fvstack", description=__doc__.splitlines()[0])
    _add_globals(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic descriptor dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--videos", type=int, default=50, help="videos per class")
    s.add_argument("--records", type=int, default=200, help="trajectories per video")
    s.add_argument("--separation", type=float, default=1.0)
    s.add_argument("--layout", choices=("clusters", "xor"), default="clusters")
    s.add_argument("--channels", default="A:8,B:8", help="name:dim list")
    s.add_argument("--geometry-seed", type=int, default=0,
                   help="seed of the class geometry; keep fixed to draw more data of one task")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-unsup", parents=[common], help="fit descriptor PCA and GMMs")
    s.add_argument("--data", required=True, help="descriptor directory")
    s.add_argument("--out", required=True, help="container to write")
    s.set_defaults(func=cmd_fit_unsup)

    s = sub.add_parser("encode", parents=[common], help="cache video representations")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="representation directory")
    s.add_argument("--no-dafs", action="store_true", help="encode the untransformed video only")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("train", parents=[common], help="train the classifier")
    s.add_argument("--model", required=True)
    s.add_argument("--reps", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", help="comma-separated seeds; one container per seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("bag", parents=[common], help="train a bagged ensemble")
    s.add_argument("--model", required=True)
    s.add_argument("--reps", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int)
    s.set_defaults(func=cmd_bag)

    s = sub.add_parser("transfer", parents=[common], help="reuse trained stages on new data")
    s.add_argument("--source", required=True)
    s.add_argument("--data", required=True, help="target descriptor directory")
    s.add_argument("--what", default="", help="subset of gmm,reduction,supervised")
    s.add_argument("--out", required=True)
    s.add_argument("--reps-out", help="also cache the target representations here")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("eval", parents=[common], help="evaluate a trained container")
    s.add_argument("--model", required=True)
    s.add_argument("--reps", required=True)
    s.add_argument("--protocol", choices=("mAcc", "mAP", "mAP+"), default="mAcc")
    s.add_argument("--negative-class", type=int, default=0)
    s.add_argument("--csv", help="write the report as CSV")
    s.add_argument("--plot", help="write precision-recall curves to this image")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="architecture grid search")
    s.add_argument("--model", required=True)
    s.add_argument("--reps", required=True)
    s.add_argument("--val-reps", required=True)
    s.add_argument("--out", required=True, help="CSV file")
    s.add_argument("--seeds")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return ConfigError.exit_code
    if args.deterministic:
        args.threads = 1
    limits = threadpool_limits(args.threads) if args.deterministic or args.threads > 1 else contextlib.nullcontext()
    try:
        with limits:
            args.func(args)
    except FvStackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
