"""Command line entry point: ``ticsnn <subcommand> [--config ...]``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .datasets import read_idx_images, read_idx_labels, to_uint8, write_idx_images, write_idx_labels

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

EXPERIMENTS = ("train", "fisher", "ablate", "robust", "deficit", "prune", "capacity")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="run a single seed instead of config.seeds")
    p.add_argument("--out", help="output directory (default: config.output_dir)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dot-path override, value parsed as JSON; repeatable")


def build_parser():
    parser = _Parser(prog="ticsnn", description="LIF network experiments at toy scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    helps = {
        "train": "train one model per seed",
        "fisher": "track Fisher traces and the information centroid during training",
        "ablate": "ablation grid over one factor",
        "robust": "alpha-target models under corruptions and attacks",
        "deficit": "sliding-window input deficits",
        "prune": "iterative magnitude pruning with reduced retraining timesteps",
        "capacity": "small vs large net accuracy across timesteps",
    }
    for name in EXPERIMENTS:
        _common(sub.add_parser(name, help=helps[name]))

    ds = sub.add_parser("dataset", help="generate or inspect IDX datasets")
    ds_sub = ds.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    ds_sub.required = True
    gen = ds_sub.add_parser("gen", help="render the configured synthetic dataset to IDX files")
    _common(gen)
    insp = ds_sub.add_parser("inspect", help="summarize IDX files or the configured dataset")
    _common(insp)
    insp.add_argument("--images", help="IDX image file")
    insp.add_argument("--labels", help="IDX label file")
    return parser


def _output_dir(cfg, args):
    return Path(args.out) if args.out else Path(cfg.output_dir) / args.command


def _dataset_gen(cfg, out):
    from .experiments import Run, make_dataset

    if cfg.dataset.image_shape[0] != 1:
        raise ValueError("IDX export supports single-channel images only")
    run = Run("dataset-gen", cfg, out)
    for seed in cfg.seeds:
        ds = make_dataset(cfg, seed)
        for split, X, y in (("train", ds.X_train, ds.y_train), ("test", ds.X_test, ds.y_test)):
            images = to_uint8(X, ds.value_range).reshape((len(X),) + tuple(ds.image_shape[-2:]))
            write_idx_images(run.path(f"{split}_seed{seed}-images.idx3-ubyte"), images)
            write_idx_labels(run.path(f"{split}_seed{seed}-labels.idx1-ubyte"), y)
        run.summary[str(seed)] = ds.summary()
    run.finish()


def _dataset_inspect(cfg, args):
    from .experiments import make_dataset

    if args.images or args.labels:
        if not (args.images and args.labels):
            raise UsageError("inspect needs both --images and --labels")
        images, labels = read_idx_images(args.images), read_idx_labels(args.labels)
        values, counts = np.unique(labels, return_counts=True)
        info = {"images": list(images.shape), "labels": int(labels.shape[0]),
                "label_counts": {str(k): int(v) for k, v in zip(values, counts)},
                "pixel_range": [int(images.min(initial=0)), int(images.max(initial=0))]}
    else:
        info = {str(seed): make_dataset(cfg, seed).summary() for seed in cfg.seeds}
    print(json.dumps(info, indent=2, sort_keys=True))


def dispatch(args):
    from . import experiments

    cfg = load_config(args.config, args.override, args.seed, args.out)
    out = _output_dir(cfg, args)
    if args.command == "dataset":
        if args.action == "gen":
            _dataset_gen(cfg, out)
        else:
            _dataset_inspect(cfg, args)
        return
    runner = {
        "train": experiments.run_train,
        "fisher": experiments.run_fisher,
        "ablate": experiments.run_ablation_grid,
        "robust": experiments.run_robust,
        "deficit": experiments.run_deficit,
        "prune": experiments.run_prune,
        "capacity": experiments.run_capacity,
    }[args.command]
    runner(cfg, out=out)
    print(f"wrote {out / 'manifest.json'}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except (ConfigError, UsageError) as exc:
        print(f"ticsnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        logging.getLogger("ticsnn").debug("run failed", exc_info=True)
        print(f"ticsnn: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
