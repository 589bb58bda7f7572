"""``digitlab`` command line: train, evaluate, generate, gradient-check.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
Option precedence: command-line flags, then ``--config`` JSON, then defaults.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import persistence
from .data import load_corpus, prepare
from .errors import DigitlabError
from .models import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator, build_recognizer
from .optim import Adam, RMSprop
from .tensor import Rng

USAGE_ERROR = 1
RUNTIME_ERROR = 2

RECOGNIZER_DEFAULTS = {
    "steps": 19550, "lr": 0.001, "batch_size": 64, "seed": 0, "out": "runs/recognizer",
    "eval_interval": 500, "checkpoint_every": 0, "val_size": 10000,
    "limit_train": None, "limit_val": None, "resume": None,
}
SGAN_DEFAULTS = {
    "steps": 300000, "lr": 0.002, "batch_size": 64, "seed": 0, "out": "runs/sgan",
    "latent_dim": 100, "labeled_fraction": 1.0, "sample_every": 100000, "sample_count": 16,
    "sample_columns": 4, "checkpoint_every": 0, "limit_train": None, "resume": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parser():
    p = _Parser(prog="digitlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    r = sub.add_parser("train-recognizer", help="train the six-block recognizer with RMSprop")
    r.add_argument("--data-dir", required=True)
    r.add_argument("--config", help="JSON file of option defaults")
    r.add_argument("--steps", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--eval-interval", type=int)
    r.add_argument("--checkpoint-every", type=int)
    r.add_argument("--val-size", type=int)
    r.add_argument("--limit-train", type=int, help="use only the first N training samples")
    r.add_argument("--limit-val", type=int, help="use only the first N validation samples")
    r.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("train-sgan", help="train the SGAN generator/discriminator with Adam")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--config", help="JSON file of option defaults")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--latent-dim", type=int)
    s.add_argument("--labeled-fraction", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--sample-every", type=int)
    s.add_argument("--sample-count", type=int)
    s.add_argument("--sample-columns", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--limit-train", type=int)
    s.add_argument("--resume")

    e = sub.add_parser("eval", help="loss and accuracy of a recognizer checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--split", default="test", choices=("train", "validation", "test"))
    e.add_argument("--limit", type=int)

    g = sub.add_parser("generate", help="write a PGM grid of generator samples")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--columns", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="grid.pgm")

    c = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--shapes", type=int, default=5)
    return p


def _resolve(args, defaults):
    """Merge flags over the optional JSON config over ``defaults``."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config) as f:
            extra = json.load(f)
        unknown = sorted(set(extra) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys {unknown} in {args.config}")
        merged.update(extra)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _log(message):
    print(message, flush=True)


def _limit(dataset, n):
    return dataset if n is None else dataset.subset(np.arange(min(n, len(dataset))))


def cmd_train_recognizer(args):
    from .training import TrainConfig, evaluate, train_recognizer

    opts = _resolve(args, RECOGNIZER_DEFAULTS)
    splits = load_corpus(args.data_dir, opts["val_size"])
    train = prepare(_limit(splits["train"], opts["limit_train"]), "unit")
    val = splits.get("validation")
    val = prepare(_limit(val, opts["limit_val"]), "unit") if val is not None and len(val) else None
    config = TrainConfig(steps=opts["steps"], batch_size=opts["batch_size"], lr=opts["lr"], seed=opts["seed"],
                         eval_interval=opts["eval_interval"], out_dir=opts["out"],
                         checkpoint_every=opts["checkpoint_every"])
    model = build_recognizer(Rng(config.seed).child(1))
    optimizer = RMSprop(model.parameters(), lr=config.lr)
    start = 0
    if opts["resume"]:
        start = int(persistence.load_checkpoint(opts["resume"], model, optimizer).get("step", 0))
        _log(f"resumed from {opts['resume']} at step {start}")
    model, metrics = train_recognizer(config, train, val, model, optimizer, start, log=_log)
    persistence.write_metrics_csv(metrics, os.path.join(config.out_dir, "metrics.csv"))
    results = {"final_step": config.steps, "best_validation_accuracy": metrics.best["accuracy"],
               "best_validation_step": metrics.best["step"]}
    if "test" in splits:
        loss, acc = evaluate(model, prepare(splits["test"], "unit"))
        results.update(test_loss=loss, test_accuracy=acc)
        _log(f"test loss {loss:.4f} accuracy {acc:.4f}")
    persistence.write_run_manifest(config.out_dir, "train-recognizer", {**opts, "data_dir": args.data_dir}, results)
    return 0


def cmd_train_sgan(args):
    from .training import TrainConfig, build_sgan, train_sgan

    opts = _resolve(args, SGAN_DEFAULTS)
    splits = load_corpus(args.data_dir, val_size=0)
    data = prepare(_limit(splits["train"], opts["limit_train"]), "symmetric")
    config = TrainConfig(steps=opts["steps"], batch_size=opts["batch_size"], lr=opts["lr"], seed=opts["seed"],
                         labeled_fraction=opts["labeled_fraction"], out_dir=opts["out"],
                         checkpoint_every=opts["checkpoint_every"], latent_dim=opts["latent_dim"],
                         sample_every=opts["sample_every"], sample_count=opts["sample_count"],
                         sample_columns=opts["sample_columns"])
    models = build_sgan(config.seed, config.latent_dim, config.lr)
    start = 0
    if opts["resume"]:
        g, d, og, od = models
        meta = persistence.load_checkpoint(opts["resume"], {"generator": g, "discriminator": d},
                                           {"generator": og, "discriminator": od})
        start = int(meta.get("step", 0))
        _log(f"resumed from {opts['resume']} at step {start}")
    _, _, metrics = train_sgan(config, data, models, start, log=_log)
    persistence.write_metrics_csv(metrics, os.path.join(config.out_dir, "metrics.csv"))
    last = metrics.rows[-1] if metrics.rows else {}
    results = {"final_step": config.steps, "grids": [p for _, p in metrics.grids],
               **{k: last[k] for k in ("d_loss", "d_accuracy", "g_loss") if k in last}}
    persistence.write_run_manifest(config.out_dir, "train-sgan", {**opts, "data_dir": args.data_dir}, results)
    return 0


def cmd_eval(args):
    from .training import evaluate

    model = build_recognizer(Rng(0).child(1))
    persistence.load_checkpoint(args.checkpoint, model)
    splits = load_corpus(args.data_dir)
    if args.split not in splits:
        raise FileNotFoundError(f"no {args.split} split in {args.data_dir}")
    loss, acc = evaluate(model, prepare(_limit(splits[args.split], args.limit), "unit"))
    print(json.dumps({"split": args.split, "loss": loss, "accuracy": acc}))
    return 0


def _load_generator(path):
    entries = persistence.read_checkpoint(path)
    prefix = "generator/" if "generator/project.weight" in entries else ""
    key = prefix + "project.weight"
    if key not in entries:
        raise DigitlabError(f"{path}: no generator weights (expected {key!r})")
    generator = build_generator(Rng(0), GeneratorSpec(latent_dim=entries[key].shape[0]))
    if prefix:
        # SGAN archives also hold the discriminator; load both to validate the file
        disc = build_discriminator(Rng(0), DiscriminatorSpec())
        persistence.load_checkpoint(path, {"generator": generator, "discriminator": disc})
    else:
        persistence.load_checkpoint(path, generator)
    return generator


def cmd_generate(args):
    from .training import generate

    if args.count < 1 or args.columns < 1:
        raise UsageError("--count and --columns must be >= 1")
    generator = _load_generator(args.checkpoint)
    latent = generator.layers["project"].params["weight"].shape[0]
    images = generate(generator, Rng(args.seed).normal((args.count, latent)))
    persistence.write_image_grid(images, args.columns, args.out)
    print(args.out)
    return 0


def cmd_grad_check(args):
    from .gradsuite import TOLERANCE, run_suite

    failed = 0
    for r in run_suite(args.seed, args.shapes):
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:<4} {r.name:<38} max rel err {r.worst:.3e} ({r.seconds:.2f}s)")
    print(f"{'all passed' if not failed else f'{failed} case(s) failed'} (tolerance {TOLERANCE:g})")
    return 0 if not failed else RUNTIME_ERROR


COMMANDS = {
    "train-recognizer": cmd_train_recognizer,
    "train-sgan": cmd_train_sgan,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "grad-check": cmd_grad_check,
}


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:
        # --help
        return exc.code or 0
    except (DigitlabError, OSError, ValueError, FloatingPointError) as err:
        print(f"digitlab: error: {err}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
