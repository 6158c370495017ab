"""Command-line entry point: ``softprune {train,flops,compact,eval,schedule}``.

Experiments are described by an INI file. Every key is listed in ``KEYS``;
anything else is rejected. Example::

    [experiment]
    preset = asrfp
    arch = toy
    out = runs/demo
    seed = 0

    [data]
    source = synthetic

    [train]
    epochs = 30

    [prune]
    rate = 0.5
"""

import argparse
import configparser
import logging
import os
import sys

import numpy as np

from . import graph as G
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_csv, load_idx, synth_blobs
from .errors import ConfigError, InputError, SoftPruneError
from .prune import FILTER, PruneConfig, apply_mask, compact, read_mask, write_mask
from .schedules import (CONSTANT, CONSTANT_ZERO, EXP_APPROACH, EXPONENTIAL, LINEAR, DecaySchedule, RateRamp,
                        write_schedule_csv)
from .trainer import TrainConfig, Trainer, evaluate, write_reports_csv

logger = logging.getLogger("softprune")

PRESETS = {
    "sfp": ((CONSTANT_ZERO,), CONSTANT),
    "asfp": ((CONSTANT_ZERO,), EXP_APPROACH),
    "srfp": ((EXPONENTIAL, LINEAR), CONSTANT),
    "asrfp": ((EXPONENTIAL, LINEAR), EXP_APPROACH),
}


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(t) for t in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(t) for t in s.replace(",", " ").split())


# section -> key -> (parser, default)
KEYS = {
    "experiment": {"preset": (str, "srfp"), "arch": (str, "toy"), "out": (str, "runs/default"), "seed": (int, 0)},
    "data": {
        "source": (str, "synthetic"), "classes": (int, 10), "per_class": (int, 200), "test_per_class": (int, None),
        "channels": (int, 3), "height": (int, 8), "width": (int, 8), "noise_sigma": (float, 0.3),
        "train_images": (str, None), "train_labels": (str, None), "test_images": (str, None),
        "test_labels": (str, None), "train_csv": (str, None), "test_csv": (str, None),
        "standardize": (_bool, False), "hflip": (_bool, False),
    },
    "model": {"toy_channels": (_ints, (4, 8)), "toy_pool": (int, 2)},
    "train": {
        "epochs": (int, 30), "batch_size": (int, 64), "learning_rate": (float, 0.1), "milestones": (_floats, (0.5, 0.75)),
        "lr_decay": (float, 0.1), "momentum": (float, 0.9), "weight_decay": (float, 5e-4),
        "pretrained_mode": (_bool, False), "finetune_epochs": (int, 0), "decay_momentum": (_bool, True),
        "checkpoint_every": (int, 10),
    },
    "prune": {"rate": (float, 0.3), "granularity": (str, FILTER), "norm": (str, "l2")},
    "decay": {"kind": (str, None), "alpha0": (float, 1.0), "epsilon": (float, 1e-5), "floor": (float, 1e-12)},
    "ramp": {"tau": (float, None)},
}


def read_config(path):
    """Parse and validate an experiment file into ``{section: {key: value}}`` with defaults filled in."""
    if not os.path.isfile(path):
        raise InputError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    problems = []
    for section in parser.sections():
        if section not in KEYS:
            problems.append(f"[{section}] (unknown section)")
            continue
        problems += [f"{section}.{k}" for k in parser[section] if k not in KEYS[section]]
    if problems:
        raise ConfigError("unknown config keys: " + ", ".join(problems))
    cfg = {}
    for section, keys in KEYS.items():
        cfg[section] = {}
        for key, (conv, default) in keys.items():
            raw = parser.get(section, key, fallback=None)
            if raw is None or raw.strip() == "":
                cfg[section][key] = default
                continue
            try:
                cfg[section][key] = conv(raw)
            except ValueError as exc:
                problems.append(f"{section}.{key}: {exc}")
    if problems:
        raise ConfigError("invalid config values: " + "; ".join(problems))
    return cfg


def apply_overrides(cfg, args):
    for flag, section, key in (("arch", "experiment", "arch"), ("seed", "experiment", "seed"),
                               ("out", "experiment", "out"), ("rate", "prune", "rate")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


def build_schedules(cfg):
    preset = cfg["experiment"]["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"experiment.preset must be one of {sorted(PRESETS)}, got {preset!r}")
    decay_kinds, ramp_kind = PRESETS[preset]
    d = cfg["decay"]
    kind = d["kind"] or decay_kinds[0]
    if kind not in decay_kinds:
        raise ConfigError(f"decay.kind {kind!r} is not allowed for preset {preset!r} (allowed: {', '.join(decay_kinds)})")
    epochs = cfg["train"]["epochs"]
    try:
        decay = DecaySchedule(kind, d["alpha0"], d["epsilon"], epochs, d["floor"])
        ramp = RateRamp(ramp_kind, cfg["prune"]["rate"], cfg["ramp"]["tau"])
    except InputError as exc:
        raise ConfigError(str(exc)) from None
    return decay, ramp


def build_train_config(cfg):
    decay, ramp = build_schedules(cfg)
    t, p = cfg["train"], cfg["prune"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"], milestones=t["milestones"],
        lr_decay=t["lr_decay"], momentum=t["momentum"], weight_decay=t["weight_decay"], seed=cfg["experiment"]["seed"],
        pretrained_mode=t["pretrained_mode"], prune=PruneConfig(p["rate"], p["granularity"], p["norm"]),
        decay=decay, ramp=ramp, finetune_epochs=t["finetune_epochs"], decay_momentum=t["decay_momentum"],
        hflip=cfg["data"]["hflip"], checkpoint_every=t["checkpoint_every"],
    )


def _require_files(d, keys):
    for key in keys:
        path = d[key]
        if path is None:
            raise ConfigError(f"data.{key} is required for source={d['source']!r}")
        if not os.path.isfile(path):
            raise InputError(f"data.{key}: file not found: {path}")


def load_data(cfg):
    d = cfg["data"]
    source = d["source"]
    if source == "synthetic":
        train, test = synth_blobs(d["classes"], d["per_class"], d["channels"], d["height"], d["width"],
                                  d["noise_sigma"], cfg["experiment"]["seed"], d["test_per_class"])
    elif source == "idx":
        _require_files(d, ("train_images", "train_labels", "test_images", "test_labels"))
        train = load_idx(d["train_images"], d["train_labels"], d["classes"])
        test = load_idx(d["test_images"], d["test_labels"], d["classes"])
    elif source == "csv":
        _require_files(d, ("train_csv", "test_csv"))
        train = load_csv(d["train_csv"], classes=d["classes"])
        test = load_csv(d["test_csv"], classes=d["classes"])
    else:
        raise ConfigError(f"data.source must be synthetic, idx or csv, got {source!r}")
    if d["standardize"]:
        train, mean, std = train.standardized()
        test, _, _ = test.standardized(mean, std)
    return train, test


def build_model(cfg, train):
    arch = cfg["experiment"]["arch"]
    if arch == "toy":
        m = cfg["model"]
        return G.make_toy_cnn(m["toy_channels"], train.classes, train.sample_shape, m["toy_pool"] or None)
    return G.make_arch(arch, train.classes, train.sample_shape)


def cmd_train(args):
    cfg = apply_overrides(read_config(args.config), args)
    config = build_train_config(cfg)
    train, test = load_data(cfg)
    model = build_model(cfg, train).init_params(cfg["experiment"]["seed"])
    out = cfg["experiment"]["out"]
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    write_schedule_csv(os.path.join(out, "schedule.csv"), config.decay, config.ramp)

    trainer = Trainer(model, train, test, config)
    trainer.run_pruning(ckpt_dir)
    write_reports_csv(os.path.join(out, "reports.csv"), trainer.reports)
    trainer.finalize()
    write_mask(os.path.join(out, "mask.txt"), trainer.mask)
    trainer.finetune()
    final = trainer.model
    save_checkpoint(os.path.join(out, "final.ckpt"), final, {"preset": cfg["experiment"]["preset"]})
    acc = evaluate(final, test)
    base = G.count_flops(model).total
    print(f"final test accuracy {acc:.4f}")
    print(f"final FLOPs {G.count_flops(final).total} (baseline {base})")
    print(f"artifacts in {out}")
    return 0


def cmd_flops(args):
    model = G.make_arch(args.arch)
    rate = args.rate or 0.0
    base = G.count_flops(model, 0.0, args.convention, args.widths).total
    report = G.count_flops(model, rate, args.convention, args.widths)
    if args.per_layer:
        for name, flops in report.per_layer.items():
            print(f"{name}\t{flops:.6g}")
    print(f"arch {args.arch} rate {rate:g}")
    print(f"baseline FLOPs {base:.4e}")
    print(f"pruned FLOPs   {report.total:.4e}")
    print(f"pruned {100 * (1 - report.total / base):.2f}%")
    return 0


def cmd_compact(args):
    model = load_checkpoint(args.checkpoint)
    mask = read_mask(args.mask, model)
    apply_mask(model, mask, 0.0)
    small = compact(model, mask)
    save_checkpoint(args.out, small)
    print(f"compacted {model.num_params()} -> {small.num_params()} parameters, wrote {args.out}")
    return 0


def cmd_eval(args):
    cfg = apply_overrides(read_config(args.config), args)
    _, test = load_data(cfg)
    model = load_checkpoint(args.checkpoint)
    if args.mask:
        apply_mask(model, read_mask(args.mask, model), 0.0)
    print(f"accuracy {evaluate(model, test):.6f}")
    return 0


def cmd_schedule(args):
    cfg = apply_overrides(read_config(args.config), args)
    decay, ramp = build_schedules(cfg)
    out = cfg["experiment"]["out"]
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "schedule.csv")
    write_schedule_csv(path, decay, ramp)
    with open(path) as fh:
        sys.stdout.write(fh.read())
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="softprune", description="Soft filter pruning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p, arch=True):
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--rate", type=float)
        if arch:
            p.add_argument("--arch")

    p = sub.add_parser("train", help="run the train/prune pipeline from a config file")
    p.add_argument("--config", required=True)
    overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("flops", help="print FLOPs of an architecture at a pruning rate")
    p.add_argument("--arch", required=True)
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--convention", default=G.RESIDUAL_RESTORES, choices=[G.RESIDUAL_RESTORES, G.OUTPUT_ONLY])
    p.add_argument("--widths", default="nominal", choices=["nominal", "floor"])
    p.add_argument("--per-layer", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("compact", help="zero a mask's filters in a checkpoint and remove them")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compact)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint on the config's dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--mask", help="zero these filters before evaluating")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", help="write schedule.csv (epoch, alpha, rate) for a config")
    p.add_argument("--config", required=True)
    overrides(p, arch=False)
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except SoftPruneError as exc:
        print(f"softprune {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, InputError)) else 1
    except OSError as exc:
        print(f"softprune {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
