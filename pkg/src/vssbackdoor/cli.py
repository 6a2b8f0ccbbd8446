"""Command line entry point: ``vssbd {poison,train,eval,defend,run,report}``.

Exit codes: 0 success, 2 config error, 3 data-format error, 4 numeric failure.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import errors, harness
from .attacks import TriggerSpec, poison_dataset, select_poison_indices, write_manifest
from .defenses import DefenseSpec, apply_defense
from .errors import (ConfigError, DimensionError, DomainError, FormatError, NumericError, PlanError,
                     VssBackdoorError)
from .metrics import eval_acc, eval_asr
from .seeding import derive_seed
from .training import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4


def _json_arg(text, what):
    """Inline JSON, a path to a JSON file, or a bare kind name."""
    if text is None:
        return None
    if text.isidentifier():
        return text
    try:
        if Path(text).is_file():
            return json.loads(Path(text).read_text(encoding="utf-8"))
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON: {exc}") from exc


def _trigger(args):
    d = _json_arg(args.trigger, "--trigger")
    if d is None:
        return None
    if isinstance(d, str):
        d = {"kind": d}
    if getattr(args, "target", None) is not None:
        d["target"] = args.target
    return TriggerSpec.from_dict(d)


def _defense(args, seed):
    d = _json_arg(args.defense, "--defense")
    if d is None:
        return None
    if isinstance(d, str):
        d = {"kind": d}
    d.setdefault("seed", derive_seed(seed, "defense"))
    return DefenseSpec(**d)


def _config(args):
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "output", None):
        cfg = replace(cfg, output=args.output)
    return cfg


def cmd_poison(args):
    ds = harness.load_dataset_path(args.data, args.split)
    spec = _trigger(args)
    if spec is None:
        raise ConfigError("poison needs --trigger")
    seed = 0 if args.seed is None else args.seed
    plan = select_poison_indices(ds.labels, args.rate, spec.target, derive_seed(seed, "poison"))
    out = poison_dataset(ds.images, ds.labels, spec, plan)
    harness.save_npz_dataset(harness.Dataset(out.images, out.labels, ds.num_classes), args.out)
    manifest = args.manifest or str(Path(args.out).with_suffix(".manifest.jsonl"))
    write_manifest(out.manifest(), manifest)
    print(f"poisoned {plan.indices.size}/{len(ds)} samples -> {args.out} (manifest {manifest})")


def cmd_train(args):
    cfg = _config(args)
    cfg.validate_paths()
    train_ds, test_ds = harness.load_data(cfg.dataset, cfg.seed, cfg.model.num_classes,
                                          cfg.model.image_size, cfg.model.channels)
    model, n_poisoned, _ = harness.fit_repetition(cfg, 0, train_ds, log_path=args.log)
    save_checkpoint(model, args.out, seed=cfg.seed, step=cfg.train.epochs)
    print(json.dumps({"checkpoint": args.out, "n_poisoned": n_poisoned,
                      "acc": eval_acc(model, test_ds.images, test_ds.labels)}))


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = harness.load_dataset_path(args.data, args.split)
    seed = 0 if args.seed is None else args.seed
    defense = _defense(args, seed)
    spec = _trigger(args)
    result = {"acc": eval_acc(model, ds.images, ds.labels, defense)}
    if spec is not None:
        result["asr"] = eval_asr(model, ds.images, ds.labels, spec, defense)
    print(json.dumps(result))


def cmd_defend(args):
    ds = harness.load_dataset_path(args.data, args.split)
    seed = 0 if args.seed is None else args.seed
    defense = _defense(args, seed)
    if defense is None:
        raise ConfigError("defend needs --defense")
    images = apply_defense(ds.images, defense, ids=np.arange(len(ds)))
    harness.save_npz_dataset(harness.Dataset(images, ds.labels, ds.num_classes), args.out)
    print(f"{defense.kind} applied to {len(ds)} images -> {args.out}")


def cmd_run(args):
    cfg = _config(args)
    if args.single_thread:
        harness.set_single_thread()
    report = harness.run_experiment(cfg)
    sys.stdout.write(harness.render_table([report]))
    failed = [r.error for r in report.repetitions if r.error]
    for err in failed:
        print(f"repetition failed: {err}", file=sys.stderr)
    if failed and len(failed) == len(report.repetitions):
        # every repetition failed: report the first failure's class
        cls = getattr(errors, failed[0].split(":", 1)[0], VssBackdoorError)
        return exit_code(cls(failed[0]))
    return EXIT_OK


def cmd_report(args):
    reports = [harness.load_report(p) for p in args.reports]
    text = harness.render_table(reports, args.csv)
    sys.stdout.write(text)


def build_parser():
    p = argparse.ArgumentParser(prog="vssbd", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="single seed for all randomness")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        # accept --seed after the subcommand too
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)

    sp = sub.add_parser("poison", help="dataset + trigger spec -> poisoned dataset + manifest")
    common(sp)
    sp.add_argument("--data", required=True, help="CIFAR-10 binary dir, .bin batch, .npz or image folder")
    sp.add_argument("--split", default="train")
    sp.add_argument("--trigger", required=True, help="kind name, inline JSON or JSON file")
    sp.add_argument("--target", type=int, default=None)
    sp.add_argument("--rate", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest", default=None)
    sp.set_defaults(func=cmd_poison)

    sp = sub.add_parser("train", help="experiment config -> checkpoint + log")
    common(sp)
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="checkpoint + trigger spec -> ACC/ASR")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--trigger", default=None)
    sp.add_argument("--target", type=int, default=None)
    sp.add_argument("--defense", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("defend", help="image set + defense spec -> transformed set")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--defense", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_defend)

    sp = sub.add_parser("run", help="full experiment from a config")
    common(sp)
    sp.add_argument("--config", required=True)
    sp.add_argument("--output", default=None, help="report path (JSON lines)")
    sp.add_argument("--single-thread", action="store_true", help="one torch thread, for byte-stable reports")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("report", help="reports -> CSV summary")
    common(sp)
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--csv", default=None)
    sp.set_defaults(func=cmd_report)
    return p


def exit_code(exc):
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, DimensionError)):
        return EXIT_FORMAT
    if isinstance(exc, (ConfigError, DomainError, PlanError)):
        return EXIT_CONFIG
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or EXIT_OK
    except VssBackdoorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
