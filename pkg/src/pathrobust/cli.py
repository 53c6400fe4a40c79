"""Command-line frontend for reproducible generation, training, evaluation,
and reporting runs.

Every run is driven by one --seed flowing through named substreams (data,
init, train, attack), and every emitted artifact embeds the seed and the
resolved configuration, so re-running a command with identical arguments
reproduces byte-identical outputs.

Options may also come from a flat key-value config file (``--config``);
explicit flags win. Transform parameter boxes are overridable with config
keys of the form ``box.<kind>.<param>.lo`` / ``.hi``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, batch_attack
from .data import generate_synthetic, read_dataset, write_dataset
from .metrics import (
    build_report,
    canonical_json,
    emit_report,
    load_report,
    report_to_dict,
    summary_table,
)
from .models import (
    SmallCNN,
    SubprocessClassifier,
    load_weights,
    save_weights,
    serve_stdio,
)
from .seeding import fnv1a64
from .training import ATFConfig, TrainConfig, train_atf, train_standard
from .transforms import TRANSFORM_KINDS, make_transform


class UsageError(Exception):
    """Invalid arguments or configuration; maps to exit code 2."""


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(raw: str, like_type) -> object:
    if like_type is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean from {raw!r}")
    try:
        return like_type(raw)
    except ValueError as e:
        raise UsageError(f"cannot parse {raw!r} as {like_type.__name__}") from e


def resolve_option(args, config: dict[str, str], name: str, typ, default):
    """Flag value if given, else config-file value, else default."""
    cli_val = getattr(args, name.replace("-", "_"))
    if cli_val is not None:
        return cli_val
    if name in config:
        return _coerce(config[name], typ)
    return default


def box_overrides_from_config(config: dict[str, str]) -> dict[str, dict[str, dict[str, float]]]:
    """Collect box.<kind>.<param>.<lo|hi> keys into per-kind override maps."""
    boxes: dict[str, dict[str, dict[str, float]]] = {}
    for key, raw in config.items():
        if not key.startswith("box."):
            continue
        parts = key.split(".")
        if len(parts) != 4 or parts[3] not in ("lo", "hi"):
            raise UsageError(f"bad box override key {key!r}; expected box.<kind>.<param>.<lo|hi>")
        _, kind, param, side = parts
        if kind not in TRANSFORM_KINDS:
            raise UsageError(f"box override for unknown transform {kind!r}")
        boxes.setdefault(kind, {}).setdefault(param, {})[side] = float(_coerce(raw, float))
    return boxes


def _transform_with_overrides(kind: str, boxes) -> "object":
    overrides = None
    if kind in boxes:
        overrides = {}
        base = make_transform(kind)
        spec_by_name = {s.name: s for s in base.specs}
        for param, sides in boxes[kind].items():
            if param not in spec_by_name:
                raise UsageError(f"transform {kind!r} has no parameter {param!r}")
            s = spec_by_name[param]
            lo = sides.get("lo", float(s.lo.reshape(-1)[0]))
            hi = sides.get("hi", float(s.hi.reshape(-1)[0]))
            overrides[param] = (lo, hi)
    try:
        return make_transform(kind, box_overrides=overrides)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _parse_transform_list(raw: str) -> list[str]:
    kinds = [k.strip() for k in raw.split(",") if k.strip()]
    if not kinds:
        raise UsageError("empty transform list")
    for k in kinds:
        if k not in TRANSFORM_KINDS:
            raise UsageError(f"unknown transform {k!r}; choose from {', '.join(TRANSFORM_KINDS)}")
    return kinds


# -- subcommands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    config = parse_config_file(args.config) if args.config else {}
    n = resolve_option(args, config, "n", int, 100)
    seed = resolve_option(args, config, "seed", int, 0)
    balance = resolve_option(args, config, "balance", float, 0.5)
    out = resolve_option(args, config, "out", str, None)
    if out is None:
        raise UsageError("--out is required")
    if n < 2:
        raise UsageError("--n must be at least 2")
    if not (0.0 < balance < 1.0):
        raise UsageError("--balance must be strictly between 0 and 1")
    ds = generate_synthetic(n, seed=seed, balance=balance)
    write_dataset(ds, out)
    print(f"wrote {n} patches to {out} (class 1: {ds.manifest['counts']['1']})")
    return 0


def _write_history(path, cfg_dict: dict, seed: int, hist, digest: str) -> None:
    payload = {
        "config": cfg_dict,
        "seed": seed,
        "model_digest": digest,
        "passes": hist.passes,
        "loss_per_pass": hist.loss_per_pass,
        "epoch_train_accuracy": hist.epoch_train_accuracy,
        "final_theta": hist.final_theta,
    }
    Path(path).write_text(canonical_json(payload), encoding="utf-8")


def cmd_train(args) -> int:
    config = parse_config_file(args.config) if args.config else {}
    data_dir = resolve_option(args, config, "data", str, None)
    out = resolve_option(args, config, "out", str, None)
    if data_dir is None or out is None:
        raise UsageError("--data and --out are required")
    passes = resolve_option(args, config, "passes", int, 2000)
    batch_size = resolve_option(args, config, "batch-size", int, 32)
    lr = resolve_option(args, config, "lr", float, 0.05)
    seed = resolve_option(args, config, "seed", int, 0)
    history = resolve_option(args, config, "history", str, out + ".history.json")
    if passes < 1:
        raise UsageError("--passes must be >= 1")
    ds = read_dataset(data_dir)
    model = SmallCNN.init(classes=2, seed=seed)
    cfg = TrainConfig(total_passes=passes, batch_size=batch_size, lr=lr, seed=seed)
    weights, hist = train_standard(model, ds, cfg)
    save_weights(weights, out)
    cfg_echo = {"data": data_dir, "out": out, "passes": passes, "batch_size": batch_size, "lr": lr}
    _write_history(history, cfg_echo, seed, hist, weights.hexdigest())
    print(f"trained {passes} passes; final loss {hist.loss_per_pass[-1]:.4f}; weights -> {out}")
    return 0


def cmd_train_atf(args) -> int:
    config = parse_config_file(args.config) if args.config else {}
    data_dir = resolve_option(args, config, "data", str, None)
    out = resolve_option(args, config, "out", str, None)
    if data_dir is None or out is None:
        raise UsageError("--data and --out are required")
    passes = resolve_option(args, config, "passes", int, 2000)
    batch_size = resolve_option(args, config, "batch-size", int, 32)
    lr = resolve_option(args, config, "lr", float, 0.05)
    seed = resolve_option(args, config, "seed", int, 0)
    m = resolve_option(args, config, "m", int, 4)
    ascent_frac = resolve_option(args, config, "ascent-frac", float, 0.05)
    raw_transforms = resolve_option(args, config, "transforms", str, "stain")
    history = resolve_option(args, config, "history", str, out + ".history.json")
    kinds = _parse_transform_list(raw_transforms)
    boxes = box_overrides_from_config(config)
    descriptors = [_transform_with_overrides(k, boxes) for k in kinds]
    for d in descriptors:
        if not d.differentiable:
            raise UsageError(f"transform {d.kind!r} is not differentiable; adversarial training needs gradients")
    ds = read_dataset(data_dir)
    model = SmallCNN.init(classes=2, seed=seed)
    cfg = ATFConfig(
        total_passes=passes, batch_size=batch_size, lr=lr, seed=seed,
        m=m, ascent_frac=ascent_frac, transforms=descriptors,
    )
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    weights, hist = train_atf(model, ds, cfg)
    save_weights(weights, out)
    cfg_echo = {
        "data": data_dir, "out": out, "passes": passes, "batch_size": batch_size,
        "lr": lr, "m": m, "ascent_frac": ascent_frac, "transforms": kinds,
    }
    _write_history(history, cfg_echo, seed, hist, weights.hexdigest())
    print(f"robust-trained {passes} passes over {'+'.join(kinds)}; weights -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    config = parse_config_file(args.config) if args.config else {}
    data_dir = resolve_option(args, config, "data", str, None)
    out = resolve_option(args, config, "out", str, None)
    if data_dir is None or out is None:
        raise UsageError("--data and --out are required")
    model_path = resolve_option(args, config, "model", str, None)
    blackbox_cmd = resolve_option(args, config, "blackbox-cmd", str, None)
    optimizer = resolve_option(args, config, "optimizer", str, "pgd")
    raw_transforms = resolve_option(args, config, "transforms", str, ",".join(TRANSFORM_KINDS))
    steps = resolve_option(args, config, "steps", int, 40)
    step_frac = resolve_option(args, config, "step-frac", float, 0.05)
    loss = resolve_option(args, config, "loss", str, "cross_entropy")
    population = resolve_option(args, config, "population", int, 16)
    mutation_frac = resolve_option(args, config, "mutation-frac", float, 0.1)
    restarts = resolve_option(args, config, "restarts", int, 1)
    early_stop = resolve_option(args, config, "early-stop", bool, False)
    seed = resolve_option(args, config, "seed", int, 0)
    jobs = resolve_option(args, config, "jobs", int, 1)
    timeout = resolve_option(args, config, "timeout", float, 30.0)
    save_pairs = resolve_option(args, config, "save-pairs", bool, False)

    if optimizer not in ("pgd", "stochastic"):
        raise UsageError("--optimizer must be pgd or stochastic")
    if loss not in ("cross_entropy", "margin"):
        raise UsageError("--loss must be cross_entropy or margin")
    if (model_path is None) == (blackbox_cmd is None):
        raise UsageError("provide exactly one of --model or --blackbox-cmd")
    if blackbox_cmd is not None and optimizer == "pgd":
        raise UsageError("pgd needs gradient access; use --optimizer stochastic with --blackbox-cmd")

    kinds = _parse_transform_list(raw_transforms)
    boxes = box_overrides_from_config(config)
    descriptors = [_transform_with_overrides(k, boxes) for k in kinds]
    if optimizer == "pgd":
        for d in descriptors:
            if not d.differentiable:
                raise UsageError(
                    f"transform {d.kind!r} is not differentiable; evaluate it with --optimizer stochastic"
                )

    ds = read_dataset(data_dir)
    if not len(ds):
        raise UsageError("dataset is empty")

    if blackbox_cmd is not None:
        model = SubprocessClassifier(blackbox_cmd, timeout=timeout)
        digest = f"{fnv1a64(blackbox_cmd.encode('utf-8')):016x}"
    else:
        weights = load_weights(model_path)
        model = SmallCNN(weights)
        digest = weights.hexdigest()

    cfg = AttackConfig(
        steps=steps, step_frac=step_frac, loss=loss, early_stop_on_flip=early_stop,
        population=population, mutation_frac=mutation_frac, restarts=restarts, seed=seed,
    )
    cli_echo = {
        "data": data_dir, "model": model_path, "blackbox_cmd": blackbox_cmd,
        "optimizer": optimizer, "transforms": kinds, "jobs": jobs,
        "box_overrides": boxes,
    }
    runs, pairs = [], []
    try:
        for desc in descriptors:
            results = batch_attack(
                model, ds.items(), desc, cfg, optimizer=optimizer,
                ids=[int(i) for i in ds.ids], jobs=jobs,
            )
            run = build_report(
                desc.kind, optimizer, {"attack": cfg.__dict__.copy(), "cli": cli_echo},
                results, ds.labels, ids=[int(i) for i in ds.ids],
            )
            runs.append(run)
            if save_pairs:
                label = f"{desc.kind}_{optimizer}"
                for pos, r in enumerate(results):
                    if r.fooled:
                        adv = desc.apply_np(ds.images[pos], r.theta_best)
                        pairs.append((label, int(ds.ids[pos]), ds.images[pos], adv))
    finally:
        if blackbox_cmd is not None:
            model.close()
    path = emit_report(runs, out, seed=seed, model_digest=digest, pairs=pairs if save_pairs else None)
    print(summary_table([report_to_dict(runs, seed, digest)]))
    print(f"report -> {path}")
    return 0


def cmd_report(args) -> int:
    if not args.inputs:
        raise UsageError("report needs at least one report.json path")
    payloads = []
    for p in args.inputs:
        try:
            payloads.append(load_report(p))
        except (OSError, ValueError) as e:
            raise UsageError(f"cannot read report {p}: {e}") from e
    print(summary_table(payloads))
    if args.out:
        merged = {
            "runs": [run for payload in payloads for run in payload.get("runs", [])],
            "sources": [str(p) for p in args.inputs],
        }
        Path(args.out).write_text(canonical_json(merged), encoding="utf-8")
        print(f"merged -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    model = SmallCNN(load_weights(args.model))
    serve_stdio(model)
    return 0


# -- argument plumbing ------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags win", default=None)
    p.add_argument("--seed", type=int, default=None, help="base seed for all substreams")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pathrobust",
        description="Robustness evaluation and hardening of stained-patch classifiers",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic stained-patch dataset")
    _add_common(p)
    p.add_argument("--out", default=None, help="output dataset directory")
    p.add_argument("--n", type=int, default=None, help="number of patches")
    p.add_argument("--balance", type=float, default=None, help="fraction of class 1")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="standard SGD training of the built-in CNN")
    _add_common(p)
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--out", default=None, help="weights file to write")
    p.add_argument("--passes", type=int, default=None, help="total forward/backward passes")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--history", default=None, help="history JSON path (default <out>.history.json)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-atf", help="adversarial training for free over selected transforms")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--passes", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--m", type=int, default=None, help="replays per minibatch")
    p.add_argument("--ascent-frac", type=float, default=None, help="transform step as fraction of box width")
    p.add_argument("--transforms", default=None, help="comma-separated transform kinds")
    p.add_argument("--history", default=None)
    p.set_defaults(fn=cmd_train_atf)

    p = sub.add_parser("evaluate", help="attack a model across transforms and write report.json")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None, help="weights file of the built-in CNN")
    p.add_argument("--blackbox-cmd", default=None, help="command for an external wire-protocol classifier")
    p.add_argument("--transforms", default=None, help="comma-separated transform kinds (default: all)")
    p.add_argument("--optimizer", default=None, choices=("pgd", "stochastic"))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--step-frac", type=float, default=None)
    p.add_argument("--loss", default=None, choices=("cross_entropy", "margin"))
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--mutation-frac", type=float, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--early-stop", action="store_const", const=True, default=None,
                   help="stop a sample's attack at the first label flip")
    p.add_argument("--jobs", type=int, default=None, help="parallel per-sample attacks")
    p.add_argument("--timeout", type=float, default=None, help="black-box response timeout (s)")
    p.add_argument("--save-pairs", action="store_const", const=True, default=None,
                   help="write clean/adversarial PNG pairs for fooled samples")
    p.add_argument("--out", default=None, help="report output directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="merge report.json files into a summary table")
    p.add_argument("inputs", nargs="*", help="report.json paths")
    p.add_argument("--out", default=None, help="write merged runs as canonical JSON")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("serve", help="serve the built-in CNN over the stdio wire protocol")
    p.add_argument("--model", required=True, help="weights file")
    p.set_defaults(fn=cmd_serve)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        print(f"run 'pathrobust {args.command} --help' for usage", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 1
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
