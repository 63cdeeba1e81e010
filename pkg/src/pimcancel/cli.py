"""Command-line entry point: ``pimcancel <command> [flags]``.

Commands:
    generate     synthesize train/test PIMS files and manifests from a config
    train        fit a model; writes checkpoint.pimm, model.pimm, metrics.csv
    eval         report.json, overlay.csv and spectrum.csv on the test split
    sweep        depth heatmap over test segments (heatmap.csv, heatmap.svg)
    report       per-channel PIM power before/after cancellation (CSV + SVG)
    param-count  parameter totals of the shipped presets

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import metrics, models, report, sim, train
from .train import ConfigError

log = logging.getLogger("pimcancel")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(RuntimeError):
    pass


def _load_config(args) -> config_mod.Config:
    cfg = config_mod.load(args.config) if args.config else config_mod.parse("")
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg: config_mod.Config, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Real channel arrays ``(x, z)`` for a split, from ``--data`` or the config."""
    if args.data:
        try:
            x, z, _ = sim.load_split(args.data, split)
        except (OSError, ValueError) as exc:
            raise RuntimeFailure(f"cannot load {split} split from {args.data}: {exc}") from exc
    else:
        try:
            plan, scenario = cfg.plan(), cfg.scenario()
        except sim.SimError as exc:
            raise ConfigError(str(exc)) from exc
        x, z = sim.synthesize_split(plan, scenario, cfg["n_train"], cfg["n_test"], cfg["seed"], split)
    return x.to_channels(), z.to_channels()


def _load_model(path):
    try:
        spec, params, _ = models.load_model(path)
    except (OSError, ValueError) as exc:
        raise RuntimeFailure(f"cannot load model {path}: {exc}") from exc
    return spec, params


# --- commands -------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_config(args)
    seed = cfg["seed"] if args.seed is None else args.seed
    try:
        plan, scenario = cfg.plan(), cfg.scenario()
    except sim.SimError as exc:
        raise ConfigError(str(exc)) from exc
    files = sim.make_dataset(plan, scenario, cfg["n_train"], cfg["n_test"], seed, _out(args))
    for split in sim.SPLITS:
        print(files.manifest_path(split))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    spec = cfg.model_spec(args.preset)
    tcfg = cfg.train_config()
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.steps is not None:
        tcfg.steps = args.steps
    tcfg.validate(models.receptive_field(spec))
    x, z = _dataset(args, cfg, "train")
    n_val = int(round(x.shape[-1] * cfg["val_fraction"]))
    n_fit = x.shape[-1] - n_val
    val = (x[:, n_fit:], z[:, n_fit:]) if n_val >= models.receptive_field(spec) + 2 * tcfg.truncate_margin else None
    if val is None:
        n_fit = x.shape[-1]
    out = _out(args)
    ckpt_path, log_path = out / "checkpoint.pimm", out / "metrics.csv"
    if args.resume:
        try:
            ck = train.load_checkpoint(args.resume)
        except (OSError, ValueError) as exc:
            raise RuntimeFailure(f"cannot resume from {args.resume}: {exc}") from exc
        spec, params, state, start, best = ck.spec, ck.params, ck.state, ck.step, ck.best
        tcfg = ck.config if args.steps is None else dataclasses.replace(ck.config, steps=args.steps)
    else:
        seed = cfg["model_seed"] if args.seed is None else args.seed
        params, state, start, best = models.build(spec, seed), None, 0, None
    try:
        res = train.train(spec, params, x[:, :n_fit], z[:, :n_fit], tcfg, val=val, state=state,
                          start_step=start, log_path=log_path, checkpoint_path=ckpt_path, best=best)
    except train.NonFiniteError as exc:
        raise RuntimeFailure(str(exc)) from exc
    models.save_model(out / "model.pimm", spec, res.best_params)
    print(json.dumps({"model": str(out / "model.pimm"), "best_step": res.best_step,
                      "params": models.param_count(spec)}, sort_keys=True))
    return EXIT_OK


def _aligned_test(args, cfg):
    spec, params = _load_model(args.model)
    x, z = _dataset(args, cfg, "test")
    if x.shape[0] != spec.in_channels or z.shape[0] != spec.out_channels:
        raise ConfigError(f"model expects {spec.tx_antennas}x{spec.rx_antennas} antennas, "
                          f"data has {x.shape[0] // 2}x{z.shape[0] // 2}")
    al = metrics.align(params, spec, x, z, cfg["truncate_margin"])
    return spec, x.shape[-1], al


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    spec, _, al = _aligned_test(args, cfg)
    rep = metrics.ape_report(al.z, al.z_hat)
    out = _out(args)
    (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    ch = args.channel or 0
    if not 0 <= ch < al.z.shape[0]:
        raise ConfigError(f"--channel {ch} out of range [0, {al.z.shape[0]})")
    report.overlay_csv(out / "overlay.csv", al.z, al.z_hat, al.first, ch, 1024)
    report.spectrum_csv(out / "spectrum.csv", metrics.spectrum(al.z, al.z_hat, args.channel))
    print(json.dumps({"mean_depth_db": report.fmt(rep.mean_depth_db),
                      "mean_ape_db": report.fmt(rep.mean_ape_db)}, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    unit = cfg["sweep_unit"] if args.unit is None else args.unit
    try:
        starts = metrics.parse_range(args.starts, unit)
        lengths = metrics.parse_range(args.lengths, unit)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _, total, al = _aligned_test(args, cfg)
    if total < max(starts) + min(lengths):
        raise ConfigError(f"test set of {total} samples is shorter than max(start) + min(length)")
    grid = metrics.heatmap_from_aligned(al, total, starts, lengths)
    out = _out(args)
    report.heatmap_csv(out / "heatmap.csv", grid)
    report.heatmap_svg(out / "heatmap.svg", grid)
    print(json.dumps({"cells": grid.n_valid}, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_config(args)
    _, _, al = _aligned_test(args, cfg)
    before = [10 * math.log10(p) for p in np.mean(np.abs(al.z) ** 2, axis=1)]
    resid = np.mean(np.abs(al.z - al.z_hat) ** 2, axis=1)
    after = [10 * math.log10(p) if p > 0 else -math.inf for p in resid]
    rows = [(c, b, a, b - a) for c, (b, a) in enumerate(zip(before, after))]
    out = _out(args)
    report.write_csv(out / "channels.csv", ("channel", "before_db", "after_db", "reduction_db"), rows)
    report.bars_svg(out / "channels.svg", [f"rx{c}" for c in range(len(rows))], before, after)
    for r in rows:
        print(f"rx{r[0]}: reduction {r[3]:.2f} dB")
    return EXIT_OK


def cmd_param_count(args) -> int:
    names = [args.preset] if args.preset else sorted(models.load_presets()["presets"])
    for name in names:
        try:
            spec = models.preset(name, args.tx, args.rx)
        except models.ModelSpecError as exc:
            raise ConfigError(str(exc)) from exc
        count = models.param_count(spec)
        print(count if args.preset else f"{name} {count}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "report": cmd_report, "param-count": cmd_param_count}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pimcancel", description="Neural PIM cancellation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, data=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", default=".", help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory written by 'generate' "
                                          "(default: synthesize from the config)")
        if model:
            p.add_argument("--model", required=True, help="PIMM model or checkpoint file")

    p = sub.add_parser("generate", help="synthesize a dataset")
    common(p, data=False)
    p.add_argument("--seed", type=int, help="dataset seed (overrides config)")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--preset", help="model preset (overrides config)")
    p.add_argument("--seed", type=int, help="training and initialization seed")
    p.add_argument("--steps", type=int, help="total optimizer steps (overrides config)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate on the test split")
    common(p, model=True)
    p.add_argument("--channel", type=int, help="rx channel for overlay/spectrum (default: all)")

    p = sub.add_parser("sweep", help="segment heatmap on the test split")
    common(p, model=True)
    p.add_argument("--starts", required=True, help="a:b:step segment starts, inclusive, in units")
    p.add_argument("--lengths", required=True, help="a:b:step segment lengths, inclusive, in units")
    p.add_argument("--unit", type=int, help="samples per unit (config sweep_unit, default 1000)")

    p = sub.add_parser("report", help="per-channel before/after bars")
    common(p, model=True)

    p = sub.add_parser("param-count", help="preset parameter totals")
    p.add_argument("--preset", help="single preset (prints only the count)")
    p.add_argument("--tx", type=int, default=32, help="transmit antennas (default 32)")
    p.add_argument("--rx", type=int, default=16, help="receive antennas (default 16)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, metrics.MetricError, ArithmeticError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
