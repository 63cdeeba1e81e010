"""Flat ``key = value`` configuration files.

One file describes a whole experiment: carrier plan, PIM scenario, dataset
sizes, model preset and training hyper-parameters. Lines starting with
``#`` and blank lines are ignored; unknown or repeated keys are errors.

List values are comma separated. Carriers are written as
``center/bandwidth/subcarriers`` triples, e.g.
``carriers = -0.15/0.05/48, 0.10/0.05/48``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from . import models, sim
from .train import ConfigError, TrainConfig


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _carriers(text: str) -> list[sim.Carrier]:
    out = []
    for item in text.split(","):
        parts = item.strip().split("/")
        if len(parts) != 3:
            raise ValueError(f"carrier {item.strip()!r} is not center/bandwidth/subcarriers")
        out.append(sim.Carrier(float(parts[0]), float(parts[1]), int(parts[2])))
    return out


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_or_inf(text: str) -> float:
    return -math.inf if text.strip().lower() in ("-inf", "off", "none") else float(text)


_T = TrainConfig()

# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    # carrier plan
    "carriers": (_carriers, [sim.Carrier(-0.15, 0.05, 48), sim.Carrier(0.10, 0.05, 48)]),
    # scenario
    "tx_antennas": (int, 4),
    "rx_antennas": (int, 2),
    "tap_delays": (_ints, [0, 3, 7]),
    "tap_gains_db": (_floats, [0.0, -6.0, -12.0]),
    "pim_scale": (float, 0.35),
    "noise_floor_db": (_float_or_inf, -40.0),
    "scenario_seed": (int, 1),
    "drift": (str, "none"),
    "drift_period": (float, 8192.0),
    "drift_depth": (float, 0.3),
    "drift_phase_rad": (float, 0.3),
    "drift_offset_rad": (float, 0.0),
    "drift_step_sigma": (float, 1e-3),
    # dataset
    "n_train": (int, 30000),
    "n_test": (int, 30000),
    "seed": (int, 0),
    # model
    "preset": (str, "paper-light"),
    "variant": (str, ""),
    "activation": (str, ""),
    "inner_activation": (str, ""),
    "fc_residual": (str, ""),
    "norm": (str, ""),
    # training
    "lr_min": (float, _T.lr_min),
    "lr_max": (float, _T.lr_max),
    "cycle_period": (int, _T.cycle_period),
    "clip_tau": (float, _T.clip_tau),
    "weight_decay": (float, _T.weight_decay),
    "window_len": (int, _T.window_len),
    "batch_windows": (int, _T.batch_windows),
    "truncate_margin": (int, _T.truncate_margin),
    "steps": (int, _T.steps),
    "train_seed": (int, _T.seed),
    "eval_every": (int, _T.eval_every),
    "val_fraction": (float, 0.1),
    "model_seed": (int, 0),
    # evaluation
    "sweep_unit": (int, 1000),
}


@dataclass
class Config:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def plan(self) -> sim.CarrierPlan:
        plan = sim.CarrierPlan(list(self["carriers"]))
        plan.validate()
        return plan

    def scenario(self) -> sim.PimScenario:
        drift = sim.Drift(self["drift"], self["drift_period"], self["drift_depth"],
                          self["drift_phase_rad"], self["drift_offset_rad"],
                          self["drift_step_sigma"], self["scenario_seed"])
        s = sim.make_scenario(self["tx_antennas"], self["rx_antennas"], self["scenario_seed"],
                              self["tap_delays"], self["tap_gains_db"], self["pim_scale"],
                              self["noise_floor_db"], drift)
        s.validate()
        return s

    def model_spec(self, preset: str | None = None) -> models.ModelSpec:
        """Preset architecture sized to the scenario's antenna counts.

        Empty ``variant``/``activation``/... keys keep the preset's values.
        """
        overrides: dict = {}
        for key in ("variant", "activation", "inner_activation"):
            if self[key]:
                overrides[key] = self[key]
        if self["fc_residual"]:
            try:
                overrides["fc_residual"] = _bool(self["fc_residual"])
            except ValueError as exc:
                raise ConfigError(f"fc_residual: {exc}") from exc
        if self["norm"]:
            overrides["norm"] = {"kind": self["norm"]}
        try:
            return models.preset(preset or self["preset"], self["tx_antennas"], self["rx_antennas"],
                                 **overrides)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(self["lr_min"], self["lr_max"], self["cycle_period"], self["clip_tau"],
                          self["weight_decay"], self["window_len"], self["batch_windows"],
                          self["truncate_margin"], self["steps"], self["train_seed"], self["eval_every"])
        cfg.validate()
        return cfg


def parse(text: str, source: str = "<config>") -> Config:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    if values["drift"] not in ("none", "sinusoidal", "random_walk"):
        raise ConfigError(f"{source}: drift must be none, sinusoidal or random_walk")
    if not 0 <= values["val_fraction"] < 1:
        raise ConfigError(f"{source}: val_fraction must lie in [0, 1)")
    return Config(values)


def load(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text, str(path))


def dump(cfg: Config) -> str:
    """Render every key in schema order (round-trips through :func:`parse`)."""
    lines = []
    for key in SCHEMA:
        v = cfg[key]
        if key == "carriers":
            text = ", ".join(f"{c.center!r}/{c.bandwidth!r}/{c.subcarriers}" for c in v)
        elif isinstance(v, list):
            text = ", ".join(repr(x) for x in v)
        elif isinstance(v, float) and math.isinf(v):
            text = "-inf"
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
