"""Training recipe: truncated MSE, AdamW, triangular CLR, global-norm clipping."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor

log = logging.getLogger(__name__)

FFT_LEN = 1024
LOG_COLUMNS = ("step", "lr", "loss", "grad_norm", "clip_scale", "eval_depth_db")
OPT_MAGIC = b"OPTS"
OPT_VERSION = 1


class ConfigError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    lr_min: float = 1e-4
    lr_max: float = 2e-3
    cycle_period: int = 2000
    clip_tau: float = 1.0
    weight_decay: float = 0.01
    window_len: int = 2048
    batch_windows: int = 4
    truncate_margin: int = 16
    steps: int = 10000
    seed: int = 0
    eval_every: int = 500

    def validate(self, receptive_field: int | None = None) -> None:
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.cycle_period < 2 or self.cycle_period % 2:
            raise ConfigError(f"cycle_period must be even and >= 2, got {self.cycle_period}")
        if self.clip_tau <= 0:
            raise ConfigError("clip_tau must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_windows < 1 or self.window_len < 1:
            raise ConfigError("batch_windows and window_len must be positive")
        if self.batch_windows * self.window_len <= FFT_LEN:
            raise ConfigError(f"batch_windows * window_len = {self.batch_windows * self.window_len} "
                              f"must exceed the FFT length {FFT_LEN}")
        if self.steps < 0 or self.eval_every < 1:
            raise ConfigError("steps must be >= 0 and eval_every >= 1")
        if receptive_field is not None:
            if 2 * self.truncate_margin < receptive_field - 1:
                raise ConfigError(f"truncate_margin {self.truncate_margin} < (rf - 1)/2 = "
                                  f"{(receptive_field - 1) / 2:g}")
            out_len = self.window_len - receptive_field + 1
            if out_len <= 2 * self.truncate_margin:
                raise ConfigError(f"window_len {self.window_len} leaves {out_len} output samples, "
                                  f"not more than 2 * truncate_margin")


@dataclass
class OptimizerState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls(OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()),
                   OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()), 0)


def clr_lr(step: int, cfg: TrainConfig) -> float:
    """Triangular cyclical learning rate; trough at step 0, peak at half period."""
    p = (step % cfg.cycle_period) / cfg.cycle_period
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 - abs(2.0 * p - 1.0))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1))) for g in grads))


def clip_gradients(grads: "OrderedDict[str, np.ndarray]", tau: float):
    """Rescale all gradients by ``tau/||g||`` when the global norm exceeds ``tau``.

    Returns ``(clipped, scale, norm_before)``; the input mapping is untouched.
    """
    norm = global_norm(grads.values())
    scale = tau / norm if norm > tau else 1.0
    if scale == 1.0:
        return OrderedDict(grads), 1.0, norm
    return OrderedDict((k, g * scale) for k, g in grads.items()), scale, norm


def adam_step(params, grads, state: OptimizerState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0, context: str = "") -> None:
    """One AdamW update in place; decay acts on the parameters, not on ``g``.

    Raises:
        NonFiniteError: some gradient holds NaN/Inf; nothing is updated.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name!r}{' ' + context if context else ''}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= lr * update


def truncated_mse(z_hat: Tensor, z, margin: int) -> Tensor:
    """Mean squared error over output samples ``[M, L - M)``."""
    z_hat = ad.as_tensor(z_hat)
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ad.ShapeError(f"truncated_mse: prediction {list(z_hat.shape)} vs target {list(z.shape)}")
    n = z_hat.shape[-1]
    if n <= 2 * margin:
        raise ValueError(f"truncated_mse: length {n} must exceed 2 * margin = {2 * margin}")
    core = ad.crop(z_hat, margin, n - margin)
    diff = ad.sub(core, Tensor._wrap(z[..., margin:n - margin], False))
    return ad.mean(ad.square(diff))


def _depth_db(z: np.ndarray, z_hat: np.ndarray) -> float:
    pz = np.mean(z ** 2)
    pr = np.mean((z - z_hat) ** 2)
    return float(10 * np.log10(pz / pr)) if pr > 0 else math.inf


def evaluate(params, spec, x: np.ndarray, z: np.ndarray, margin: int) -> tuple[float, float]:
    """(truncated MSE, mean depth dB over rx channels) on a full sequence."""
    pred = models.predict(params, spec, x)
    off = models.alignment_offset(spec)
    target = z[:, off:off + pred.shape[-1]]
    pred, target = pred[:, margin:pred.shape[-1] - margin], target[:, margin:target.shape[-1] - margin]
    mse = float(np.mean((pred - target) ** 2))
    depths = [_depth_db(target[c:c + 2], pred[c:c + 2]) for c in range(0, target.shape[0], 2)]
    return mse, float(np.mean(depths))


def _window_starts(step: int, cfg: TrainConfig, n: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, step])
    return rng.integers(0, n - cfg.window_len + 1, size=cfg.batch_windows)


def make_batch(x: np.ndarray, z: np.ndarray, starts, window_len: int, spec) -> tuple[np.ndarray, np.ndarray]:
    rf = models.receptive_field(spec)
    off = models.alignment_offset(spec)
    out_len = window_len - rf + 1
    xb = np.stack([x[:, s:s + window_len] for s in starts])
    zb = np.stack([z[:, s + off:s + off + out_len] for s in starts])
    return xb, zb


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class TrainResult:
    params: "OrderedDict[str, Tensor]"
    best_params: "OrderedDict[str, Tensor]"
    state: OptimizerState
    log: list[dict]
    best_step: int
    best_val: float


def _snapshot(params) -> "OrderedDict[str, Tensor]":
    return OrderedDict((k, Tensor(v.data, requires_grad=True, name=k)) for k, v in params.items())


def train(spec, params, x: np.ndarray, z: np.ndarray, cfg: TrainConfig,
          val: tuple[np.ndarray, np.ndarray] | None = None, state: OptimizerState | None = None,
          start_step: int = 0, stop_step: int | None = None, log_path=None, checkpoint_path=None,
          best: tuple | None = None) -> TrainResult:
    """Run the seeded training loop.

    Args:
        spec, params: model description and its (mutated in place) parameters.
        x, z: real channel arrays ``[2*tx, N]`` and ``[2*rx, N]``.
        cfg: hyper-parameters; validated against the model receptive field.
        val: optional held-out ``(x, z)`` used every ``eval_every`` steps for
            depth logging and best-checkpoint selection.
        state, start_step: resume point (from :func:`load_checkpoint`).
        stop_step: end of this call (defaults to ``cfg.steps``).
        log_path: metrics CSV; appended to when resuming.
        checkpoint_path: PIMM file rewritten at every evaluation step.
        best: ``(best_step, best_val, best_params)`` carried across resumes.

    Raises:
        NonFiniteError: loss or gradient became non-finite. The last
            checkpoint on disk is left untouched.
    """
    rf = models.receptive_field(spec)
    cfg.validate(rf)
    n = x.shape[-1]
    if n < cfg.window_len:
        raise ConfigError(f"training signal ({n} samples) shorter than window_len {cfg.window_len}")
    if z.shape[-1] != n:
        raise ConfigError("x and z must have the same length")
    state = state or OptimizerState.for_params(params)
    stop = cfg.steps if stop_step is None else stop_step
    best_step, best_val, best_params = best if best else (-1, math.inf, _snapshot(params))
    rows: list[dict] = []

    writer = None
    fh = None
    if log_path is not None:
        fresh = start_step == 0 or not Path(log_path).exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_COLUMNS)
    try:
        for step in range(start_step, stop):
            lr = clr_lr(step, cfg)
            xb, zb = make_batch(x, z, _window_starts(step, cfg, n), cfg.window_len, spec)
            for p in params.values():
                p.zero_grad()
            loss = truncated_mse(models.forward(params, spec, xb), zb, cfg.truncate_margin)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NonFiniteError(f"non-finite loss at step {step}")
            ad.backward(loss)
            grads = OrderedDict((k, p.grad) for k, p in params.items())
            clipped, scale, norm = clip_gradients(grads, cfg.clip_tau)
            adam_step(params, clipped, state, lr, weight_decay=cfg.weight_decay, context=f"at step {step}")

            depth = None
            done = step + 1
            if val is not None and (done % cfg.eval_every == 0 or done == stop):
                vmse, depth = evaluate(params, spec, val[0], val[1], cfg.truncate_margin)
                if vmse < best_val:
                    best_step, best_val, best_params = done, vmse, _snapshot(params)
            row = {"step": step, "lr": lr, "loss": loss_val, "grad_norm": norm,
                   "clip_scale": scale, "eval_depth_db": depth}
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            if checkpoint_path is not None and (done % cfg.eval_every == 0 or done == stop):
                save_checkpoint(checkpoint_path, spec, params, state, cfg, done,
                                (best_step, best_val, best_params))
            if done % cfg.eval_every == 0:
                log.info("step %d lr %.3g loss %.4g depth %s", done, lr, loss_val,
                         "-" if depth is None else f"{depth:.2f} dB")
    finally:
        if fh is not None:
            fh.close()
    if val is None:
        best_params, best_step = _snapshot(params), stop
    return TrainResult(params, best_params, state, rows, best_step, best_val)


# --- checkpoint appendix ---------------------------------------------------------

def save_checkpoint(path, spec, params, state: OptimizerState, cfg: TrainConfig, step: int,
                    best: tuple) -> None:
    """PIMM model file followed by the optimiser-state appendix."""
    best_step, best_val, best_params = best
    meta = {"step": step, "adam_t": state.t, "config": asdict(cfg),
            "best_step": best_step, "best_val": None if math.isinf(best_val) else best_val}
    mtext = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(OPT_MAGIC)
    buf.write(struct.pack("<II", OPT_VERSION, len(mtext)))
    buf.write(mtext)
    tensors = OrderedDict()
    for k in params:
        tensors[f"m/{k}"] = state.m[k]
        tensors[f"v/{k}"] = state.v[k]
    for k, p in best_params.items():
        tensors[f"best/{k}"] = p.data
    models.write_tensors(buf, tensors)
    tmp = Path(str(path) + ".tmp")
    models.save_model(tmp, spec, params, appendix=buf.getvalue())
    tmp.replace(path)


@dataclass
class Checkpoint:
    spec: object
    params: "OrderedDict[str, Tensor]"
    state: OptimizerState
    config: TrainConfig
    step: int
    best: tuple


def load_checkpoint(path) -> Checkpoint:
    spec, params, appendix = models.load_model(path)
    if appendix[:4] != OPT_MAGIC:
        raise ValueError(f"{path}: no optimizer-state appendix")
    version, mlen = struct.unpack("<II", appendix[4:12])
    if version != OPT_VERSION:
        raise ValueError(f"{path}: unsupported optimizer appendix version {version}")
    meta = json.loads(appendix[12:12 + mlen])
    tensors = models.read_tensors(io.BytesIO(appendix[12 + mlen:]))
    state = OptimizerState(OrderedDict((k, tensors[f"m/{k}"].copy()) for k in params),
                           OrderedDict((k, tensors[f"v/{k}"].copy()) for k in params),
                           meta["adam_t"])
    best_params = OrderedDict((k, Tensor(tensors[f"best/{k}"], requires_grad=True, name=k)) for k in params)
    best_val = math.inf if meta["best_val"] is None else meta["best_val"]
    return Checkpoint(spec, params, state, TrainConfig(**meta["config"]), meta["step"],
                      (meta["best_step"], best_val, best_params))
