"""Evaluation metrics: average power error, cancellation depth, segment
heatmaps and averaged periodograms.

Signals are handled as complex arrays ``[channels, samples]``. Real
I/Q channel stacks (``I0, Q0, I1, Q1, ...``) convert through
:func:`to_complex`. Power per sample is ``I**2 + Q**2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import models
from .sim import ComplexSignal

FRAME_LEN = 1024


class MetricError(ValueError):
    """Raised on metric preconditions (empty grids, short signals, shape mismatch)."""


def to_complex(channels: np.ndarray) -> np.ndarray:
    """``[2C, N]`` real I/Q stack -> ``[C, N]`` complex."""
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim != 2 or channels.shape[0] % 2:
        raise MetricError(f"expected [2C, N] I/Q channels, got {list(channels.shape)}")
    return channels[0::2] + 1j * channels[1::2]


def _as_complex(sig) -> np.ndarray:
    if isinstance(sig, ComplexSignal):
        return sig.data
    arr = np.asarray(sig)
    return arr[None, :] if arr.ndim == 1 else arr


# --- APE ----------------------------------------------------------------------

@dataclass
class ApeResult:
    """Average power error in linear and dB form.

    ``linear`` is the channel mean of per-channel mean ``|P_meas - P_ref|``;
    ``db`` is the channel mean of per-channel mean ``|10 log10(P_meas/P_ref)|``.
    Samples where either power is not strictly positive cannot enter the dB
    form; they are skipped and counted in ``exclusions``.
    """

    linear: float
    linear_per_channel: list[float]
    db: float
    db_per_channel: list[float]
    exclusions: int


def ape(meas_power, ref_power) -> ApeResult:
    meas = np.atleast_2d(np.asarray(meas_power, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(ref_power, dtype=np.float64))
    if meas.shape != ref.shape:
        raise MetricError(f"ape: shape mismatch {list(meas.shape)} vs {list(ref.shape)}")
    if meas.size == 0:
        raise MetricError("ape: empty input")
    lin = np.mean(np.abs(meas - ref), axis=1)
    ok = (ref > 0) & (meas > 0)
    db_ch = []
    for c in range(meas.shape[0]):
        m = ok[c]
        if m.any():
            db_ch.append(float(np.mean(np.abs(10.0 * np.log10(meas[c, m] / ref[c, m])))))
        else:
            db_ch.append(math.nan)
    return ApeResult(float(np.mean(lin)), [float(v) for v in lin],
                     float(np.mean(db_ch)), db_ch, int(ok.size - ok.sum()))


# --- cancellation depth -------------------------------------------------------

def cancellation_depth(z, z_hat) -> np.ndarray:
    """Per-channel ``10 log10(mean|z|^2 / mean|z - z_hat|^2)`` in dB.

    A channel with zero residual reports ``+inf`` (check with ``np.isinf``);
    failed cancellation yields negative values, never clamped.
    """
    z, z_hat = _as_complex(z), _as_complex(z_hat)
    if z.shape != z_hat.shape:
        raise MetricError(f"cancellation_depth: shape mismatch {list(z.shape)} vs {list(z_hat.shape)}")
    if z.shape[-1] == 0:
        raise MetricError("cancellation_depth: empty segment")
    pz = np.mean(np.abs(z) ** 2, axis=1)
    pr = np.mean(np.abs(z - z_hat) ** 2, axis=1)
    out = np.empty(len(pz))
    for c, (a, b) in enumerate(zip(pz, pr)):
        out[c] = math.inf if b == 0 else 10.0 * math.log10(a / b) if a > 0 else -math.inf
    return out


@dataclass
class ApeReport:
    per_channel_ape_db: list[float]
    mean_ape_db: float
    per_channel_depth_db: list[float]
    mean_depth_db: float
    n_samples: int
    n_channels: int
    ape_linear: float = 0.0
    exclusions: int = 0
    perfect_channels: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else "-inf" if v < 0 else "nan"
            return v
        return {k: ([clean(x) for x in v] if isinstance(v, list) else clean(v))
                for k, v in self.__dict__.items()}


def ape_report(z, z_hat) -> ApeReport:
    """APE of predicted vs. true PIM power alongside cancellation depth."""
    z, z_hat = _as_complex(z), _as_complex(z_hat)
    a = ape(np.abs(z_hat) ** 2, np.abs(z) ** 2)
    d = cancellation_depth(z, z_hat)
    return ApeReport(a.db_per_channel, a.db, [float(v) for v in d], float(np.mean(d)),
                     int(z.shape[1]), int(z.shape[0]), a.linear, a.exclusions,
                     [int(c) for c in np.flatnonzero(np.isposinf(d))])


# --- model alignment ----------------------------------------------------------

@dataclass
class Aligned:
    """True and predicted PIM over the model's valid region.

    ``first`` is the raw sample index (in the evaluated sequence) of column 0.
    """

    z: np.ndarray
    z_hat: np.ndarray
    first: int

    @property
    def stop(self) -> int:
        return self.first + self.z.shape[1]


def align(params, spec, x: np.ndarray, z: np.ndarray, margin: int = 0) -> Aligned:
    """Run the model on ``x[2tx, L]`` and pair outputs with ``z[2rx, L]``.

    Drops ``margin`` output samples at each end, matching the training loss.
    """
    pred = models.predict(params, spec, x)
    off = models.alignment_offset(spec)
    n = pred.shape[-1]
    if n <= 2 * margin:
        raise MetricError(f"sequence too short for margin {margin}")
    pred = pred[:, margin:n - margin]
    first = off + margin
    target = np.asarray(z)[:, first:first + pred.shape[-1]]
    return Aligned(to_complex(target), to_complex(pred), first)


# --- heatmap ------------------------------------------------------------------

@dataclass
class HeatmapGrid:
    """Mean-over-channel depth (dB) per (start, length) segment.

    ``values[i, j]`` belongs to ``starts[i]`` and ``lengths[j]`` (in samples);
    NaN marks cells whose segment runs past the end of the data.
    """

    starts: list[int]
    lengths: list[int]
    values: np.ndarray

    def cell(self, start: int, length: int) -> float | None:
        v = self.values[self.starts.index(start), self.lengths.index(length)]
        return None if np.isnan(v) else float(v)

    @property
    def n_valid(self) -> int:
        return int(np.sum(~np.isnan(self.values)))


def heatmap_from_aligned(al: Aligned, total: int, starts, lengths) -> HeatmapGrid:
    """Evaluate each segment ``[s, s + l)`` of a ``total``-sample sequence.

    Segment coordinates are raw sample indices; only samples inside the
    valid prediction region contribute.
    """
    starts, lengths = [int(s) for s in starts], [int(l) for l in lengths]
    values = np.full((len(starts), len(lengths)), np.nan)
    for i, s in enumerate(starts):
        for j, ln in enumerate(lengths):
            if s < 0 or ln <= 0 or s + ln > total:
                continue
            a, b = max(s, al.first) - al.first, min(s + ln, al.stop) - al.first
            if b <= a:
                continue
            values[i, j] = float(np.mean(cancellation_depth(al.z[:, a:b], al.z_hat[:, a:b])))
    grid = HeatmapGrid(starts, lengths, values)
    if grid.n_valid == 0:
        raise MetricError("heatmap sweep has no valid cells")
    return grid


def heatmap_sweep(params, spec, x: np.ndarray, z: np.ndarray, starts, lengths,
                  margin: int = 0) -> HeatmapGrid:
    """Depth heatmap over contiguous test segments of one model."""
    x = np.asarray(x)
    if len(starts) and len(lengths) and x.shape[-1] < max(starts) + min(lengths):
        raise MetricError(f"test set of {x.shape[-1]} samples is shorter than "
                          f"max(start) + min(length) = {max(starts) + min(lengths)}")
    return heatmap_from_aligned(align(params, spec, x, z, margin), x.shape[-1], starts, lengths)


def parse_range(text: str, unit: int = 1) -> list[int]:
    """``"a:b:step"`` (inclusive of ``b``) scaled by ``unit`` -> sample counts."""
    parts = text.split(":")
    if len(parts) not in (1, 2, 3):
        raise ValueError(f"range {text!r} is not a:b[:step]")
    try:
        nums = [int(p) for p in parts]
    except ValueError as exc:
        raise ValueError(f"range {text!r} must contain integers") from exc
    a = nums[0]
    b = nums[1] if len(nums) > 1 else a
    step = nums[2] if len(nums) > 2 else 1
    if step <= 0 or b < a:
        raise ValueError(f"range {text!r} needs a <= b and step > 0")
    return [v * unit for v in range(a, b + 1, step)]


# --- spectrum -----------------------------------------------------------------

def periodogram(sig, frame_len: int = FRAME_LEN) -> np.ndarray:
    """Averaged ``|X_k|^2 / N`` over non-overlapping rectangular frames.

    The bins of each frame sum to that frame's energy ``sum |x_n|^2``.
    Accepts a 1-D sequence or ``[channels, samples]``; returns bins in FFT
    order with a trailing axis of length ``frame_len``.
    """
    arr = np.asarray(sig)
    n = arr.shape[-1]
    if n < frame_len:
        raise MetricError(f"spectrum needs at least {frame_len} samples, got {n}")
    frames = n // frame_len
    blocks = arr[..., :frames * frame_len].reshape(arr.shape[:-1] + (frames, frame_len))
    spec = np.abs(np.fft.fft(blocks, axis=-1)) ** 2 / frame_len
    return spec.mean(axis=-2)


@dataclass
class SpectrumReport:
    """Per-channel averaged periodograms; ``freqs`` in cycles/sample."""

    freqs: np.ndarray
    true: np.ndarray
    pred: np.ndarray
    residual: np.ndarray
    frames: int


def spectrum(z, z_hat, channel: int | None = None) -> SpectrumReport:
    z, z_hat = _as_complex(z), _as_complex(z_hat)
    if channel is not None:
        if not 0 <= channel < z.shape[0]:
            raise MetricError(f"channel {channel} out of range [0, {z.shape[0]})")
        z, z_hat = z[channel:channel + 1], z_hat[channel:channel + 1]
    return SpectrumReport(np.fft.fftfreq(FRAME_LEN), periodogram(z), periodogram(z_hat),
                          periodogram(z - z_hat), z.shape[-1] // FRAME_LEN)
