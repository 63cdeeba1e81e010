"""Synthetic multi-antenna transmit signals and a third-order PIM oracle.

The oracle mixes the transmit antennas through a complex coupling matrix
and applies a delayed-tap cubic memory model per receive antenna::

    u = C @ x
    z[r, n] = sum_taps a3(n + t0) * u[r, n - d] * |u[r, n - d]|^2 + noise

``a3`` is constant (static scenario) or modulated by a drift process
(dynamic scenario).
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FFT_LEN = 1024
SIGNAL_MAGIC = b"PIMS"
SIGNAL_VERSION = 1


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class Carrier:
    center: float
    bandwidth: float
    subcarriers: int

    @property
    def band(self) -> tuple[float, float]:
        return self.center - self.bandwidth / 2, self.center + self.bandwidth / 2


@dataclass
class CarrierPlan:
    carriers: list[Carrier]
    modulation: str = "QPSK"

    def __post_init__(self):
        self.carriers = [c if isinstance(c, Carrier) else Carrier(**c) for c in self.carriers]

    def validate(self) -> None:
        if not self.carriers:
            raise SimError("carrier plan needs at least one carrier")
        if self.modulation != "QPSK":
            raise SimError(f"unsupported modulation {self.modulation!r}")
        for c in self.carriers:
            lo, hi = c.band
            if c.bandwidth <= 0 or c.subcarriers < 1:
                raise SimError(f"carrier {c}: bandwidth and subcarrier count must be positive")
            if lo <= -0.5 or hi >= 0.5:
                raise SimError(f"carrier {c}: band [{lo:g}, {hi:g}] outside Nyquist (-0.5, 0.5)")
        ordered = sorted(self.carriers, key=lambda c: c.center)
        for a, b in zip(ordered, ordered[1:]):
            if a.band[1] > b.band[0]:
                raise SimError(f"carriers overlap: {a.band} and {b.band}")

    def subcarrier_bins(self, carrier: Carrier) -> np.ndarray:
        """FFT bins (of a 1024-point symbol) occupied by ``carrier``."""
        j = np.arange(carrier.subcarriers)
        freqs = carrier.band[0] + carrier.bandwidth * (j + 0.5) / carrier.subcarriers
        bins = np.round(freqs * FFT_LEN).astype(int)
        if len(np.unique(bins)) != len(bins):
            raise SimError(f"carrier {carrier}: {carrier.subcarriers} subcarriers do not fit "
                           f"{carrier.bandwidth * FFT_LEN:g} FFT bins")
        return bins % FFT_LEN

    def to_dict(self) -> dict:
        return {"carriers": [asdict(c) for c in self.carriers], "modulation": self.modulation}


@dataclass
class ComplexSignal:
    """Multi-antenna complex baseband series, ``data[antennas, length]``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.complex128))

    @property
    def antennas(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def to_channels(self) -> np.ndarray:
        """Real ``[2*antennas, length]`` array with rows I0, Q0, I1, Q1, ..."""
        out = np.empty((2 * self.antennas, self.length))
        out[0::2] = self.data.real
        out[1::2] = self.data.imag
        return out

    @classmethod
    def from_channels(cls, arr: np.ndarray) -> "ComplexSignal":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[..., 0::2, :] + 1j * arr[..., 1::2, :])

    def interleaved(self) -> np.ndarray:
        """``[antennas, length, 2]`` I/Q pairs."""
        return np.stack([self.data.real, self.data.imag], axis=-1)


@dataclass
class Drift:
    """Time variation of the third-order coefficients.

    ``sinusoidal`` scales ``|a3|`` by ``1 + depth*sin(w n + phi)`` and
    rotates it by ``phase_rad*sin(w n + phi)``; ``random_walk`` multiplies
    by ``exp(p(n) + j q(n))`` with independent Gaussian random walks.
    """

    kind: str = "none"
    period: float = 8192.0
    depth: float = 0.3
    phase_rad: float = 0.3
    offset_rad: float = 0.0
    step_sigma: float = 1e-3
    seed: int = 0

    def gain(self, n: np.ndarray) -> np.ndarray | float:
        if self.kind == "none":
            return 1.0
        if self.kind == "sinusoidal":
            s = np.sin(2 * np.pi * n / self.period + self.offset_rad)
            return (1.0 + self.depth * s) * np.exp(1j * self.phase_rad * s)
        if self.kind == "random_walk":
            stop = int(n.max()) + 1
            rng = np.random.default_rng([self.seed, 7])
            steps = rng.normal(scale=self.step_sigma, size=(2, stop))
            steps[:, 0] = 0.0
            walk = np.cumsum(steps, axis=1)
            return np.exp(walk[0, n] + 1j * walk[1, n])
        raise SimError(f"unknown drift kind {self.kind!r}")


@dataclass
class PimScenario:
    tx_antennas: int
    rx_antennas: int
    coupling: np.ndarray
    delays: list[int]
    a3: list[complex]
    drift: Drift = field(default_factory=Drift)
    noise_floor_db: float = -40.0
    seed: int = 0

    def __post_init__(self):
        self.coupling = np.asarray(self.coupling, dtype=np.complex128)
        self.delays = [int(d) for d in self.delays]
        self.a3 = [complex(a) for a in self.a3]
        if isinstance(self.drift, dict):
            self.drift = Drift(**self.drift)

    @property
    def static(self) -> bool:
        return self.drift.kind == "none"

    def validate(self) -> None:
        if self.coupling.shape != (self.rx_antennas, self.tx_antennas):
            raise SimError(f"coupling must be [{self.rx_antennas} x {self.tx_antennas}], "
                           f"got {list(self.coupling.shape)}")
        if not self.delays or len(self.delays) != len(self.a3):
            raise SimError("scenario needs at least one tap and one coefficient per delay")
        if self.delays[0] < 0 or any(b <= a for a, b in zip(self.delays, self.delays[1:])):
            raise SimError(f"tap delays must be >= 0 and strictly increasing, got {self.delays}")
        if self.drift.kind not in ("none", "sinusoidal", "random_walk"):
            raise SimError(f"unknown drift kind {self.drift.kind!r}")

    def nominal_pim_power(self) -> float:
        """Mean PIM power per rx antenna for unit-power Gaussian-like input.

        Uses ``E|u|^6 = 6 P^3`` for circular complex Gaussian ``u`` of power P.
        """
        p = np.sum(np.abs(self.coupling) ** 2, axis=1)
        taps = sum(abs(a) ** 2 for a in self.a3)
        return float(np.mean(6.0 * p ** 3) * taps)

    def to_dict(self) -> dict:
        return {
            "tx_antennas": self.tx_antennas,
            "rx_antennas": self.rx_antennas,
            "coupling": [[[float(v.real), float(v.imag)] for v in row] for row in self.coupling],
            "delays": list(self.delays),
            "a3": [[a.real, a.imag] for a in self.a3],
            "drift": asdict(self.drift),
            "noise_floor_db": self.noise_floor_db,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PimScenario":
        d = dict(d)
        d["coupling"] = np.array([[complex(re, im) for re, im in row] for row in d["coupling"]])
        d["a3"] = [complex(re, im) for re, im in d["a3"]]
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def default_plan() -> CarrierPlan:
    """Two non-contiguous carriers whose IM3 products stay inside Nyquist."""
    return CarrierPlan([Carrier(-0.15, 0.05, 48), Carrier(0.10, 0.05, 48)])


def make_scenario(tx_antennas: int = 4, rx_antennas: int = 2, seed: int = 0,
                  delays=(0, 3, 7), gains_db=(0.0, -6.0, -12.0), pim_scale: float = 0.35,
                  noise_floor_db: float = -40.0, drift: Drift | None = None) -> PimScenario:
    """Seeded random scenario: unit-norm coupling rows, random tap phases."""
    if len(delays) != len(gains_db):
        raise SimError("delays and gains_db must have the same length")
    rng = np.random.default_rng([seed, 11])
    c = rng.normal(size=(rx_antennas, tx_antennas)) + 1j * rng.normal(size=(rx_antennas, tx_antennas))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    phases = rng.uniform(0, 2 * np.pi, size=len(delays))
    a3 = [pim_scale * 10 ** (g / 20) * np.exp(1j * p) for g, p in zip(gains_db, phases)]
    return PimScenario(tx_antennas, rx_antennas, c, list(delays), a3,
                       drift or Drift(), noise_floor_db, seed)


def dynamic_variants(base_seed: int = 100, count: int = 5, **kwargs) -> list[PimScenario]:
    """Seeded sinusoidal-drift scenarios, one per dynamic dataset."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([base_seed, i])
        drift = Drift("sinusoidal", period=8192.0, depth=0.3, phase_rad=0.3,
                      offset_rad=float(rng.uniform(0, 2 * np.pi)), seed=base_seed + i)
        out.append(make_scenario(seed=base_seed + i, drift=drift, **kwargs))
    return out


def generate_tx(plan: CarrierPlan, antennas: int, length: int, seed) -> ComplexSignal:
    """OFDM-style multi-carrier QPSK signal with unit mean power per antenna.

    Each 1024-sample symbol carries independent QPSK symbols on the bins of
    every carrier; no cyclic prefix, so 1024-sample frames aligned to
    sample 0 contain no out-of-band energy.
    """
    plan.validate()
    if length < FFT_LEN:
        raise SimError(f"signal length must be >= {FFT_LEN}, got {length}")
    rng = np.random.default_rng(seed)
    bins = np.concatenate([plan.subcarrier_bins(c) for c in plan.carriers])
    n_sym = -(-length // FFT_LEN)
    spectrum = np.zeros((antennas, n_sym, FFT_LEN), dtype=np.complex128)
    bits = rng.integers(0, 2, size=(2, antennas, n_sym, bins.size))
    spectrum[:, :, bins] = ((1 - 2 * bits[0]) + 1j * (1 - 2 * bits[1])) / np.sqrt(2)
    x = np.fft.ifft(spectrum, axis=-1).reshape(antennas, -1)[:, :length]
    x /= np.sqrt(np.mean(np.abs(x) ** 2, axis=1, keepdims=True))
    return ComplexSignal(x)


def apply_pim(x: ComplexSignal, s: PimScenario, t0: int = 0, noise_seed: int | None = None,
              noise: bool = True) -> ComplexSignal:
    """Evaluate the PIM oracle on ``x`` (samples before 0 are taken as zero).

    Args:
        x: transmit signal with ``s.tx_antennas`` antennas.
        s: scenario.
        t0: absolute time index of ``x[:, 0]`` (drives the drift phase).
        noise_seed: seed of the circular Gaussian noise stream; defaults to
            a value derived from ``(s.seed, t0)``.
        noise: set False to disable noise regardless of the floor.
    """
    s.validate()
    if x.antennas != s.tx_antennas:
        raise SimError(f"signal has {x.antennas} antennas, scenario expects {s.tx_antennas}")
    n = x.length
    if s.delays[-1] >= n:
        raise SimError(f"tap delay {s.delays[-1]} >= signal length {n}")
    # per-sample accumulation keeps every output bit-identical under time shifts
    u = np.zeros((s.rx_antennas, n), dtype=np.complex128)
    for t in range(s.tx_antennas):
        u += s.coupling[:, t:t + 1] * x.data[t]
    cubic = u * (u.real ** 2 + u.imag ** 2)
    gain = s.drift.gain(np.arange(t0, t0 + n))
    z = np.zeros((s.rx_antennas, n), dtype=np.complex128)
    for d, a in zip(s.delays, s.a3):
        coef = a * gain
        if d == 0:
            z += coef * cubic
        else:
            z[:, d:] += (coef[d:] if np.ndim(coef) else coef) * cubic[:, :n - d]
    if noise and math.isfinite(s.noise_floor_db):
        rng = np.random.default_rng([s.seed, 3, t0] if noise_seed is None else noise_seed)
        sigma = math.sqrt(10 ** (s.noise_floor_db / 10) * s.nominal_pim_power() / 2)
        z += sigma * (rng.normal(size=z.shape) + 1j * rng.normal(size=z.shape))
    return ComplexSignal(z)


# --- PIMS container --------------------------------------------------------------

def write_signal(path, sig: ComplexSignal, header: dict) -> None:
    """Write magic, version, JSON header length + text, then float32 I/Q pairs."""
    hdr = dict(header)
    hdr["antennas"] = sig.antennas
    hdr["length"] = sig.length
    text = canonical_json(hdr).encode("utf-8")
    payload = sig.interleaved().astype("<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(SIGNAL_MAGIC)
            fh.write(struct.pack("<II", SIGNAL_VERSION, len(text)))
            fh.write(text)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write signal file {path}: {exc}") from exc


def read_signal(path) -> tuple[ComplexSignal, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read signal file {path}: {exc}") from exc
    if raw[:4] != SIGNAL_MAGIC:
        raise SimError(f"{path}: not a PIMS signal file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != SIGNAL_VERSION:
        raise SimError(f"{path}: unsupported PIMS version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    a, n = header["antennas"], header["length"]
    body = np.frombuffer(raw, dtype="<f4", offset=12 + hlen)
    if body.size != 2 * a * n:
        raise SimError(f"{path}: payload has {body.size} values, header implies {2 * a * n}")
    iq = body.astype(np.float64).reshape(a, n, 2)
    return ComplexSignal(iq[..., 0] + 1j * iq[..., 1]), header


# --- datasets -----------------------------------------------------------------------

SPLITS = ("train", "test")


def split_seed(seed: int, split: str) -> int:
    return 2 * seed + SPLITS.index(split)


@dataclass
class DatasetFiles:
    root: Path
    manifests: dict

    def path(self, split: str, role: str) -> Path:
        return self.root / f"{split}_{'x' if role == 'tx' else 'z'}.pims"

    def manifest_path(self, split: str) -> Path:
        return self.root / f"{split}.manifest.json"


def synthesize_split(plan: CarrierPlan, scenario: PimScenario, n_train: int, n_test: int,
                     seed: int, split: str) -> tuple[ComplexSignal, ComplexSignal]:
    """In-memory (x, z) for one split; exactly what make_dataset writes."""
    ss = split_seed(seed, split)
    length = n_train if split == "train" else n_test
    t0 = 0 if split == "train" else n_train
    x = generate_tx(plan, scenario.tx_antennas, length, seed=[ss, 0])
    z = apply_pim(x, scenario, t0=t0, noise_seed=[ss, 1])
    return x, z


def make_dataset(plan: CarrierPlan, scenario: PimScenario, n_train: int, n_test: int, seed: int,
                 out_dir, min_length: int = 0) -> DatasetFiles:
    """Write train/test (x, z) PIMS files plus one manifest per split.

    The test split continues the training timeline (``t0 = n_train``) so
    drifting scenarios are evaluated on unseen time.
    """
    for name, n in (("n_train", n_train), ("n_test", n_test)):
        if n < max(min_length, FFT_LEN):
            raise SimError(f"{name}={n} shorter than required {max(min_length, FFT_LEN)} samples")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    files = DatasetFiles(root, {})
    h = scenario.hash()
    for split in SPLITS:
        x, z = synthesize_split(plan, scenario, n_train, n_test, seed, split)
        ss = split_seed(seed, split)
        write_signal(files.path(split, "tx"), x, {"role": "tx", "scenario_hash": h, "seed": ss})
        write_signal(files.path(split, "pim"), z, {"role": "pim", "scenario_hash": h, "seed": ss})
        manifest = {
            "format": "pim-dataset/1",
            "split": split,
            "seed": seed,
            "n_train": n_train,
            "n_test": n_test,
            "plan": plan.to_dict(),
            "scenario": scenario.to_dict(),
            "scenario_hash": h,
        }
        files.manifest_path(split).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        files.manifests[split] = manifest
    return files


def load_split(root, split: str) -> tuple[ComplexSignal, ComplexSignal, dict]:
    root = Path(root)
    manifest = json.loads((root / f"{split}.manifest.json").read_text())
    x, hx = read_signal(root / f"{split}_x.pims")
    z, hz = read_signal(root / f"{split}_z.pims")
    if hx["scenario_hash"] != manifest["scenario_hash"] or hz["scenario_hash"] != manifest["scenario_hash"]:
        raise SimError(f"{root}: {split} files do not match the manifest scenario hash")
    return x, z, manifest


def manifest_objects(manifest: dict) -> tuple[CarrierPlan, PimScenario]:
    return CarrierPlan(**manifest["plan"]), PimScenario.from_dict(manifest["scenario"])
