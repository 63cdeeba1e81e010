"""PIM predictor architectures assembled from :mod:`pimcancel.layers`.

Every variant shares a four-conv skeleton around a middle nonlinearity::

    static_lut       conv, conv, LUT, relu, conv, conv
    dynamic_fc3      conv, conv, (fc + sigmoid) x 3, conv, conv
    lightweight_fc2  conv, conv, (fc + sigmoid) x 2, conv, conv

Complex signals enter as ``2 * tx`` real channels (I/Q stacked per antenna)
and leave as ``2 * rx`` channels. All convolutions are unpadded, so the
output covers ``T - rf + 1`` samples; output sample ``i`` is aligned with
input sample ``i + alignment_offset(spec)``.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .layers import ConvSpec, LutSpec, NormSpec

VARIANTS = {"static_lut": 0, "dynamic_fc3": 3, "lightweight_fc2": 2}
N_CONV = 4


class ModelSpecError(ValueError):
    pass


@dataclass
class ModelSpec:
    """Architecture description.

    ``widths`` lists the output channel count of every stage before the
    final conv: ``[conv1, conv2, *fc_stages, conv3]``. The LUT stage keeps
    the width of ``conv2`` and has no entry. ``conv4`` always emits
    ``2 * rx_antennas`` channels.
    """

    variant: str
    tx_antennas: int
    rx_antennas: int
    widths: list[int]
    kernel_sizes: list[int] = field(default_factory=lambda: [5, 5, 5, 5])
    dilations: list[int] = field(default_factory=lambda: [1, 2, 2, 1])
    lut: LutSpec | None = None
    norm: NormSpec = field(default_factory=NormSpec)
    conv_kind: str = "separable"
    activation: str = "leaky_relu"
    inner_activation: str = "leaky_relu"
    fc_residual: bool = True

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.kernel_sizes = [int(k) for k in self.kernel_sizes]
        self.dilations = [int(r) for r in self.dilations]
        if isinstance(self.lut, dict):
            self.lut = LutSpec(**self.lut)
        if isinstance(self.norm, dict):
            self.norm = NormSpec(**self.norm)
        if self.variant == "static_lut" and self.lut is None:
            self.lut = LutSpec()

    @property
    def n_fc(self) -> int:
        return VARIANTS[self.variant]

    @property
    def in_channels(self) -> int:
        return 2 * self.tx_antennas

    @property
    def out_channels(self) -> int:
        return 2 * self.rx_antennas

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ModelSpecError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.tx_antennas < 1 or self.rx_antennas < 1:
            raise ModelSpecError("antenna counts must be positive")
        expected = 3 + self.n_fc
        if len(self.widths) != expected:
            raise ModelSpecError(
                f"{self.variant}: widths has {len(self.widths)} entries, expected {expected} "
                f"(conv1, conv2, {self.n_fc} fc stage(s), conv3)")
        names = _width_names(self)
        for name, w in zip(names, self.widths):
            if w < 1:
                raise ModelSpecError(f"stage {name}: width must be positive, got {w}")
        if len(self.kernel_sizes) != N_CONV or len(self.dilations) != N_CONV:
            raise ModelSpecError(f"kernel_sizes and dilations need {N_CONV} entries (one per conv stage)")
        for i, (k, r) in enumerate(zip(self.kernel_sizes, self.dilations)):
            if k < 1 or r < 1:
                raise ModelSpecError(f"stage conv{i + 1}: kernel size and dilation must be >= 1")
        if self.conv_kind not in ("separable", "standard"):
            raise ModelSpecError(f"conv_kind must be 'separable' or 'standard', got {self.conv_kind!r}")
        for act in (self.activation, self.inner_activation):
            if act not in layers.ACTIVATIONS:
                raise ModelSpecError(f"unknown activation {act!r}")
        if self.variant != "static_lut" and self.lut is not None:
            raise ModelSpecError(f"stage lut: only static_lut carries a LUT, not {self.variant}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lut"] = dataclasses.asdict(self.lut) if self.lut is not None else None
        d["norm"] = dataclasses.asdict(self.norm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _width_names(spec: ModelSpec) -> list[str]:
    return ["conv1", "conv2"] + [f"fc{i + 1}" for i in range(spec.n_fc)] + ["conv3"]


def load_presets() -> dict:
    text = resources.files("pimcancel").joinpath("presets.json").read_text()
    return json.loads(text)


def preset(name: str, tx_antennas: int, rx_antennas: int, **overrides) -> ModelSpec:
    table = load_presets()["presets"]
    if name not in table:
        raise ModelSpecError(f"unknown preset {name!r}; available: {', '.join(sorted(table))}")
    cfg = dict(table[name])
    cfg.update(overrides)
    spec = ModelSpec(tx_antennas=tx_antennas, rx_antennas=rx_antennas, **cfg)
    spec.validate()
    return spec


def _stage_channels(spec: ModelSpec) -> list[tuple[int, int]]:
    """(c_in, c_out) for conv1..conv4."""
    w = spec.widths
    c2 = w[1]
    mid_out = w[1 + spec.n_fc] if spec.n_fc else c2
    return [(spec.in_channels, w[0]), (w[0], c2), (mid_out, w[-1]), (w[-1], spec.out_channels)]


def conv_stage_specs(spec: ModelSpec, stage: int) -> list[ConvSpec]:
    """Conv specs making up conv stage ``stage`` (0-based)."""
    c_in, c_out = _stage_channels(spec)[stage]
    k, r = spec.kernel_sizes[stage], spec.dilations[stage]
    if spec.conv_kind == "standard":
        return [ConvSpec("standard", c_in, c_out, k, r)]
    return [ConvSpec("depthwise", c_in, c_in, k, r), ConvSpec("pointwise", c_in, c_out)]


def _fc_shapes(spec: ModelSpec) -> list[tuple[int, int]]:
    w = spec.widths
    return [(w[1 + i], w[2 + i]) for i in range(spec.n_fc)]


def param_shapes(spec: ModelSpec) -> "OrderedDict[str, tuple[int, ...]]":
    """Names and shapes of every trainable tensor, in forward order."""
    spec.validate()
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()

    def conv_stage(stage: int, final: bool) -> None:
        prefix = f"conv{stage + 1}"
        convs = conv_stage_specs(spec, stage)
        for cs in convs:
            tag = {"standard": "conv", "depthwise": "dw", "pointwise": "pw"}[cs.kind]
            shapes[f"{prefix}.{tag}.weight"] = cs.weight_shape
            shapes[f"{prefix}.{tag}.bias"] = (cs.c_out,)
        if spec.norm.kind != "none" and not final:
            c = convs[-1].c_out
            shapes[f"{prefix}.norm.scale"] = (c,)
            shapes[f"{prefix}.norm.shift"] = (c,)

    conv_stage(0, False)
    conv_stage(1, False)
    if spec.variant == "static_lut":
        c = spec.widths[1]
        shapes["lut.table"] = (c, spec.lut.q) if spec.lut.per_channel else (spec.lut.q,)
    for i, (c_in, c_out) in enumerate(_fc_shapes(spec)):
        shapes[f"fc{i + 1}.weight"] = (c_out, c_in)
        shapes[f"fc{i + 1}.bias"] = (c_out,)
    conv_stage(2, False)
    conv_stage(3, True)
    return shapes


def param_count(spec: ModelSpec) -> int:
    """Closed-form trainable parameter total."""
    spec.validate()
    total = 0
    for stage in range(N_CONV):
        convs = conv_stage_specs(spec, stage)
        total += sum(cs.param_count for cs in convs)
        if stage < N_CONV - 1:
            total += spec.norm.param_count(convs[-1].c_out)
    if spec.variant == "static_lut":
        total += spec.lut.param_count(spec.widths[1])
    total += sum(c_out * c_in + c_out for c_in, c_out in _fc_shapes(spec))
    return total


def receptive_field(spec: ModelSpec) -> int:
    """``1 + sum((k_i - 1) * r_i)`` over conv stages; FC/LUT are pointwise in time."""
    return 1 + sum((k - 1) * r for k, r in zip(spec.kernel_sizes, spec.dilations))


def alignment_offset(spec: ModelSpec) -> int:
    """Input index aligned with output sample 0 (window centre)."""
    return (receptive_field(spec) - 1) // 2


def build(spec: ModelSpec, seed: int) -> "OrderedDict[str, Tensor]":
    """Allocate and initialise parameters.

    Weights are uniform in ``+-1/sqrt(fan_in)``, biases and norm shifts are
    zero, norm scales one, LUT tables the identity ramp. The output
    pointwise (or standard) weight of ``conv4`` starts at zero so an
    untrained model predicts no PIM.
    """
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias") or name.endswith(".norm.shift"):
            data = np.zeros(shape)
        elif name.endswith(".norm.scale"):
            data = np.ones(shape)
        elif name == "lut.table":
            data = spec.lut.identity_table(shape[0] if len(shape) == 2 else 1)
            data = data.reshape(shape)
        elif name.startswith("conv4.") and name.endswith(".weight") and not name.startswith("conv4.dw"):
            data = np.zeros(shape)
        else:
            fan_in = shape[-1] if len(shape) == 2 else shape[1] * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _conv_stage(h: Tensor, params, spec: ModelSpec, stage: int, final: bool) -> Tensor:
    prefix = f"conv{stage + 1}"
    act = layers.ACTIVATIONS[spec.activation]
    convs = conv_stage_specs(spec, stage)
    if spec.conv_kind == "standard":
        h = layers.conv1d_dilated(h, convs[0], params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"])
    else:
        h = layers.depthwise_separable(
            h, convs[0], params[f"{prefix}.dw.weight"], params[f"{prefix}.dw.bias"],
            convs[1], params[f"{prefix}.pw.weight"], params[f"{prefix}.pw.bias"],
            act=layers.ACTIVATIONS[spec.inner_activation])
    if final:
        return h
    if spec.norm.kind != "none":
        h = layers.channel_norm(h, params[f"{prefix}.norm.scale"], params[f"{prefix}.norm.shift"],
                                spec.norm.epsilon)
    return act(h)


def forward(params, spec: ModelSpec, x) -> Tensor:
    """Predict PIM for ``x[2*tx, T]`` (or ``[B, 2*tx, T]``).

    Returns ``[2*rx, T - rf + 1]``. Raises ``ModelSpecError`` if ``T < rf``.
    """
    x = ad.as_tensor(x)
    rf = receptive_field(spec)
    if x.ndim not in (2, 3) or x.shape[-2] != spec.in_channels:
        raise ModelSpecError(f"input must be [{spec.in_channels}, T] or [B, {spec.in_channels}, T], "
                             f"got {list(x.shape)}")
    if x.shape[-1] < rf:
        raise ModelSpecError(f"input length {x.shape[-1]} shorter than receptive field {rf}")
    h = _conv_stage(x, params, spec, 0, False)
    h = _conv_stage(h, params, spec, 1, False)
    if spec.variant == "static_lut":
        h = ad.relu(layers.lut_forward(h, params["lut.table"], spec.lut))
    for i, (c_in, c_out) in enumerate(_fc_shapes(spec)):
        z = ad.centered_sigmoid(layers.fully_connected(h, params[f"fc{i + 1}.weight"], params[f"fc{i + 1}.bias"]))
        h = ad.add(h, z) if spec.fc_residual and c_in == c_out else z
    h = _conv_stage(h, params, spec, 2, False)
    return _conv_stage(h, params, spec, 3, True)


def predict(params, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Forward pass on raw arrays without recording a tape."""
    frozen = OrderedDict((k, v.detach()) for k, v in params.items())
    return forward(frozen, spec, Tensor._wrap(np.asarray(x, dtype=np.float64), False)).data


# --- PIMM checkpoint container -------------------------------------------------

MODEL_MAGIC = b"PIMM"
MODEL_VERSION = 1


def write_tensors(fh, tensors: "OrderedDict[str, np.ndarray]") -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def read_tensors(fh) -> "OrderedDict[str, np.ndarray]":
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = data
    return out


def save_model(path, spec: ModelSpec, params, appendix: bytes = b"") -> None:
    """Write a PIMM file: magic, version, JSON spec, tensors, optional appendix."""
    spec_json = spec.to_json().encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    buf.write(struct.pack("<I", len(spec_json)))
    buf.write(spec_json)
    write_tensors(buf, OrderedDict((k, v.data) for k, v in params.items()))
    buf.write(appendix)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> tuple[ModelSpec, "OrderedDict[str, Tensor]", bytes]:
    """Read a PIMM file. Returns (spec, params, trailing appendix bytes)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise ValueError(f"{path}: not a PIMM model file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported PIMM version {version}")
        (slen,) = struct.unpack("<I", _read_exact(fh, 4))
        spec = ModelSpec.from_dict(json.loads(_read_exact(fh, slen).decode("utf-8")))
        spec.validate()
        arrays = read_tensors(fh)
        appendix = fh.read()
    expected = param_shapes(spec)
    if list(expected) != list(arrays) or any(tuple(arrays[k].shape) != s for k, s in expected.items()):
        raise ValueError(f"{path}: tensors do not match the stored model spec")
    params = OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in arrays.items())
    return spec, params, appendix
