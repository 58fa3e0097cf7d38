"""Post-training int8 quantization of the CNN with integer-accumulation kernels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import InvalidArgument, InvalidModel
from .modelfile import DT_F64, DT_I8, DT_I32, GEOMETRY, RawTensor
from .models import CnnArch, Model, cnn_forward_batch
from .signal import FeatureMatrix
from .wavio import round_half_away

QMIN, QMAX = -128, 127
RANGE_FLOOR = 1e-8
MIN_CALIBRATION = 32
LAYERS = ("conv1", "conv2", "dense1", "dense2")
ACTIVATIONS = ("input",) + LAYERS


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgument(f"quantization scale must be positive and finite, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise InvalidArgument(f"zero point {self.zero_point} outside [{QMIN}, {QMAX}]")


@dataclass(frozen=True)
class QuantizedTensor:
    data: np.ndarray  # int8
    qparams: QuantParams

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape


def calibrate(activations) -> QuantParams:
    """Asymmetric min/max parameters covering every observed value."""
    arrays = [np.asarray(a, dtype=np.float64).ravel() for a in activations]
    arrays = [a for a in arrays if a.size]
    if not arrays:
        raise InvalidArgument("calibration needs at least one observed value")
    lo = min(float(a.min()) for a in arrays)
    hi = max(float(a.max()) for a in arrays)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise InvalidArgument("calibration values must be finite")
    scale = max(hi - lo, RANGE_FLOOR) / 255.0
    zp = QMIN - int(round_half_away(lo / scale))
    return QuantParams(scale, int(np.clip(zp, QMIN, QMAX)))


def _quantize_values(r, q: QuantParams) -> np.ndarray:
    x = round_half_away(np.asarray(r, dtype=np.float64) / q.scale) + q.zero_point
    return np.clip(x, QMIN, QMAX).astype(np.int8)


def quantize_tensor(t, q: QuantParams) -> QuantizedTensor:
    return QuantizedTensor(_quantize_values(t, q), q)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    return qt.qparams.scale * (qt.data.astype(np.float64) - qt.qparams.zero_point)


def symmetric_weight_params(w: np.ndarray) -> QuantParams:
    return QuantParams(max(float(np.abs(w).max()), RANGE_FLOOR) / QMAX, 0)


@dataclass
class QuantizedModel:
    arch: CnnArch
    weights: dict[str, QuantizedTensor]
    biases: dict[str, np.ndarray]  # int32 at scale w_scale * in_scale
    acts: dict[str, QuantParams]
    norm_mean: np.ndarray
    norm_std: np.ndarray = field(repr=False)

    kind = "cnn-int8"

    def in_params(self, layer: str) -> QuantParams:
        return self.acts[ACTIVATIONS[ACTIVATIONS.index(layer) - 1]]

    def to_tensors(self) -> list[RawTensor]:
        out = []
        for layer in LAYERS:
            w = self.weights[layer]
            out.append(RawTensor(f"{layer}.w", w.data, DT_I8, w.qparams.scale, w.qparams.zero_point))
            out.append(RawTensor(f"{layer}.b", self.biases[layer], DT_I32))
        for name in ACTIVATIONS:
            q = self.acts[name]
            out.append(RawTensor(f"act.{name}.scale", np.array([q.scale]), DT_F64))
            out.append(RawTensor(f"act.{name}.zp", np.array([q.zero_point]), DT_I32))
        out.append(RawTensor(GEOMETRY, np.array([self.arch.in_h, self.arch.in_w]), DT_I32))
        out.append(RawTensor("norm.mean", self.norm_mean))
        out.append(RawTensor("norm.std", self.norm_std))
        return out

    @classmethod
    def from_tensors(cls, tensors: list[RawTensor]) -> "QuantizedModel":
        named = {t.name: t for t in tensors}
        try:
            weights = {
                layer: QuantizedTensor(
                    named[f"{layer}.w"].data,
                    QuantParams(named[f"{layer}.w"].scale, named[f"{layer}.w"].zero_point),
                )
                for layer in LAYERS
            }
            biases = {layer: named[f"{layer}.b"].data.astype(np.int32) for layer in LAYERS}
            mean, std = named["norm.mean"].data, named["norm.std"].data
            in_h, in_w = (int(v) for v in named[GEOMETRY].data[:2])
        except KeyError as exc:
            raise InvalidModel(f"quantized model lacks tensor {exc}") from exc
        acts = {}
        for name in ACTIVATIONS:
            s, z = named.get(f"act.{name}.scale"), named.get(f"act.{name}.zp")
            if s is None or z is None:
                raise InvalidModel(f"quantized model has no calibration for activation {name!r}")
            acts[name] = QuantParams(float(s.data[0]), int(z.data[0]))
        c1, c2 = weights["conv1"].dims[0], weights["conv2"].dims[0]
        flat, hidden = weights["dense1"].dims
        arch = CnnArch(in_h=in_h, in_w=in_w, conv1=c1, conv2=c2, hidden=hidden)
        return cls(arch, weights, biases, acts, mean, std)

    def logits_batch(self, xs: np.ndarray) -> np.ndarray:
        return quantized_forward_batch(self, xs)

    def predict_proba(self, x) -> np.ndarray:
        v = x.values if isinstance(x, FeatureMatrix) else np.asarray(x)
        return nn.softmax(self.logits_batch(v[None])[0])


def quantize_model(model: Model, calib) -> QuantizedModel:
    """Symmetric per-tensor int8 weights plus min/max-calibrated activations.

    ``calib`` is a sequence of raw FeatureMatrix (or arrays); at least 32 are needed.
    """
    if model.kind != "cnn":
        raise InvalidArgument("only the CNN can be quantized")
    calib = list(calib)
    if len(calib) < MIN_CALIBRATION:
        raise InvalidArgument(f"calibration needs >= {MIN_CALIBRATION} examples, got {len(calib)}")
    xs = np.stack([c.values if isinstance(c, FeatureMatrix) else np.asarray(c) for c in calib])
    z = model.standardize(xs.astype(np.float64))
    observed = {name: [] for name in ACTIVATIONS}
    for s in range(0, len(z), 32):
        logits, c = cnn_forward_batch(model.params, z[s : s + 32], keep=True)
        observed["input"].append(z[s : s + 32])
        observed["conv1"].append(c["a1"])
        observed["conv2"].append(c["a2"])
        observed["dense1"].append(c["h"])
        observed["dense2"].append(logits)
    acts = {name: calibrate(v) for name, v in observed.items()}

    weights, biases = {}, {}
    for i, layer in enumerate(LAYERS):
        w = model.params[f"{layer}.w"]
        wq = quantize_tensor(w, symmetric_weight_params(w))
        in_scale = acts[ACTIVATIONS[i]].scale
        b = round_half_away(model.params[f"{layer}.b"] / (wq.qparams.scale * in_scale))
        weights[layer] = wq
        biases[layer] = np.clip(b, -(2**31), 2**31 - 1).astype(np.int32)
    return QuantizedModel(model.arch, weights, biases, acts, model.norm_mean.copy(), model.norm_std.copy())


def _requantize(acc: np.ndarray, multiplier: float, out: QuantParams) -> np.ndarray:
    q = round_half_away(acc.astype(np.float64) * multiplier) + out.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int32)


def _int_conv(xq: np.ndarray, zp_in: int, w: QuantizedTensor, b: np.ndarray) -> np.ndarray:
    # Subtracting zp_in first lets zero padding stand for real zero.
    x = xq.astype(np.int32) - np.int32(zp_in)
    cols = nn.im2col3x3(x)
    wmat = w.data.astype(np.int32).reshape(w.dims[0], -1).T
    acc = cols @ wmat + b  # int32 accumulation
    return acc.transpose(0, 3, 1, 2)


def _int_dense(xq: np.ndarray, zp_in: int, w: QuantizedTensor, b: np.ndarray) -> np.ndarray:
    x = xq.astype(np.int32) - np.int32(zp_in)
    return x @ w.data.astype(np.int32) + b


def quantized_forward_batch(qm: QuantizedModel, xs: np.ndarray) -> np.ndarray:
    for name in ACTIVATIONS:
        if name not in qm.acts:
            raise InvalidModel(f"no calibration for activation {name!r}")
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 3 or xs.shape[1] != len(qm.norm_mean):
        raise InvalidArgument(f"input shape {xs.shape} does not match a {len(qm.norm_mean)}-band model")
    z = (xs - qm.norm_mean[:, None]) / qm.norm_std[:, None]
    q_in = qm.acts["input"]
    x = _quantize_values(z, q_in).astype(np.int32)[:, None]

    for layer in ("conv1", "conv2"):
        qi, qo, w = qm.in_params(layer), qm.acts[layer], qm.weights[layer]
        acc = _int_conv(x, qi.zero_point, w, qm.biases[layer])
        y = _requantize(acc, w.qparams.scale * qi.scale / qo.scale, qo)
        y = np.maximum(y, qo.zero_point)  # ReLU in the integer domain
        x, _ = nn.maxpool2x2_forward(y)

    flat_len = qm.weights["dense1"].dims[0]
    x = x.reshape(len(xs), -1)
    if x.shape[1] != flat_len:
        raise InvalidArgument(f"input flattens to {x.shape[1]} features, model expects {flat_len}")
    qi, qo, w = qm.in_params("dense1"), qm.acts["dense1"], qm.weights["dense1"]
    y = _requantize(_int_dense(x, qi.zero_point, w, qm.biases["dense1"]), w.qparams.scale * qi.scale / qo.scale, qo)
    x = np.maximum(y, qo.zero_point)
    qi, qo, w = qm.in_params("dense2"), qm.acts["dense2"], qm.weights["dense2"]
    y = _requantize(_int_dense(x, qi.zero_point, w, qm.biases["dense2"]), w.qparams.scale * qi.scale / qo.scale, qo)
    return qo.scale * (y.astype(np.float64) - qo.zero_point)


def quantized_forward(qm: QuantizedModel, x) -> np.ndarray:
    v = x.values if isinstance(x, FeatureMatrix) else np.asarray(x)
    return quantized_forward_batch(qm, v[None])[0]


def accumulator_bound(qm: QuantizedModel) -> int:
    """Worst-case |int32 accumulator| over all layers for any int8 input."""
    worst = 0
    for i, layer in enumerate(LAYERS):
        w = qm.weights[layer].data.astype(np.int64)
        zp = qm.acts[ACTIVATIONS[i]].zero_point
        max_x = max(QMAX - zp, zp - QMIN)
        per_out = np.abs(w.reshape(w.shape[0], -1)).sum(axis=1) if w.ndim == 4 else np.abs(w).sum(axis=0)
        worst = max(worst, int((per_out * max_x + np.abs(qm.biases[layer].astype(np.int64))).max()))
    return worst
