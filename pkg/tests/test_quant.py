from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadnoise.errors import InvalidArgument, InvalidModel
from roadnoise.modelfile import model_from_bytes, model_to_bytes, serialized_size
from roadnoise.models import init_params
from roadnoise.quant import (
    QuantizedModel,
    QuantizedTensor,
    QuantParams,
    accumulator_bound,
    calibrate,
    dequantize,
    quantize_model,
    quantize_tensor,
    quantized_forward,
    symmetric_weight_params,
)
from roadnoise.signal import extract_logmel
from roadnoise.synth import RoadClass, SubProfile, default_profile, synth_clip
from roadnoise.train import TrainConfig, train_arrays

qparams = st.builds(
    QuantParams,
    scale=st.floats(1e-6, 10.0),
    zero_point=st.integers(-128, 127),
)


@pytest.fixture(scope="module")
def trained():
    xs, ys = [], []
    profs = [
        [default_profile(RoadClass.RoughAsphalt)],
        [default_profile(RoadClass.SmoothAsphalt)],
        [default_profile(RoadClass.Other, s) for s in SubProfile],
    ]
    for label, group in enumerate(profs):
        for i in range(20):
            clip = synth_clip(group[i % len(group)], 40.0 + 2.5 * i, 1.0, 77 + 100 * label + i)
            xs.append(extract_logmel(clip).values)
            ys.append(label)
    xs, ys = np.stack(xs), np.array(ys)
    _, model = train_arrays(TrainConfig(epochs=4, batch_size=8, seed=2, val_fraction=0.2), xs, ys)
    return model, xs, ys


class TestCalibrate:
    def test_symmetric_unit_range(self):
        q = calibrate([np.array([-1.0, 0.3, 1.0])])
        assert q.scale == pytest.approx(2 / 255, rel=1e-15)
        assert q.zero_point == 0

    def test_constant_zero(self):
        q = calibrate([np.zeros(10)])
        assert q.scale == pytest.approx(1e-8 / 255)
        assert dequantize(quantize_tensor(np.zeros(3), q)).tolist() == [0.0, 0.0, 0.0]

    def test_non_negative(self):
        s = 0.02
        q = calibrate([np.array([0.0, 255 * s])])
        assert q.zero_point == -128 and q.scale == pytest.approx(s)

    def test_multiple_tensors_pooled(self):
        q = calibrate([np.array([0.5]), np.array([-2.0, 3.0])])
        assert q.scale == pytest.approx(5 / 255)

    def test_covers_observed_range(self, rng):
        x = rng.normal(2, 3, 1000)
        q = calibrate([x])
        assert np.max(np.abs(dequantize(quantize_tensor(x, q)) - x)) <= q.scale / 2 + 1e-12

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            calibrate([])
        with pytest.raises(InvalidArgument):
            calibrate([np.array([])])

    def test_non_finite(self):
        with pytest.raises(InvalidArgument):
            calibrate([np.array([0.0, np.inf])])


class TestQuantParams:
    @pytest.mark.parametrize("scale,zp", [(0.0, 0), (-1.0, 0), (np.nan, 0), (1.0, 128), (1.0, -129)])
    def test_invalid(self, scale, zp):
        with pytest.raises(InvalidArgument):
            QuantParams(scale, zp)


class TestQuantize:
    def test_zero(self):
        assert quantize_tensor(np.array([0.0]), QuantParams(0.5, 0)).data.tolist() == [0]

    def test_saturation(self):
        q = quantize_tensor(np.array([1e9, -1e9]), QuantParams(0.1, 5))
        assert q.data.tolist() == [127, -128] and q.data.dtype == np.int8

    def test_half_away(self):
        q = QuantParams(1.0, 0)
        assert quantize_tensor(np.array([0.5, -0.5, 1.5, -2.5]), q).data.tolist() == [1, -1, 2, -3]

    def test_dequantize_examples(self):
        assert dequantize(QuantizedTensor(np.array([13], dtype=np.int8), QuantParams(0.1, 3)))[0] == pytest.approx(1.0)
        assert np.all(dequantize(QuantizedTensor(np.full(4, -7, dtype=np.int8), QuantParams(0.3, -7))) == 0)

    @settings(max_examples=200, deadline=None)
    @given(q=qparams, data=st.data())
    def test_round_trip_bound(self, q, data):
        lo = q.scale * (-128 - q.zero_point)
        hi = q.scale * (127 - q.zero_point)
        r = np.array(data.draw(st.lists(st.floats(lo, hi), min_size=1, max_size=50)))
        err = np.abs(dequantize(quantize_tensor(r, q)) - r)
        assert np.all(err <= q.scale / 2 * (1 + 1e-9))

    @settings(max_examples=200, deadline=None)
    @given(q=qparams, a=st.floats(-1e4, 1e4), b=st.floats(-1e4, 1e4))
    def test_monotone_and_saturating(self, q, a, b):
        r1, r2 = min(a, b), max(a, b)
        q1, q2 = quantize_tensor(np.array([r1, r2]), q).data.astype(int)
        assert q1 <= q2
        assert -128 <= q1 <= 127 and -128 <= q2 <= 127

    @settings(max_examples=100, deadline=None)
    @given(q=qparams, ints=st.lists(st.integers(-128, 127), min_size=1, max_size=64))
    def test_dequantize_fixed_point(self, q, ints):
        qt = QuantizedTensor(np.array(ints, dtype=np.int8), q)
        once = dequantize(qt)
        assert np.array_equal(dequantize(quantize_tensor(once, q)), once)

    def test_symmetric_weights(self, rng):
        w = rng.normal(size=(5, 7))
        q = symmetric_weight_params(w)
        assert q.zero_point == 0 and q.scale == pytest.approx(np.abs(w).max() / 127)
        assert np.abs(quantize_tensor(w, q).data).max() == 127


class TestQuantizeModel:
    def test_structure(self, trained):
        model, xs, _ = trained
        qm = quantize_model(model, list(xs[:40]))
        assert all(w.qparams.zero_point == 0 for w in qm.weights.values())
        assert all(w.data.dtype == np.int8 for w in qm.weights.values())
        assert all(b.dtype == np.int32 for b in qm.biases.values())
        assert set(qm.acts) == {"input", "conv1", "conv2", "dense1", "dense2"}

    def test_bias_scale(self, trained):
        model, xs, _ = trained
        qm = quantize_model(model, list(xs[:40]))
        for layer, prev in [("conv1", "input"), ("dense2", "dense1")]:
            s = qm.weights[layer].qparams.scale * qm.acts[prev].scale
            np.testing.assert_allclose(qm.biases[layer] * s, model.params[f"{layer}.b"], atol=s / 2 + 1e-15)

    def test_needs_32_examples(self, trained):
        model, xs, _ = trained
        with pytest.raises(InvalidArgument):
            quantize_model(model, list(xs[:31]))

    def test_ast_rejected(self, trained):
        _, xs, _ = trained
        with pytest.raises(InvalidArgument):
            quantize_model(init_params("ast", 0), list(xs[:32]))

    def test_zero_weight_layer(self, trained):
        model, xs, _ = trained
        m = init_params("cnn", 0)
        m.params = dict(model.params, **{"conv2.w": np.zeros_like(model.params["conv2.w"])})
        m.norm_mean, m.norm_std = model.norm_mean, model.norm_std
        qm = quantize_model(m, list(xs[:32]))
        assert np.all(qm.weights["conv2"].data == 0) and qm.weights["conv2"].qparams.scale > 0

    def test_file_round_trip(self, trained, tmp_path):
        model, xs, _ = trained
        qm = quantize_model(model, list(xs[:40]))
        blob = model_to_bytes(qm)
        assert blob[4] == 2
        back = model_from_bytes(blob)
        assert isinstance(back, QuantizedModel)
        assert np.array_equal(quantized_forward(back, xs[0]), quantized_forward(qm, xs[0]))
        assert model_to_bytes(back) == blob
        assert len(blob) < 0.3 * serialized_size(model)

    def test_calibration_tensors_in_file(self, trained):
        model, xs, _ = trained
        qm = quantize_model(model, list(xs[:40]))
        named = {t.name: t for t in qm.to_tensors()}
        for a in ("input", "conv1", "conv2", "dense1", "dense2"):
            assert named[f"act.{a}.scale"].data.shape == (1,) and named[f"act.{a}.scale"].dtype == 0
            assert named[f"act.{a}.zp"].data.shape == (1,) and named[f"act.{a}.zp"].dtype == 2

    def test_missing_calibration(self, trained):
        model, xs, _ = trained
        qm = quantize_model(model, list(xs[:40]))
        tensors = [t for t in qm.to_tensors() if not t.name.startswith("act.conv2")]
        with pytest.raises(InvalidModel, match="conv2"):
            QuantizedModel.from_tensors(tensors)
        del qm.acts["dense1"]
        with pytest.raises(InvalidModel):
            quantized_forward(qm, xs[0])


class TestQuantizedForward:
    def test_agreement_with_float(self, trained):
        model, xs, _ = trained
        qm = quantize_model(model, list(xs))
        fl = model.logits_batch(xs).argmax(axis=1)
        qq = qm.logits_batch(xs).argmax(axis=1)
        assert np.mean(fl == qq) >= 0.97

    def test_zero_network_input(self, trained):
        # raw features equal to the band means standardize to an all-zero input
        model, xs, _ = trained
        qm = quantize_model(model, list(xs))
        x0 = np.repeat(model.norm_mean[:, None], xs.shape[2], axis=1)
        step = qm.acts["dense2"].scale
        assert np.max(np.abs(quantized_forward(qm, x0) - model.logits_batch(x0[None])[0])) <= step

    def test_accumulator_fits_int32(self, trained):
        model, xs, _ = trained
        qm = quantize_model(model, list(xs))
        assert accumulator_bound(qm) < 2**31
        assert 5376 * 127 * 128 < 2**31  # widest dot product, worst-case operands

    def test_shape_mismatch(self, trained):
        model, xs, _ = trained
        qm = quantize_model(model, list(xs))
        with pytest.raises(InvalidArgument):
            quantized_forward(qm, np.zeros((64, 40)))
