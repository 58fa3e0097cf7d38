"""End-to-end acceptance checks.

Each test prints one ``PASS``/``FAIL`` line (with capture disabled) and then
asserts the same condition at the stated tolerance.
"""

from __future__ import annotations

import platform
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import naive_dft
from roadnoise import nn
from roadnoise.cli import run
from roadnoise.modelfile import model_from_bytes, model_to_bytes, save_model
from roadnoise.models import AstArch, ast_forward, init_params
from roadnoise.quant import calibrate, dequantize, quantize_model, quantize_tensor
from roadnoise.runtime import MIN_SMOOTHING_SPAN_S, StreamConfig, bench, classify_clip, flip_rate
from roadnoise.signal import AudioClip, fft
from roadnoise.synth import (
    CorpusManifest,
    RoadClass,
    SubProfile,
    SynthSpec,
    all_profiles,
    band_level,
    default_profile,
    synth_clip,
    synth_corpus,
)
from roadnoise.train import TrainConfig, evaluate, grad_check, load_examples, train_arrays

pytestmark = pytest.mark.slow

TRAIN_SEED, TEST_SEED = 42, 4242
TRAIN_PER_CLASS, TEST_PER_CLASS = 300, 60


@pytest.fixture
def verdict(capsys):
    def report(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


@pytest.fixture(scope="session")
def corpora(tmp_path_factory):
    """Training corpus written through the CLI plus a separately seeded held-out set."""
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    argv = ["synth", "--out", str(root / "train"), "--clips-per-class", str(TRAIN_PER_CLASS), "--seed", str(TRAIN_SEED)]
    assert run(argv) == 0
    train_m = CorpusManifest.load(root / "train")
    test_m = synth_corpus(SynthSpec(TEST_PER_CLASS, root / "test", TEST_SEED))
    xs, ys = load_examples(train_m)
    xt, yt = load_examples(test_m)
    return dict(root=root, train=(xs, ys), test=(xt, yt), seconds=time.perf_counter() - t0)


def _fit(corpora, arch: str):
    t0 = time.perf_counter()
    report, model = train_arrays(TrainConfig(arch=arch, epochs=10, seed=TRAIN_SEED), *corpora["train"])
    return model, time.perf_counter() - t0


@pytest.fixture(scope="session")
def cnn(corpora):
    return _fit(corpora, "cnn")


@pytest.fixture(scope="session")
def ast(corpora):
    return _fit(corpora, "ast")


@pytest.fixture(scope="session")
def int8(cnn, corpora):
    xs, _ = corpora["train"]
    return quantize_model(cnn[0], list(xs))


def _steady(road_class: RoadClass, seconds: float, speed: float, seed: int) -> np.ndarray:
    sub = next(iter(SubProfile)) if road_class == RoadClass.Other else None
    return synth_clip(default_profile(road_class, sub), speed, seconds, seed).samples


class TestAcceptance:
    def test_01_fft_oracle(self, verdict):
        rng = np.random.default_rng(1)
        worst_bin, worst_parseval, dt = 0.0, 0.0, 0.0
        for i in range(200):
            n = (256, 1024)[i % 2]
            x = rng.standard_normal(n)
            t0 = time.perf_counter()
            X = fft(x)
            dt += time.perf_counter() - t0
            worst_bin = max(worst_bin, float(np.abs(X - naive_dft(x)).max()))
            energy = float(np.sum(x**2))
            worst_parseval = max(worst_parseval, abs(float(np.sum(np.abs(X) ** 2)) / n - energy) / energy)
        ok = worst_bin < 1e-9 and worst_parseval < 1e-9 and dt < 5.0
        verdict("1 FFT oracle", ok, f"max bin dev {worst_bin:.2e}, Parseval {worst_parseval:.2e}, FFT time {dt:.3f} s")

    def test_02_gradient_checks(self, verdict):
        t0 = time.perf_counter()
        errs = {arch: grad_check(arch, seed=0) for arch in ("cnn", "ast")}
        dt = time.perf_counter() - t0
        ok = max(errs.values()) < 1e-4 and dt < 60.0
        verdict("2 gradient checks", ok, f"cnn {errs['cnn']:.2e}, ast {errs['ast']:.2e}, {dt:.2f} s")

    def test_03_normalization(self, verdict):
        rng = np.random.default_rng(3)
        arch = AstArch()
        model = init_params(arch, seed=3)
        attn_dev, sm_dev = 0.0, 0.0
        for i in range(100):
            x = rng.normal(0.0, 1.0 + i / 10, (arch.in_h, 85))
            _, maps = ast_forward(model, x, return_attention=True)
            attn_dev = max(attn_dev, max(float(np.abs(a.sum(axis=-1) - 1.0).max()) for a in maps))
            logits = rng.normal(0.0, 10.0 ** (i % 4), 3)
            sm_dev = max(sm_dev, abs(float(nn.softmax(logits).sum()) - 1.0))
        ok = attn_dev <= 1e-6 and sm_dev <= 1e-12
        verdict("3 attention/softmax normalization", ok, f"attention {attn_dev:.1e}, softmax {sm_dev:.1e}")

    def test_04_speed_law(self, verdict):
        t0 = time.perf_counter()
        diffs = {}
        for profile in all_profiles():
            d = [
                band_level(synth_clip(profile, 80.0, 1.0, s), 50, 1000)
                - band_level(synth_clip(profile, 40.0, 1.0, s), 50, 1000)
                for s in range(20)
            ]
            diffs[(profile.sub_profile or profile.road_class).name] = float(np.mean(d))
        dt = time.perf_counter() - t0
        ok = all(5.5 <= v <= 6.5 for v in diffs.values()) and dt < 30.0
        detail = ", ".join(f"{k} {v:.2f} dB" for k, v in diffs.items())
        verdict("4 speed law", ok, f"{detail}; {dt:.1f} s")

    def test_05_surface_offset(self, verdict):
        rough, smooth = default_profile(RoadClass.RoughAsphalt), default_profile(RoadClass.SmoothAsphalt)
        levels = [
            band_level(synth_clip(rough, 60.0, 1.0, s), 50, 1000) - band_level(synth_clip(smooth, 60.0, 1.0, s), 50, 1000)
            for s in range(20)
        ]
        off = float(np.mean(levels))
        verdict("5 surface offset", 2.5 <= off <= 3.5, f"rough - smooth = {off:.2f} dB")

    def test_06_end_to_end_learning(self, verdict, corpora, cnn, ast):
        xt, yt = corpora["test"]
        _, acc_cnn = evaluate(cnn[0], xt, yt)
        _, acc_ast = evaluate(ast[0], xt, yt)
        total = corpora["seconds"] + cnn[1] + ast[1]
        ok = acc_cnn >= 0.90 and acc_ast >= 0.80 and total < 600.0
        verdict("6 end-to-end learning", ok, f"CNN {acc_cnn:.3f}, AST {acc_ast:.3f}, {total:.0f} s incl. corpus")

    def test_07_latency(self, verdict, cnn):
        clip = AudioClip(_steady(RoadClass.SmoothAsphalt, 3.0, 70.0, 7))
        stats = bench(cnn[0], clip, repetitions=30)
        ok = stats.p95_ms < 20.0 and stats.windows_measured == 30 * 9
        host = f"{platform.machine()} {platform.processor() or platform.system()}"
        verdict("7 latency", ok, f"p95 {stats.p95_ms:.2f} ms over {stats.windows_measured} windows ({host})")

    def test_08_memory(self, verdict, cnn, int8, tmp_path):
        f_size = save_model(cnn[0], tmp_path / "f.rnm1")
        q_size = save_model(int8, tmp_path / "q.rnm1")
        ok = f_size < 50 * 2**20 and q_size < 0.30 * f_size
        verdict("8 memory", ok, f"float {f_size} B, int8 {q_size} B ({100 * q_size / f_size:.1f} %)")

    def test_09_quantization(self, verdict, cnn, int8, corpora):
        xt, yt = corpora["test"]
        q = model_from_bytes(model_to_bytes(int8))
        pred_f = cnn[0].logits_batch(xt).argmax(axis=1)
        pred_q = q.logits_batch(xt).argmax(axis=1)
        acc_f, acc_q = float(np.mean(pred_f == yt)), float(np.mean(pred_q == yt))
        agree = float(np.mean(pred_f == pred_q))
        rng = np.random.default_rng(9)
        worst, checked = 0.0, 0
        for _ in range(1000):
            shape = tuple(rng.integers(1, 9, rng.integers(1, 4)))
            span = 10.0 ** rng.uniform(-3, 3)
            t = span * (rng.random(shape) - rng.random())
            qp = calibrate([t])
            # Only values inside the representable interval carry the bound.
            inside = (t >= qp.scale * (-128 - qp.zero_point)) & (t <= qp.scale * (127 - qp.zero_point))
            err = np.abs(dequantize(quantize_tensor(t, qp)) - t)[inside] / qp.scale
            worst = max(worst, float(err.max(initial=0.0)))
            checked += int(inside.sum())
        ok = abs(acc_f - acc_q) <= 0.02 and agree >= 0.97 and worst <= 0.5 + 1e-9
        verdict(
            "9 quantization", ok,
            f"float {acc_f:.3f}, int8 {acc_q:.3f}, agreement {agree:.3f} on {len(yt)} clips, round-trip {worst:.3f} scale over {checked} values",
        )

    def test_10_temporal_stability(self, verdict, cnn):
        config = StreamConfig()
        audio = np.concatenate(
            [_steady(RoadClass.SmoothAsphalt, 30.0, 70.0, 101), _steady(RoadClass.RoughAsphalt, 30.0, 70.0, 102)]
        )
        events, _ = classify_clip(cnn[0], AudioClip(audio), config)
        labels = [e.smoothed_label for e in events]
        flips = sum(a != b for a, b in zip(labels, labels[1:]))
        after = [e for e in events if e.smoothed_label == RoadClass.RoughAsphalt and e.t_end_s > 30.0]
        reaction = after[0].t_end_s - 30.0 if after else float("inf")
        settled = all(e.smoothed_label == RoadClass.RoughAsphalt for e in events if e.t_end_s >= 30.0 + reaction)

        steady, _ = classify_clip(cnn[0], AudioClip(_steady(RoadClass.SmoothAsphalt, 30.0, 55.0, 103)), config)
        k = config.smoothing_votes
        steady_ok = all(e.smoothed_label == RoadClass.SmoothAsphalt for e in steady[k:])

        ok = flips <= 2 and reaction <= 2.0 and settled and steady_ok and config.smoothing_span_s >= MIN_SMOOTHING_SPAN_S
        verdict(
            "10 temporal stability", ok,
            f"{flips} flips ({flip_rate(events):.2f}/min), reaction {reaction:.2f} s, "
            f"steady stream clean={steady_ok}, span {config.smoothing_span_s:.2f} s",
        )

    def test_11_determinism(self, verdict, cnn, tmp_path):
        def pipeline(d: Path) -> list[bytes]:
            assert run(["synth", "--out", str(d / "c"), "--clips-per-class", "20", "--seed", "11"]) == 0
            assert run(["features", "--manifest", str(d / "c"), "--out-dir", str(d / "f")]) == 0
            assert run(["train", "--manifest", str(d / "c"), "--epochs", "2", "--out", str(d / "m.rnm1"), "--seed", "11"]) == 0
            wav = d / "c" / "00030_smooth_asphalt.wav"
            assert run(["classify", "--model", str(d / "m.rnm1"), "--wav", str(wav), "--events", str(d / "e.jsonl"), "--no-latency"]) == 0
            feats = b"".join(p.read_bytes() for p in sorted((d / "f").glob("*.fm.csv")))
            return [feats, (d / "m.rnm1").read_bytes(), (d / "m.report.jsonl").read_bytes(), (d / "e.jsonl").read_bytes()]

        a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
        same_pipeline = a == b

        clip = AudioClip(_steady(RoadClass.Other, 3.0, 60.0, 11))
        runs = [[e.without_timing() for e in classify_clip(cnn[0], clip, chunk=c)[0]] for c in (1, 1024, 44100)]
        same_chunks = runs[0] == runs[1] == runs[2] and len(runs[0]) == 9
        verdict(
            "11 determinism", same_pipeline and same_chunks,
            f"pipeline byte-identical={same_pipeline}, chunk-size independent={same_chunks}",
        )
