"""From-scratch training: cross-entropy, reverse-mode passes, momentum SGD."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import InvalidArgument, TrainingDiverged
from .models import (
    TINY_AST,
    TINY_CNN,
    Arch,
    AstArch,
    Model,
    arch_for,
    ast_forward_batch,
    cnn_forward_batch,
    init_params,
)
from .rng import SplitMix64, derive_seed
from .signal import FeatureConfig, extract_logmel
from .synth import CorpusManifest, RoadClass
from .wavio import read_wav

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
STD_FLOOR = 1e-8


def cross_entropy(probs, label: int) -> float:
    return -math.log(max(float(np.asarray(probs)[int(label)]), PROB_FLOOR))


def batch_loss(model_params: dict, arch: Arch, xs: np.ndarray, ys: np.ndarray) -> float:
    fwd = cnn_forward_batch if arch.kind == "cnn" else ast_forward_batch
    logits = fwd(model_params, xs, arch)[0]
    probs = nn.softmax(logits)
    p = np.maximum(probs[np.arange(len(ys)), ys], PROB_FLOOR)
    return float(-np.log(p).mean())


def _dlogits(logits: np.ndarray, ys: np.ndarray) -> np.ndarray:
    g = nn.softmax(logits)
    g[np.arange(len(ys)), ys] -= 1.0
    return g / len(ys)


def _cnn_backward(params: dict, xs: np.ndarray, ys: np.ndarray) -> tuple[float, dict]:
    logits, c = cnn_forward_batch(params, xs, keep=True)
    dl = _dlogits(logits, ys)
    g = {}
    g["dense2.w"] = c["hr"].T @ dl
    g["dense2.b"] = dl.sum(axis=0)
    dh = (dl @ params["dense2.w"].T) * (c["h"] > 0)
    g["dense1.w"] = c["flat"].T @ dh
    g["dense1.b"] = dh.sum(axis=0)
    dp2 = (dh @ params["dense1.w"].T).reshape(c["p2"].shape)
    da2 = nn.maxpool2x2_backward(dp2, c["idx2"], c["r2"].shape) * (c["a2"] > 0)
    dp1, g["conv2.w"], g["conv2.b"] = nn.conv3x3_backward(da2, c["cols2"], c["p1"].shape, params["conv2.w"])
    da1 = nn.maxpool2x2_backward(dp1, c["idx1"], c["r1"].shape) * (c["a1"] > 0)
    _, g["conv1.w"], g["conv1.b"] = nn.conv3x3_backward(da1, c["cols1"], c["x0"].shape, params["conv1.w"])
    return _mean_ce(logits, ys), g


def _sum_bt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum over batch and token axes of a^T b: (B,T,m), (B,T,n) -> (m, n)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _ast_backward(params: dict, xs: np.ndarray, ys: np.ndarray, arch: AstArch) -> tuple[float, dict]:
    logits, c = ast_forward_batch(params, xs, arch, keep=True)
    b = len(ys)
    heads = c["heads"]
    d = params["cls"].shape[0]
    dh_ = d // heads
    dl = _dlogits(logits, ys)
    g = {}
    g["head.w"] = c["c"].T @ dl
    g["head.b"] = dl.sum(axis=0)
    dzf = np.zeros(c["z_out"].shape)
    dzf[:, 0] = dl @ params["head.w"].T
    dz, g["final_ln.g"], g["final_ln.b"] = nn.layernorm_backward(dzf, c["lnf"], params["final_ln.g"])
    t = dz.shape[1]
    for i in reversed(range(len(c["blocks"]))):
        p = f"blocks.{i}."
        k = c["blocks"][i]
        # MLP residual branch
        g[p + "mlp.w2"] = _sum_bt(k["r"], dz)
        g[p + "mlp.b2"] = dz.sum(axis=(0, 1))
        du = (dz @ params[p + "mlp.w2"].T) * (k["u"] > 0)
        g[p + "mlp.w1"] = _sum_bt(k["h2"], du)
        g[p + "mlp.b1"] = du.sum(axis=(0, 1))
        dx, g[p + "ln2.g"], g[p + "ln2.b"] = nn.layernorm_backward(
            du @ params[p + "mlp.w1"].T, k["ln2"], params[p + "ln2.g"]
        )
        dz1 = dz + dx
        # attention residual branch
        g[p + "attn.wo"] = _sum_bt(k["o"], dz1)
        g[p + "attn.bo"] = dz1.sum(axis=(0, 1))
        do = (dz1 @ params[p + "attn.wo"].T).reshape(b, t, heads, dh_).transpose(0, 2, 1, 3)
        attn = k["attn"]
        da = do @ k["vh"].transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ do
        ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True)) / np.sqrt(dh_)
        dq = ds @ k["kh"]
        dk = ds.transpose(0, 1, 3, 2) @ k["qh"]
        dh1 = np.zeros((b, t, d))
        for name, gh in (("q", dq), ("k", dk), ("v", dv)):
            gm = gh.transpose(0, 2, 1, 3).reshape(b, t, d)
            g[p + f"attn.w{name}"] = _sum_bt(k["h1"], gm)
            g[p + f"attn.b{name}"] = gm.sum(axis=(0, 1))
            dh1 += gm @ params[p + f"attn.w{name}"].T
        dx, g[p + "ln1.g"], g[p + "ln1.b"] = nn.layernorm_backward(dh1, k["ln1"], params[p + "ln1.g"])
        dz = dz1 + dx
    g["pos"] = dz.sum(axis=0)
    g["cls"] = dz[:, 0].sum(axis=0)
    demb = dz[:, 1:]
    g["patch.w"] = _sum_bt(c["pt"], demb)
    g["patch.b"] = demb.sum(axis=(0, 1))
    return _mean_ce(logits, ys), g


def _mean_ce(logits: np.ndarray, ys: np.ndarray) -> float:
    probs = nn.softmax(logits)
    return float(-np.log(np.maximum(probs[np.arange(len(ys)), ys], PROB_FLOOR)).mean())


def backward(model: Model, xs: np.ndarray, ys) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch cross-entropy and its exact gradient for every parameter tensor.

    ``xs`` are inputs as seen by the network (already standardized).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    if len(xs) == 0 or len(xs) != len(ys):
        raise InvalidArgument(f"batch needs matching non-empty inputs/labels, got {len(xs)}/{len(ys)}")
    if model.kind == "cnn":
        loss, g = _cnn_backward(model.params, xs, ys)
    else:
        loss, g = _ast_backward(model.params, xs, ys, model.arch)
    return loss, {k: g[k] for k in model.params}


def _kink_margin(model: Model, xs: np.ndarray) -> float:
    """Distance of the nearest ReLU input or max-pool decision from its switch point."""
    if model.kind == "cnn":
        _, c = cnn_forward_batch(model.params, xs, keep=True)
        margins = [np.abs(c["a1"]).min(), np.abs(c["a2"]).min(), np.abs(c["h"]).min()]
        for r in (c["r1"], c["r2"]):
            b, ch, h, w = r.shape
            blocks = r[:, :, : h // 2 * 2, : w // 2 * 2].reshape(b, ch, h // 2, 2, w // 2, 2)
            blocks = np.sort(blocks.transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4), axis=1)
            live = blocks[:, -1] > 0
            if live.any():
                margins.append((blocks[live, -1] - blocks[live, -2]).min())
        return float(min(margins))
    _, c = ast_forward_batch(model.params, xs, model.arch, keep=True)
    return float(min(np.abs(blk["u"]).min() for blk in c["blocks"]))


def grad_check(arch: str, seed: int = 0, step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients on a tiny model.

    Setups where a ReLU or max-pool decision lies within 10 steps of switching
    are redrawn (deterministically), since finite differences are meaningless
    across a kink.
    """
    tiny = {"cnn": TINY_CNN, "ast": TINY_AST}.get(arch)
    if tiny is None:
        raise InvalidArgument(f"unknown architecture {arch!r}")
    for attempt in range(1000):
        model = init_params(tiny, derive_seed(seed, attempt))
        rng = SplitMix64(derive_seed(seed, 0x6C4EC, attempt))
        # Move every tensor off its init value so biases, gamma and pos all carry signal.
        for k, v in model.params.items():
            model.params[k] = v + 0.2 * rng.normal(v.size).reshape(v.shape)
        xs = rng.normal(3 * tiny.in_h * tiny.in_w).reshape(3, tiny.in_h, tiny.in_w)
        if _kink_margin(model, xs) > 10 * step:
            break
    ys = np.array([0, 1, 2])
    _, analytic = backward(model, xs, ys)
    worst = 0.0
    for name, tensor in model.params.items():
        flat = tensor.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = batch_loss(model.params, tiny, xs, ys)
            flat[i] = orig - step
            lm = batch_loss(model.params, tiny, xs, ys)
            flat[i] = orig
            num = (lp - lm) / (2.0 * step)
            err = abs(ga[i] - num) / max(1e-8, abs(ga[i]) + abs(num))
            worst = max(worst, err)
    return worst


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float):
    """v <- momentum*v - lr*g; theta <- theta + v. Returns new (params, velocity)."""
    new_p, new_v = {}, {}
    for k, theta in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != theta.shape:
            raise InvalidArgument(f"gradient for {k!r} has shape {g.shape}, expected {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in tensor {k!r}")
        v = momentum * velocity.get(k, 0.0) - lr * g
        new_v[k] = v
        new_p[k] = theta + v
    return new_p, new_v


# --- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "cnn"
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        arch_for(self.arch)
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if not 0 < self.val_fraction < 0.5:
            raise InvalidArgument("val_fraction must be in (0, 0.5)")
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.epochs)


def load_examples(manifest: CorpusManifest, config: FeatureConfig | None = None):
    """(N, n_mels, n_frames) raw log-mel features and integer labels for a manifest."""
    feats = [extract_logmel(read_wav(manifest.resolve(e)), config).values for e in manifest.entries]
    return np.stack(feats), np.array([int(e.label) for e in manifest.entries])


def stratified_split(ys: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = SplitMix64(derive_seed(seed, 0x5B117))
    train_idx, val_idx = [], []
    for cls in range(len(RoadClass)):
        idx = np.flatnonzero(ys == cls)
        idx = idx[rng.permutation(len(idx))]
        n_val = max(1, int(round(len(idx) * val_fraction)))
        train_idx.append(idx[:-n_val])
        val_idx.append(idx[-n_val:])
    return np.concatenate(train_idx), np.concatenate(val_idx)


def evaluate(model: Model, xs: np.ndarray, ys: np.ndarray, batch: int = 64) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) of a model over raw features."""
    losses, correct = 0.0, 0
    for s in range(0, len(xs), batch):
        logits = model.logits_batch(xs[s : s + batch])
        probs = nn.softmax(logits)
        yb = ys[s : s + batch]
        losses += float(-np.log(np.maximum(probs[np.arange(len(yb)), yb], PROB_FLOOR)).sum())
        correct += int((probs.argmax(axis=1) == yb).sum())
    return losses / len(xs), correct / len(xs)


def train_arrays(config: TrainConfig, xs: np.ndarray, ys: np.ndarray) -> tuple[TrainReport, Model]:
    ys = np.asarray(ys, dtype=np.int64)
    counts = np.bincount(ys, minlength=len(RoadClass))
    if np.count_nonzero(counts) < 2:
        raise InvalidArgument("training data covers fewer than two classes")
    if counts.min() < config.batch_size:
        raise InvalidArgument(
            f"need >= batch_size ({config.batch_size}) examples per class, got {counts.tolist()}"
        )
    tr, va = stratified_split(ys, config.val_fraction, config.seed)
    arch = arch_for(config.arch)
    arch = type(arch)(**{**asdict(arch), "in_h": xs.shape[1], "in_w": xs.shape[2]})
    model = init_params(arch, derive_seed(config.seed, 0x1A17))
    model.norm_mean = xs[tr].mean(axis=(0, 2))
    model.norm_std = np.maximum(xs[tr].std(axis=(0, 2)), STD_FLOOR)
    xs_tr = model.standardize(xs[tr])
    ys_tr = ys[tr]

    report = TrainReport()
    best_acc, best_params = -1.0, None
    velocity: dict = {}
    for epoch in range(config.epochs):
        order = SplitMix64(derive_seed(config.seed, 0xE90C, epoch)).permutation(len(tr))
        for s in range(0, len(order), config.batch_size):
            bi = order[s : s + config.batch_size]
            loss, grads = backward(model, xs_tr[bi], ys_tr[bi])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch + 1}")
            model.params, velocity = sgd_step(model.params, grads, velocity, config.learning_rate, config.momentum)
        train_loss, train_acc = evaluate(model, xs[tr], ys[tr])
        val_loss, val_acc = evaluate(model, xs[va], ys[va])
        for v in (train_loss, val_loss):
            if not math.isfinite(v):
                raise TrainingDiverged(f"loss became {v} in epoch {epoch + 1}")
        row = dict(epoch=epoch + 1, train_loss=train_loss, train_acc=train_acc, val_loss=val_loss, val_acc=val_acc)
        report.epochs.append(row)
        log.info("epoch %d train_loss=%.4f train_acc=%.3f val_loss=%.4f val_acc=%.3f", *row.values())
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: v.copy() for k, v in model.params.items()}
            report.best_epoch = epoch + 1
    model.params = best_params
    return report, model


def train(config: TrainConfig, manifest: CorpusManifest, features: FeatureConfig | None = None):
    xs, ys = load_examples(manifest, features)
    return train_arrays(config, xs, ys)
