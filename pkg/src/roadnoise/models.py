"""CNN and toy Audio Spectrogram Transformer over log-mel inputs.

Parameters are plain ``dict[str, np.ndarray]`` (float64) keyed by the tensor
names used in model files.  ``Model`` bundles them with the architecture and
the input standardization learned at training time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import InvalidArgument
from .rng import SplitMix64
from .signal import FeatureMatrix

N_CLASSES = 3


@dataclass(frozen=True)
class CnnArch:
    in_h: int = 64
    in_w: int = 85
    conv1: int = 8
    conv2: int = 16
    hidden: int = 32
    n_classes: int = N_CLASSES

    kind = "cnn"

    @property
    def pooled(self) -> tuple[int, int]:
        return (self.in_h // 2) // 2, (self.in_w // 2) // 2

    @property
    def flat(self) -> int:
        h, w = self.pooled
        return self.conv2 * h * w

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1.w": (self.conv1, 1, 3, 3),
            "conv1.b": (self.conv1,),
            "conv2.w": (self.conv2, self.conv1, 3, 3),
            "conv2.b": (self.conv2,),
            "dense1.w": (self.flat, self.hidden),
            "dense1.b": (self.hidden,),
            "dense2.w": (self.hidden, self.n_classes),
            "dense2.b": (self.n_classes,),
        }


@dataclass(frozen=True)
class AstArch:
    in_h: int = 64
    in_w: int = 85
    patch: int = 16
    dim: int = 32
    heads: int = 2
    layers: int = 2
    mlp: int = 64
    n_classes: int = N_CLASSES

    kind = "ast"

    @property
    def n_freq(self) -> int:
        return self.in_h // self.patch

    @property
    def n_time(self) -> int:
        return self.in_w // self.patch

    @property
    def n_tokens(self) -> int:
        return self.n_freq * self.n_time + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d = self.dim
        s = {
            "patch.w": (self.patch * self.patch, d),
            "patch.b": (d,),
            "cls": (d,),
            "pos": (self.n_tokens, d),
        }
        for i in range(self.layers):
            p = f"blocks.{i}."
            s[p + "ln1.g"] = (d,)
            s[p + "ln1.b"] = (d,)
            for m in ("q", "k", "v", "o"):
                s[p + f"attn.w{m}"] = (d, d)
                s[p + f"attn.b{m}"] = (d,)
            s[p + "ln2.g"] = (d,)
            s[p + "ln2.b"] = (d,)
            s[p + "mlp.w1"] = (d, self.mlp)
            s[p + "mlp.b1"] = (self.mlp,)
            s[p + "mlp.w2"] = (self.mlp, d)
            s[p + "mlp.b2"] = (d,)
        s["final_ln.g"] = (d,)
        s["final_ln.b"] = (d,)
        s["head.w"] = (d, self.n_classes)
        s["head.b"] = (self.n_classes,)
        return s


Arch = CnnArch | AstArch

TINY_CNN = CnnArch(in_h=8, in_w=8, conv1=2, conv2=2, hidden=4)
TINY_AST = AstArch(in_h=4, in_w=8, patch=4, dim=8, heads=2, layers=1, mlp=16)


def arch_for(kind: str) -> Arch:
    if kind == "cnn":
        return CnnArch()
    if kind == "ast":
        return AstArch()
    raise InvalidArgument(f"unknown architecture {kind!r} (expected 'cnn' or 'ast')")


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:  # conv (F, C, kh, kw)
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    if name == "cls":
        return 1, shape[0]
    return shape[0], shape[1]


def _is_weight(name: str, shape: tuple[int, ...]) -> bool:
    return len(shape) >= 2 and name != "pos" or name == "cls"


@dataclass
class Model:
    arch: Arch
    params: dict[str, np.ndarray]
    norm_mean: np.ndarray = field(default=None)
    norm_std: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.norm_mean is None:
            self.norm_mean = np.zeros(self.arch.in_h)
        if self.norm_std is None:
            self.norm_std = np.ones(self.arch.in_h)

    @property
    def kind(self) -> str:
        return self.arch.kind

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.norm_mean[:, None]) / self.norm_std[:, None]

    def logits_batch(self, xs: np.ndarray) -> np.ndarray:
        """Logits for a (B, n_mels, n_frames) stack of raw log-mel features."""
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[1] != len(self.norm_mean):
            raise InvalidArgument(f"input shape {xs.shape} does not match a {len(self.norm_mean)}-band model")
        xs = self.standardize(xs)
        if self.kind == "cnn":
            return cnn_forward_batch(self.params, xs, self.arch)[0]
        return ast_forward_batch(self.params, xs, self.arch)[0]

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits_batch(_values(x)[None])[0])


def init_params(arch: str | Arch, seed: int = 0) -> Model:
    """Uniform Glorot weights; zero biases, LN beta and pos embeddings; LN gamma one."""
    arch = arch_for(arch) if isinstance(arch, str) else arch
    rng = SplitMix64(seed)
    params = {}
    for name, shape in arch.shapes().items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif _is_weight(name, shape):
            fan_in, fan_out = _fans(name, shape)
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(int(np.prod(shape)), -lim, lim).reshape(shape)
        else:
            params[name] = np.zeros(shape)
    return Model(arch, params)


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    return nn.softmax(np.asarray(logits, dtype=np.float64))


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


# --- CNN ----------------------------------------------------------------------


def _check_cnn(params: dict, xs: np.ndarray) -> None:
    if xs.ndim != 3:
        raise InvalidArgument(f"expected a (batch, mels, frames) input, got shape {xs.shape}")
    _, h, w = xs.shape
    c2 = params["conv2.w"].shape[0]
    flat = c2 * ((h // 2) // 2) * ((w // 2) // 2)
    if flat != params["dense1.w"].shape[0]:
        raise InvalidArgument(
            f"input {h}x{w} flattens to {flat} features, model expects {params['dense1.w'].shape[0]}"
        )


def cnn_forward_batch(params: dict, xs: np.ndarray, arch: CnnArch | None = None, keep: bool = False):
    """Returns (logits (B, 3), cache or None)."""
    xs = np.asarray(xs, dtype=np.float64)
    _check_cnn(params, xs)
    x0 = xs[:, None]
    a1, cols1 = nn.conv3x3_forward(x0, params["conv1.w"], params["conv1.b"])
    r1 = nn.relu(a1)
    p1, idx1 = nn.maxpool2x2_forward(r1)
    a2, cols2 = nn.conv3x3_forward(p1, params["conv2.w"], params["conv2.b"])
    r2 = nn.relu(a2)
    p2, idx2 = nn.maxpool2x2_forward(r2)
    flat = p2.reshape(len(xs), -1)
    h = flat @ params["dense1.w"] + params["dense1.b"]
    hr = nn.relu(h)
    logits = hr @ params["dense2.w"] + params["dense2.b"]
    if not keep:
        return logits, None
    cache = dict(
        x0=x0, a1=a1, cols1=cols1, r1=r1, idx1=idx1, p1=p1, a2=a2, cols2=cols2,
        r2=r2, idx2=idx2, p2=p2, flat=flat, h=h, hr=hr,
    )
    return logits, cache


def cnn_forward(params, x) -> np.ndarray:
    """Logits for one feature matrix (no input standardization)."""
    params = params.params if isinstance(params, Model) else params
    return cnn_forward_batch(params, _values(x)[None])[0][0]


# --- AST ----------------------------------------------------------------------


def patchify(xs: np.ndarray, patch: int, n_freq: int, n_time: int) -> np.ndarray:
    """(B, H, W) -> (B, n_freq*n_time, patch*patch); trailing columns are cropped."""
    b = xs.shape[0]
    x = xs[:, : n_freq * patch, : n_time * patch]
    x = x.reshape(b, n_freq, patch, n_time, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, n_freq * n_time, patch * patch)


def unpatchify(dp: np.ndarray, shape: tuple[int, ...], patch: int, n_freq: int, n_time: int) -> np.ndarray:
    b = dp.shape[0]
    d = dp.reshape(b, n_freq, n_time, patch, patch).transpose(0, 1, 3, 2, 4)
    out = np.zeros(shape)
    out[:, : n_freq * patch, : n_time * patch] = d.reshape(b, n_freq * patch, n_time * patch)
    return out


def _ast_geometry(params: dict, xs: np.ndarray) -> tuple[int, int, int]:
    if xs.ndim != 3:
        raise InvalidArgument(f"expected a (batch, mels, frames) input, got shape {xs.shape}")
    patch = int(round(np.sqrt(params["patch.w"].shape[0])))
    n_patches = params["pos"].shape[0] - 1
    _, h, w = xs.shape
    n_freq, n_time = h // patch, w // patch
    if n_freq * n_time != n_patches or h % patch:
        raise InvalidArgument(
            f"input {h}x{w} yields {n_freq}x{n_time} patches of {patch}, model expects {n_patches}"
        )
    return patch, n_freq, n_time


def ast_forward_batch(params: dict, xs: np.ndarray, arch: AstArch | None = None, keep: bool = False):
    """Returns (logits (B, 3), cache or None). cache['attn'] holds (B, heads, T, T) per layer."""
    xs = np.asarray(xs, dtype=np.float64)
    patch, n_freq, n_time = _ast_geometry(params, xs)
    heads = arch.heads if arch is not None else 2
    b = xs.shape[0]
    d = params["cls"].shape[0]
    dh = d // heads
    layers = sum(1 for k in params if k.endswith(".ln1.g"))

    pt = patchify(xs, patch, n_freq, n_time)
    emb = pt @ params["patch.w"] + params["patch.b"]
    z = np.concatenate((np.broadcast_to(params["cls"], (b, 1, d)), emb), axis=1) + params["pos"]
    t = z.shape[1]
    blocks = []
    for i in range(layers):
        p = f"blocks.{i}."
        h1, ln1 = nn.layernorm_forward(z, params[p + "ln1.g"], params[p + "ln1.b"])
        q = h1 @ params[p + "attn.wq"] + params[p + "attn.bq"]
        v = h1 @ params[p + "attn.wv"] + params[p + "attn.bv"]
        # The key bias adds the same q.bk to every score in a row, which softmax
        # ignores; scoring against unbiased keys keeps that exact in floating point.
        k = h1 @ params[p + "attn.wk"]
        qh, kh, vh = (m.reshape(b, t, heads, dh).transpose(0, 2, 1, 3) for m in (q, k, v))
        attn = nn.softmax(qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh))
        o = (attn @ vh).transpose(0, 2, 1, 3).reshape(b, t, d)
        z1 = z + o @ params[p + "attn.wo"] + params[p + "attn.bo"]
        h2, ln2 = nn.layernorm_forward(z1, params[p + "ln2.g"], params[p + "ln2.b"])
        u = h2 @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
        r = nn.relu(u)
        z2 = z1 + r @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        blocks.append(dict(h1=h1, ln1=ln1, qh=qh, kh=kh, vh=vh, attn=attn, o=o, h2=h2, ln2=ln2, u=u, r=r))
        z = z2
    zf, lnf = nn.layernorm_forward(z, params["final_ln.g"], params["final_ln.b"])
    c = zf[:, 0]
    logits = c @ params["head.w"] + params["head.b"]
    if not keep:
        return logits, None
    return logits, dict(
        pt=pt, blocks=blocks, lnf=lnf, c=c, z_out=z, x_shape=xs.shape,
        geometry=(patch, n_freq, n_time), heads=heads,
    )


def ast_forward(params, x, return_attention: bool = False):
    """Logits for one feature matrix; optionally also the per-layer attention maps."""
    arch = params.arch if isinstance(params, Model) else None
    params = params.params if isinstance(params, Model) else params
    logits, cache = ast_forward_batch(params, _values(x)[None], arch, keep=return_attention)
    if return_attention:
        return logits[0], [blk["attn"][0] for blk in cache["blocks"]]
    return logits[0]


def memory_footprint(model) -> int:
    """Exact size in bytes of the model's RNM1 serialization."""
    from .modelfile import serialized_size

    return serialized_size(model)
