"""DSP front end: Hann window, radix-2 FFT, power spectrum and log-mel features."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidArgument, UnsupportedRate

SAMPLE_RATE_HZ = 44100


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise InvalidArgument("audio clip must be mono (1-D samples)")
        if self.sample_rate_hz <= 0:
            raise InvalidArgument("sample rate must be positive")
        if not np.all(np.isfinite(s)):
            raise InvalidArgument("audio samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class FeatureConfig:
    frame_len: int = 1024
    hop: int = 512
    n_mels: int = 64
    f_min_hz: float = 50.0
    f_max_hz: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if not _is_pow2(self.frame_len):
            raise InvalidArgument(f"frame_len must be a power of two, got {self.frame_len}")
        if not 0 < self.hop <= self.frame_len:
            raise InvalidArgument(f"hop must satisfy 0 < hop <= frame_len, got {self.hop}")
        if self.n_mels < 2:
            raise InvalidArgument(f"n_mels must be >= 2, got {self.n_mels}")
        if not 0.0 <= self.f_min_hz < self.f_max_hz:
            raise InvalidArgument("frequency range must satisfy 0 <= f_min_hz < f_max_hz")
        if not self.log_floor > 0.0:
            raise InvalidArgument("log_floor must be positive")

    def validate_rate(self, sample_rate_hz: int) -> None:
        if self.f_max_hz > sample_rate_hz / 2:
            raise InvalidArgument(
                f"f_max_hz={self.f_max_hz} exceeds Nyquist ({sample_rate_hz / 2} Hz)"
            )

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame_len) // self.hop


@dataclass(frozen=True)
class FeatureMatrix:
    """n_mels x n_frames natural-log mel energies."""

    values: np.ndarray
    config: FeatureConfig = field(default_factory=FeatureConfig)

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def to_csv(self) -> str:
        lines = [f"{self.n_mels},{self.n_frames}"]
        for row in self.values:
            lines.append(",".join(f"{v:.9g}" for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, config: FeatureConfig | None = None) -> "FeatureMatrix":
        rows = [ln for ln in text.splitlines() if ln.strip()]
        n_mels, n_frames = (int(v) for v in rows[0].split(","))
        values = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        if values.shape != (n_mels, n_frames):
            raise InvalidArgument(f"feature dump shape {values.shape} != header {(n_mels, n_frames)}")
        return cls(values, config or FeatureConfig())


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    if n < 1:
        raise InvalidArgument(f"window length must be >= 1, got {n}")
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


@lru_cache(maxsize=32)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    half = size // 2
    return np.exp(-2j * np.pi * np.arange(half) / size)


def fft(x) -> np.ndarray:
    """Unnormalized forward DFT along the last axis (iterative radix-2).

    Leading axes are treated as a batch, so a whole STFT can be done in one call.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise InvalidArgument(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    y = x[..., _bit_reverse(n)]
    size = 2
    while size <= n:
        half = size // 2
        y = y.reshape(*lead, n // size, size)
        even = y[..., :half]
        odd = y[..., half:] * _twiddles(size)
        y = np.concatenate((even + odd, even - odd), axis=-1)
        size *= 2
    return y.reshape(*lead, n)


def ifft(x) -> np.ndarray:
    """Inverse of fft (includes the 1/n factor)."""
    x = np.asarray(x, dtype=np.complex128)
    return np.conj(fft(np.conj(x))) / x.shape[-1]


def power_spectrum(frame, window) -> np.ndarray:
    """One-sided |FFT(window * frame)|^2, bins 0..n/2, no scaling.

    Accepts a single frame or a stack of frames (last axis = time).
    """
    frame = np.asarray(frame, dtype=np.float64)
    window = np.asarray(window, dtype=np.float64)
    if frame.shape[-1] != window.shape[-1]:
        raise InvalidArgument(
            f"frame length {frame.shape[-1]} != window length {window.shape[-1]}"
        )
    n = frame.shape[-1]
    spec = fft(frame * window)[..., : n // 2 + 1]
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(config: FeatureConfig) -> np.ndarray:
    """n_mels + 2 corner frequencies (Hz); filter i peaks at edges[i + 1]."""
    m = np.linspace(hz_to_mel(config.f_min_hz), hz_to_mel(config.f_max_hz), config.n_mels + 2)
    return mel_to_hz(m)


@lru_cache(maxsize=16)
def _cached_filterbank(config: FeatureConfig, sample_rate_hz: int) -> np.ndarray:
    edges = mel_band_edges(config)
    freqs = np.arange(config.frame_len // 2 + 1) * sample_rate_hz / config.frame_len
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(config: FeatureConfig, sample_rate_hz: int = SAMPLE_RATE_HZ) -> np.ndarray:
    """Triangular mel filters evaluated at the FFT bin frequencies.

    Returns an n_mels x (frame_len/2 + 1) matrix.
    """
    config.validate_rate(sample_rate_hz)
    fb = _cached_filterbank(config, sample_rate_hz)
    empty = np.flatnonzero(fb.sum(axis=1) <= 0.0)
    if empty.size:
        raise InvalidArgument(
            f"mel filters {empty.tolist()} cover no FFT bin; widen the band or lengthen frame_len"
        )
    return fb


def frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(samples) - frame_len) // hop
    view = np.lib.stride_tricks.sliding_window_view(samples, frame_len)
    return view[: (n_frames - 1) * hop + 1 : hop]


def extract_logmel(clip: AudioClip, config: FeatureConfig | None = None) -> FeatureMatrix:
    config = config or FeatureConfig()
    if clip.sample_rate_hz != SAMPLE_RATE_HZ:
        raise UnsupportedRate(f"expected {SAMPLE_RATE_HZ} Hz audio, got {clip.sample_rate_hz} Hz")
    if len(clip.samples) < config.frame_len:
        raise InvalidArgument(
            f"clip has {len(clip.samples)} samples, shorter than one frame ({config.frame_len})"
        )
    fb = mel_filterbank(config, clip.sample_rate_hz)
    frames = frame_signal(clip.samples, config.frame_len, config.hop)
    power = power_spectrum(frames, hann_window(config.frame_len))
    mel = power @ fb.T  # (n_frames, n_mels)
    values = np.log(np.maximum(config.log_floor, mel)).T
    return FeatureMatrix(np.ascontiguousarray(values), config)
