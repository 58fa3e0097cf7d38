"""Parametric tyre/road noise synthesis and the labeled corpus writer.

A clip is white Gaussian noise shaped in the frequency domain into three
mechanisms: broadband tread impact (50-1000 Hz, tilted), air pumping
(1-4 kHz, flat) and a narrow Helmholtz cavity resonance.  Coarse surfaces
add amplitude modulation (cobbles) or band-limited impact bursts (joints,
pipes).  Levels are band powers in dB re. full scale at the reference speed;
the whole clip is then scaled by speed/ref_speed, i.e. +6.02 dB per doubling.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .rng import SplitMix64, derive_seed
from .signal import SAMPLE_RATE_HZ, AudioClip, fft, hann_window, ifft
from .wavio import write_wav

TREAD_BAND_HZ = (50.0, 1000.0)
PUMPING_BAND_HZ = (1000.0, 4000.0)
SPEED_RANGE_KMH = (40.0, 90.0)
REF_SPEED_KMH = 60.0
ROUGH_OVER_SMOOTH_DB = 3.0
PEAK_LIMIT = 0.9
LEVEL_FLOOR_DB = -200.0

SEGMENT_LEN = 8192
BURST_LEN = 1024
BURST_DECAY_S = 0.004
IMPULSE_POWER_RATIO = 0.5  # burst power relative to the noise bed, speed independent


class RoadClass(enum.IntEnum):
    RoughAsphalt = 0
    SmoothAsphalt = 1
    Other = 2

    @property
    def slug(self) -> str:
        return _CLASS_SLUGS[self]

    @classmethod
    def from_slug(cls, text: str) -> "RoadClass":
        for c, s in _CLASS_SLUGS.items():
            if s == text:
                return c
        raise InvalidArgument(f"unknown road class {text!r}")


_CLASS_SLUGS = {
    RoadClass.RoughAsphalt: "rough_asphalt",
    RoadClass.SmoothAsphalt: "smooth_asphalt",
    RoadClass.Other: "other",
}


class SubProfile(str, enum.Enum):
    ConcretePavement = "concrete_pavement"
    BelgianPavement = "belgian_pavement"
    ViennaPavement = "vienna_pavement"
    Pipes = "pipes"


OTHER_SUB_PROFILES = tuple(SubProfile)


@dataclass(frozen=True)
class Band:
    f_lo: float
    f_hi: float
    level_db_at_ref: float
    tilt_db_per_octave: float = 0.0


@dataclass(frozen=True)
class Resonance:
    center_hz: float = 225.0
    bandwidth_hz: float = 30.0
    level_db_at_ref: float = -38.0


@dataclass(frozen=True)
class SurfaceProfile:
    road_class: RoadClass
    sub_profile: SubProfile | None
    tread_band: Band
    pumping_band: Band
    helmholtz: Resonance
    am_rate_hz: float = 0.0
    am_depth: float = 0.0
    impulse_rate_per_s: float = 0.0
    impulse_periodic: bool = True
    ref_speed_kmh: float = REF_SPEED_KMH

    def __post_init__(self) -> None:
        if (self.tread_band.f_lo, self.tread_band.f_hi) != TREAD_BAND_HZ:
            raise InvalidArgument("tread band must be exactly 50-1000 Hz")
        if (self.pumping_band.f_lo, self.pumping_band.f_hi) != PUMPING_BAND_HZ:
            raise InvalidArgument("pumping band must be exactly 1000-4000 Hz")
        levels = (
            self.tread_band.level_db_at_ref,
            self.tread_band.tilt_db_per_octave,
            self.pumping_band.level_db_at_ref,
            self.helmholtz.level_db_at_ref,
        )
        if not all(math.isfinite(v) for v in levels):
            raise InvalidArgument("profile levels must be finite")
        if self.helmholtz.bandwidth_hz <= 0:
            raise InvalidArgument("Helmholtz bandwidth must be positive")
        if self.am_rate_hz < 0 or self.impulse_rate_per_s < 0:
            raise InvalidArgument("modulation and impulse rates must be >= 0")
        if not 0.0 <= self.am_depth < 1.0:
            raise InvalidArgument("am_depth must be in [0, 1)")
        if (self.sub_profile is None) != (self.road_class != RoadClass.Other):
            raise InvalidArgument("sub_profile is required for Other and forbidden otherwise")


def _profile(
    road_class: RoadClass,
    sub: SubProfile | None,
    tread_db: float,
    tilt: float,
    pump_offset_db: float,
    **extra,
) -> SurfaceProfile:
    # Helmholtz power tracks tread power so surface offsets hold for the whole band.
    return SurfaceProfile(
        road_class,
        sub,
        Band(*TREAD_BAND_HZ, tread_db, tilt),
        Band(*PUMPING_BAND_HZ, tread_db + pump_offset_db),
        Resonance(level_db_at_ref=tread_db - 4.0),
        **extra,
    )


_SMOOTH_TREAD_DB = -34.0

DEFAULT_PROFILES: dict[tuple[RoadClass, SubProfile | None], SurfaceProfile] = {
    (RoadClass.SmoothAsphalt, None): _profile(
        RoadClass.SmoothAsphalt, None, _SMOOTH_TREAD_DB, -6.0, -14.0
    ),
    (RoadClass.RoughAsphalt, None): _profile(
        RoadClass.RoughAsphalt, None, _SMOOTH_TREAD_DB + ROUGH_OVER_SMOOTH_DB, -3.0, -8.0
    ),
    (RoadClass.Other, SubProfile.ConcretePavement): _profile(
        RoadClass.Other, SubProfile.ConcretePavement, -32.0, -4.5, -11.0,
        impulse_rate_per_s=60.0 / 3.6 / 4.5,  # 4.5 m slab joints
    ),
    (RoadClass.Other, SubProfile.BelgianPavement): _profile(
        RoadClass.Other, SubProfile.BelgianPavement, -29.0, -1.0, -13.0,
        am_rate_hz=32.0, am_depth=0.6,
    ),
    (RoadClass.Other, SubProfile.ViennaPavement): _profile(
        RoadClass.Other, SubProfile.ViennaPavement, -30.0, -1.5, -15.0,
        am_rate_hz=30.0, am_depth=0.5,
    ),
    (RoadClass.Other, SubProfile.Pipes): _profile(
        RoadClass.Other, SubProfile.Pipes, -33.0, -5.0, -10.0,
        impulse_rate_per_s=4.0, impulse_periodic=False,
    ),
}


def default_profile(road_class: RoadClass, sub_profile: SubProfile | None = None) -> SurfaceProfile:
    road_class = RoadClass(road_class)
    if road_class == RoadClass.Other and sub_profile is None:
        raise InvalidArgument("class Other needs a sub_profile")
    if road_class != RoadClass.Other and sub_profile is not None:
        raise InvalidArgument(f"{road_class.name} takes no sub_profile")
    key = (road_class, SubProfile(sub_profile) if sub_profile is not None else None)
    return DEFAULT_PROFILES[key]


def all_profiles() -> list[SurfaceProfile]:
    return list(DEFAULT_PROFILES.values())


def _unit_components(profile: SurfaceProfile, freqs: np.ndarray) -> list[np.ndarray]:
    """Tread, pumping and resonance density shapes, each integrating to 1."""
    df = freqs[1] - freqs[0]
    tb = profile.tread_band
    in_tread = (freqs >= tb.f_lo) & (freqs < tb.f_hi)
    tread = np.where(
        in_tread,
        10.0 ** (tb.tilt_db_per_octave * np.log2(np.maximum(freqs, tb.f_lo) / tb.f_lo) / 10.0),
        0.0,
    )
    pb = profile.pumping_band
    pump = ((freqs >= pb.f_lo) & (freqs < pb.f_hi)).astype(float)
    hz = profile.helmholtz
    res = 1.0 / (1.0 + ((freqs - hz.center_hz) / (hz.bandwidth_hz / 2.0)) ** 2)
    res[0] = 0.0
    return [c / (c.sum() * df) for c in (tread, pump, res)]


@lru_cache(maxsize=8)
def _welch_leakage(n_fine: int, frame_len: int, fs: int) -> np.ndarray:
    """|W|^2 of the analysis Hann window at offsets that are multiples of fs/n_fine."""
    w = np.zeros(n_fine)
    w[:frame_len] = hann_window(frame_len)
    spec = fft(w)
    return (spec.real**2 + spec.imag**2) / np.sum(w[:frame_len] ** 2)


def expected_band_power(
    density: np.ndarray, fs: int, f_lo_hz: float, f_hi_hz: float, frame_len: int = 1024
) -> float:
    """Expectation of the band_level oracle's band power for a one-sided density.

    ``density`` is sampled on the n_fine/2 + 1 grid of an n_fine-point FFT, and
    n_fine must be a multiple of frame_len.
    """
    n_fine = 2 * (len(density) - 1)
    ratio = n_fine // frame_len
    df = fs / n_fine
    two_sided = np.concatenate((density, density[-2:0:-1])) / 2.0
    leak = _welch_leakage(n_fine, frame_len, fs)
    bins = np.arange(frame_len // 2 + 1)
    bin_freqs = bins * fs / frame_len
    sel = bins[(bin_freqs >= f_lo_hz) & (bin_freqs <= f_hi_hz)]
    m = np.arange(n_fine)
    total = 0.0
    for k in sel:
        ex2 = np.sum(two_sided * leak[(m - ratio * k) % n_fine]) * df  # E|X_k|^2 / sum(w^2)
        psd = ex2 / fs * (1.0 if k in (0, frame_len // 2) else 2.0)
        total += psd * fs / frame_len
    return float(total)


def _spectral_density(profile: SurfaceProfile, freqs: np.ndarray, fs: int) -> np.ndarray:
    """One-sided power density (full-scale^2 / Hz) at the reference speed.

    The tread level is the power the band_level oracle reports for 50-1000 Hz,
    resonance and pumping leakage included, so surface offsets hold as measured.
    """
    tread, pump, res = _unit_components(profile, freqs)
    pump = pump * 10.0 ** (profile.pumping_band.level_db_at_ref / 10.0)
    res = res * 10.0 ** (profile.helmholtz.level_db_at_ref / 10.0)
    lo, hi = TREAD_BAND_HZ
    target = 10.0 ** (profile.tread_band.level_db_at_ref / 10.0)
    rest = expected_band_power(pump + res, fs, lo, hi)
    gain = (target - rest) / expected_band_power(tread, fs, lo, hi)
    if gain <= 0.0:
        raise InvalidArgument("resonance/pumping power exceeds the tread band level")
    return gain * tread + pump + res


@lru_cache(maxsize=64)
def _shaping_filter(profile: SurfaceProfile, n: int, fs: int) -> np.ndarray:
    """Zero-phase magnitude response over the full n-point FFT grid."""
    freqs = np.arange(n // 2 + 1) * fs / n
    mag = np.sqrt(_spectral_density(profile, freqs, fs) * fs / 2.0)
    mag[0] = 0.0
    return np.concatenate((mag, mag[-2:0:-1]))


def _impulse_bed(
    profile: SurfaceProfile, speed_kmh: float, n: int, fs: int, rng: SplitMix64
) -> np.ndarray:
    out = np.zeros(n)
    rate = profile.impulse_rate_per_s * speed_kmh / profile.ref_speed_kmh
    if rate <= 0.0:
        return out
    period = fs / rate
    count = int(n / period) + 2
    phase = rng.uniform(1)[0] * period
    times = phase + period * np.arange(count)
    jitter = rng.uniform(count, -0.35, 0.35) * period
    if not profile.impulse_periodic:
        times = times + jitter
    energy = IMPULSE_POWER_RATIO * fs / rate
    t = np.arange(BURST_LEN) / fs
    envelope = np.exp(-t / BURST_DECAY_S)
    for start in np.round(times).astype(int):
        burst = rng.normal(BURST_LEN) * envelope
        burst *= math.sqrt(energy / np.sum(burst**2))
        lo, hi = max(start, 0), min(start + BURST_LEN, n)
        if lo < hi:
            out[lo:hi] += burst[lo - start : hi - start]
    return out


def synth_clip(
    profile: SurfaceProfile,
    speed_kmh: float,
    duration_s: float = 1.0,
    seed: int = 0,
    sample_rate_hz: int = SAMPLE_RATE_HZ,
) -> AudioClip:
    lo, hi = SPEED_RANGE_KMH
    if not lo <= speed_kmh <= hi:
        raise InvalidArgument(f"speed {speed_kmh} km/h outside [{lo}, {hi}]")
    if duration_s < 0.25:
        raise InvalidArgument(f"duration {duration_s} s is below the 0.25 s minimum")
    fs = sample_rate_hz
    n = int(round(duration_s * fs))
    rng = SplitMix64(derive_seed(seed, 0x5EED))

    seg, hop = SEGMENT_LEN, SEGMENT_LEN // 2
    total = -(-(n + 2 * seg) // hop) * hop
    bed = rng.normal(total)
    impulses = _impulse_bed(profile, speed_kmh, total, fs, rng)
    if impulses.any():
        bed = (bed + impulses) / math.sqrt(1.0 + IMPULSE_POWER_RATIO)

    window = hann_window(seg)
    starts = np.arange(0, total - seg + 1, hop)
    segments = np.lib.stride_tricks.sliding_window_view(bed, seg)[starts] * window
    shaped = ifft(fft(segments) * _shaping_filter(profile, seg, fs)).real
    y = np.zeros(total)
    for s, piece in zip(starts, shaped):
        y[s : s + seg] += piece
    x = y[seg : seg + n]

    if profile.am_rate_hz > 0 and profile.am_depth > 0:
        rate = profile.am_rate_hz * speed_kmh / profile.ref_speed_kmh
        phi = rng.uniform(1, 0.0, 2.0 * np.pi)[0]
        t = np.arange(n) / fs
        d = profile.am_depth
        x = x * (1.0 + d * np.sin(2.0 * np.pi * rate * t + phi)) / math.sqrt(1.0 + d * d / 2.0)

    x = x * (speed_kmh / profile.ref_speed_kmh)
    peak = float(np.max(np.abs(x))) if n else 0.0
    if peak > PEAK_LIMIT:
        x = x * (PEAK_LIMIT / peak)
    return AudioClip(x, fs)


def welch_psd(clip: AudioClip, frame_len: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Averaged one-sided PSD (Hann frames, 50 % overlap). Returns (freqs, psd)."""
    from .signal import frame_signal, power_spectrum

    fs = clip.sample_rate_hz
    if len(clip.samples) < frame_len:
        raise InvalidArgument(f"clip shorter than one {frame_len}-sample analysis frame")
    w = hann_window(frame_len)
    frames = frame_signal(clip.samples, frame_len, frame_len // 2)
    psd = power_spectrum(frames, w).mean(axis=0) / (fs * np.sum(w**2))
    psd[1:-1] *= 2.0
    freqs = np.arange(frame_len // 2 + 1) * fs / frame_len
    return freqs, psd


def band_level(clip: AudioClip, f_lo_hz: float, f_hi_hz: float) -> float:
    """Band power in dB (10 log10 of the PSD integrated over [f_lo, f_hi])."""
    nyquist = clip.sample_rate_hz / 2
    if not 0.0 <= f_lo_hz < f_hi_hz <= nyquist:
        raise InvalidArgument(f"invalid band [{f_lo_hz}, {f_hi_hz}] Hz for Nyquist {nyquist}")
    freqs, psd = welch_psd(clip)
    sel = (freqs >= f_lo_hz) & (freqs <= f_hi_hz)
    if not sel.any():
        raise InvalidArgument(f"band [{f_lo_hz}, {f_hi_hz}] Hz contains no analysis bin")
    power = float(psd[sel].sum() * (freqs[1] - freqs[0]))
    if power <= 0.0:
        return LEVEL_FLOOR_DB
    return max(LEVEL_FLOOR_DB, 10.0 * math.log10(power))


# --- corpus -----------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    clips_per_class: int
    out_dir: Path
    master_seed: int = 0
    duration_s: float = 1.0
    speed_range_kmh: tuple[float, float] = SPEED_RANGE_KMH

    def __post_init__(self) -> None:
        lo, hi = self.speed_range_kmh
        if not SPEED_RANGE_KMH[0] <= lo <= hi <= SPEED_RANGE_KMH[1]:
            raise InvalidArgument(f"speed range must lie within {SPEED_RANGE_KMH} km/h")
        if self.duration_s <= 0:
            raise InvalidArgument("duration_s must be positive")
        if self.clips_per_class < 1:
            raise InvalidArgument("clips_per_class must be >= 1")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: RoadClass
    sub_profile: SubProfile | None
    speed_kmh: float
    seed: int
    duration_s: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "path": self.path,
                "label": self.label.slug,
                "sub_profile": self.sub_profile.value if self.sub_profile else None,
                "speed_kmh": self.speed_kmh,
                "seed": self.seed,
                "duration_s": self.duration_s,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        sub = d.get("sub_profile")
        return cls(
            d["path"],
            RoadClass.from_slug(d["label"]),
            SubProfile(sub) if sub else None,
            float(d["speed_kmh"]),
            int(d["seed"]),
            float(d["duration_s"]),
        )


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    MANIFEST_NAME = "manifest.jsonl"

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def labels(self) -> list[RoadClass]:
        return [e.label for e in self.entries]

    def write(self, path: Path) -> None:
        path.write_text("".join(e.to_json() + "\n" for e in self.entries))

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / cls.MANIFEST_NAME
        entries = []
        for no, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidArgument(f"{path}:{no}: malformed manifest entry ({exc})") from exc
        return cls(entries, path.parent)


def corpus_plan(spec: SynthSpec) -> list[tuple[SurfaceProfile, ManifestEntry]]:
    """Deterministic (profile, entry) list; class-major, Other cycles sub-profiles."""
    plan = []
    index = 0
    for road_class in RoadClass:
        for j in range(spec.clips_per_class):
            sub = OTHER_SUB_PROFILES[j % len(OTHER_SUB_PROFILES)] if road_class == RoadClass.Other else None
            seed = derive_seed(spec.master_seed, index)
            speed = float(SplitMix64(seed).uniform(1, *spec.speed_range_kmh)[0])
            name = f"{index:05d}_{road_class.slug}.wav"
            entry = ManifestEntry(name, road_class, sub, speed, seed, spec.duration_s)
            plan.append((default_profile(road_class, sub), entry))
            index += 1
    return plan


def synth_corpus(
    spec: SynthSpec,
    profiles: dict | None = None,
    overwrite: bool = False,
) -> CorpusManifest:
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / CorpusManifest.MANIFEST_NAME
    existing = [p for p in out.iterdir() if p.suffix == ".wav" or p == manifest_path]
    if existing and not overwrite:
        raise InvalidArgument(f"{out} already contains a corpus; pass overwrite to replace it")
    entries = []
    for profile, entry in corpus_plan(spec):
        if profiles is not None:
            profile = profiles[(entry.label, entry.sub_profile)]
        clip = synth_clip(profile, entry.speed_kmh, entry.duration_s, entry.seed)
        write_wav(out / entry.path, clip)
        entries.append(entry)
    manifest = CorpusManifest(entries, out)
    manifest.write(manifest_path)
    return manifest


__all__ = [
    "RoadClass",
    "SubProfile",
    "SurfaceProfile",
    "Band",
    "Resonance",
    "SynthSpec",
    "ManifestEntry",
    "CorpusManifest",
    "default_profile",
    "all_profiles",
    "synth_clip",
    "band_level",
    "welch_psd",
    "synth_corpus",
]
