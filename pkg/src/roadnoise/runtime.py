"""Streaming road-type classifier.

Audio is pushed into a single-producer/single-consumer ring buffer; every
hop the consumer classifies the latest full window and majority-votes the
last K raw decisions.  On overflow the oldest audio is dropped (the producer
never blocks) and the drop is counted.
"""

from __future__ import annotations

import json
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidModel, StreamClosed, UnsupportedRate
from .modelfile import serialized_size
from .signal import SAMPLE_RATE_HZ, AudioClip, FeatureConfig, extract_logmel
from .synth import RoadClass

MIN_SMOOTHING_SPAN_S = 0.050


@dataclass(frozen=True)
class StreamConfig:
    window_len_samples: int = 44100
    window_hop_samples: int = 11025
    ring_capacity_samples: int = 88200
    smoothing_votes: int = 5
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        if not 0 < self.window_hop_samples <= self.window_len_samples:
            raise InvalidArgument("window hop must be in (0, window length]")
        if self.ring_capacity_samples < 2 * self.window_len_samples:
            raise InvalidArgument("ring capacity must hold at least two windows")
        k = self.smoothing_votes
        if k < 1 or k % 2 == 0:
            raise InvalidArgument(f"smoothing_votes must be odd and >= 1, got {k}")
        if self.smoothing_span_s < MIN_SMOOTHING_SPAN_S:
            raise InvalidArgument(
                f"smoothing span {self.smoothing_span_s * 1000:.1f} ms is below the 50 ms decision horizon"
            )

    @property
    def smoothing_span_s(self) -> float:
        return self.smoothing_votes * self.window_hop_samples / self.sample_rate_hz

    @property
    def window_s(self) -> float:
        return self.window_len_samples / self.sample_rate_hz

    @property
    def hop_s(self) -> float:
        return self.window_hop_samples / self.sample_rate_hz


@dataclass(frozen=True)
class ClassificationEvent:
    t_start_s: float
    t_end_s: float
    raw_label: RoadClass
    smoothed_label: RoadClass
    probs: tuple[float, float, float]
    latency_ms: float

    def to_dict(self, with_latency: bool = True) -> dict:
        return {
            "t_start_s": self.t_start_s,
            "t_end_s": self.t_end_s,
            "raw_label": self.raw_label.slug,
            "smoothed_label": self.smoothed_label.slug,
            "probs": list(self.probs),
            "latency_ms": self.latency_ms if with_latency else 0.0,
        }

    def to_json(self, with_latency: bool = True) -> str:
        return json.dumps(self.to_dict(with_latency))

    def without_timing(self) -> tuple:
        return (self.t_start_s, self.t_end_s, self.raw_label, self.smoothed_label, self.probs)


@dataclass(frozen=True)
class LatencyStats:
    p50_ms: float
    p95_ms: float
    max_ms: float
    windows_measured: int
    model_footprint_bytes: int
    dropped_samples: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def smooth(history) -> RoadClass:
    """Majority vote over (label, probs) pairs.

    Ties go to the class with the highest mean own-probability over the entries
    that voted for it, then to class order.
    """
    history = list(history)
    if not history:
        raise InvalidArgument("cannot smooth an empty history")
    votes = Counter(int(label) for label, _ in history)
    top = max(votes.values())
    tied = sorted(c for c, n in votes.items() if n == top)
    if len(tied) == 1:
        return RoadClass(tied[0])

    def mean_prob(c: int) -> float:
        return float(np.mean([p[c] for label, p in history if int(label) == c]))

    best = max(tied, key=lambda c: (mean_prob(c), -c))
    return RoadClass(best)


def flip_rate(events) -> float:
    """Smoothed-label changes per minute; duration is events x hop."""
    events = list(events)
    if len(events) < 2:
        raise InvalidArgument("flip rate needs at least two events")
    flips = sum(a.smoothed_label != b.smoothed_label for a, b in zip(events, events[1:]))
    hop = events[1].t_start_s - events[0].t_start_s
    minutes = len(events) * hop / 60.0
    return flips / minutes


class ClassificationStream:
    """One microphone stream bound to one (float or int8) model."""

    def __init__(self, model, config: StreamConfig | None = None, features: FeatureConfig | None = None):
        self.config = config or StreamConfig()
        self.features = features or FeatureConfig()
        self.model = model
        cap = self.config.ring_capacity_samples
        self._ring = np.zeros(cap)
        self._lock = threading.Lock()
        self._write = 0  # absolute index of the next sample to be written
        self._read = 0  # absolute start of the next window
        self.dropped_samples = 0
        self.consumed_samples = 0
        self._history: deque = deque(maxlen=self.config.smoothing_votes)
        self._closed = False
        expected = self.features.n_frames(self.config.window_len_samples)
        try:
            model.logits_batch(np.zeros((1, self.features.n_mels, expected)))
        except InvalidArgument as exc:
            raise InvalidModel(f"model does not accept {self.features.n_mels}x{expected} windows: {exc}") from exc

    @property
    def pushed_samples(self) -> int:
        return self._write

    @property
    def buffered_samples(self) -> int:
        return self._write - self._read

    def close(self) -> None:
        self._closed = True

    def push_samples(self, samples) -> int:
        if self._closed:
            raise StreamClosed("stream is closed")
        x = np.asarray(samples, dtype=np.float64).ravel()
        n = len(x)
        if n == 0:
            return 0
        cap = self.config.ring_capacity_samples
        hop = self.config.window_hop_samples
        with self._lock:
            tail = x[-cap:]
            start = self._write + n - len(tail)
            idx = (start + np.arange(len(tail))) % cap
            self._ring[idx] = tail
            self._write += n
            if self._write - self._read > cap:
                # Keep windows hop-aligned to the stream origin after a drop.
                oldest = self._write - cap
                new_read = -(-oldest // hop) * hop
                self.dropped_samples += new_read - self._read
                self._read = new_read
        return n

    def _take_window(self) -> tuple[int, np.ndarray] | None:
        win = self.config.window_len_samples
        cap = self.config.ring_capacity_samples
        with self._lock:
            if self._write - self._read < win:
                return None
            start = self._read
            idx = (start + np.arange(win)) % cap
            return start, self._ring[idx].copy()

    def poll_event(self) -> ClassificationEvent | None:
        if self._closed:
            raise StreamClosed("stream is closed")
        taken = self._take_window()
        if taken is None:
            return None
        start, window = taken
        t0 = time.perf_counter()
        fm = extract_logmel(AudioClip(window, self.config.sample_rate_hz), self.features)
        probs = self.model.predict_proba(fm)
        latency_ms = (time.perf_counter() - t0) * 1000.0
        with self._lock:
            if self._read == start:
                self._read += self.config.window_hop_samples
                self.consumed_samples += self.config.window_hop_samples
        raw = RoadClass(int(np.argmax(probs)))
        self._history.append((raw, probs))
        fs = self.config.sample_rate_hz
        return ClassificationEvent(
            t_start_s=start / fs,
            t_end_s=(start + self.config.window_len_samples) / fs,
            raw_label=raw,
            smoothed_label=smooth(self._history),
            probs=tuple(float(p) for p in probs),
            latency_ms=latency_ms,
        )

    def drain(self) -> list[ClassificationEvent]:
        events = []
        while (ev := self.poll_event()) is not None:
            events.append(ev)
        return events


def classify_clip(
    model,
    clip: AudioClip,
    config: StreamConfig | None = None,
    chunk: int | None = None,
    features: FeatureConfig | None = None,
):
    """Replay a clip through a fresh stream in chunks, returning all events."""
    config = config or StreamConfig()
    if clip.sample_rate_hz != config.sample_rate_hz:
        raise UnsupportedRate(f"clip is {clip.sample_rate_hz} Hz, stream expects {config.sample_rate_hz} Hz")
    if len(clip.samples) < config.window_len_samples:
        raise InvalidArgument("clip shorter than one window")
    stream = ClassificationStream(model, config, features)
    chunk = chunk or config.window_hop_samples
    events = []
    for s in range(0, len(clip.samples), chunk):
        stream.push_samples(clip.samples[s : s + chunk])
        events.extend(stream.drain())
    return events, stream


def bench(
    model,
    clip: AudioClip,
    repetitions: int = 30,
    config: StreamConfig | None = None,
    features: FeatureConfig | None = None,
) -> LatencyStats:
    """Per-window feature extraction + inference latency over repeated replays."""
    config = config or StreamConfig()
    if repetitions < 30:
        raise InvalidArgument(f"bench needs >= 30 repetitions, got {repetitions}")
    if len(clip.samples) < config.window_len_samples:
        raise InvalidArgument("clip shorter than one window")
    latencies, dropped = [], 0
    for _ in range(repetitions):
        events, stream = classify_clip(model, clip, config, features=features)
        latencies.extend(e.latency_ms for e in events)
        dropped += stream.dropped_samples
    lat = np.array(latencies)
    return LatencyStats(
        p50_ms=float(np.percentile(lat, 50)),
        p95_ms=float(np.percentile(lat, 95)),
        max_ms=float(lat.max()),
        windows_measured=len(lat),
        model_footprint_bytes=serialized_size(model),
        dropped_samples=dropped,
    )
