"""16-bit PCM mono WAV read/write (stdlib ``wave`` container handling)."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .signal import SAMPLE_RATE_HZ, AudioClip

PCM_SCALE = 32767


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def float_to_pcm16(samples: np.ndarray) -> bytes:
    q = np.clip(round_half_away(np.asarray(samples) * PCM_SCALE), -32768, 32767)
    return q.astype("<i2").tobytes()


def pcm16_to_float(data: bytes) -> np.ndarray:
    if len(data) % 2:
        raise InvalidArgument("16-bit PCM data has an odd number of bytes")
    return np.frombuffer(data, dtype="<i2").astype(np.float64) / PCM_SCALE


def write_wav(path: str | Path, clip: AudioClip) -> None:
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate_hz)
        wf.writeframes(float_to_pcm16(clip.samples))


def read_wav(path: str | Path) -> AudioClip:
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            data = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InvalidArgument(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if channels != 1 or width != 2:
        raise InvalidArgument(
            f"{path}: expected mono 16-bit PCM, got {channels} channel(s) x {8 * width} bit"
        )
    return AudioClip(pcm16_to_float(data), rate)


__all__ = ["read_wav", "write_wav", "float_to_pcm16", "pcm16_to_float", "SAMPLE_RATE_HZ"]
