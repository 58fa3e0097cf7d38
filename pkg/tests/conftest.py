from __future__ import annotations

import numpy as np
import pytest

from roadnoise.signal import AudioClip


def naive_dft(x: np.ndarray) -> np.ndarray:
    """O(n^2) DFT straight from the definition, used as an oracle."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    return x @ np.exp(-2j * np.pi * np.outer(k, k) / n)


def sine(freq_hz: float, n: int = 44100, fs: int = 44100, amp: float = 1.0) -> AudioClip:
    return AudioClip(amp * np.sin(2 * np.pi * freq_hz * np.arange(n) / fs), fs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
