"""Constant-Q spectrogram: 96 semitone bins from A1 (55 Hz), hop 1024 samples.

Each bin is a Hann-windowed complex exponential whose length is inversely
proportional to its center frequency (quality factor 1 / (2^(1/12) - 1)).
Kernels are applied in the frequency domain to FFT blocks centered on each
frame; the result equals the direct time-domain inner product.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..tensor import DimensionError
from .audio import SAMPLE_RATE, AudioBuffer

FMIN = 55.0
N_BINS = 96
BINS_PER_OCTAVE = 12
HOP = 1024
N_FRAMES = 128
Q_FACTOR = 1.0 / (2.0 ** (1.0 / BINS_PER_OCTAVE) - 1.0)
POWER_FLOOR = 1e-10
DYNAMIC_RANGE_DB = 80.0


@dataclass
class Spectrogram:
    values: np.ndarray  # (frames, bins)
    bin_freqs: np.ndarray
    hop: float  # seconds
    weighted: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape


def bin_frequencies(n_bins: int = N_BINS, fmin: float = FMIN, bins_per_octave: int = BINS_PER_OCTAVE) -> np.ndarray:
    return fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)


def kernel_lengths(sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return np.ceil(Q_FACTOR * sample_rate / bin_frequencies()).astype(int)


def time_kernel(k: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Complex kernel of bin ``k``, centered, scaled so a unit sine at the bin center gives magnitude 1."""
    f = bin_frequencies()[k]
    n = kernel_lengths(sample_rate)[k]
    w = np.hanning(n + 2)[1:-1]  # strictly positive taps
    t = np.arange(n) - (n - 1) / 2.0
    return 2.0 * w / w.sum() * np.exp(2j * np.pi * f * t / sample_rate)


@lru_cache(maxsize=4)
def _spectral_kernels(sample_rate: int):
    lengths = kernel_lengths(sample_rate)
    nfft = int(2 ** np.ceil(np.log2(lengths.max())))
    half = nfft // 2
    a = np.zeros((N_BINS, nfft), dtype=complex)
    for k in range(N_BINS):
        kern = time_kernel(k, sample_rate)
        start = half - len(kern) // 2
        a[k, start : start + len(kern)] = kern
    spec = np.conj(np.fft.fft(a, axis=1)) / nfft
    # a real block has X[nfft - m] = conj(X[m]); split the inner product over the
    # non-negative bins and their mirrored negative counterparts
    pos = np.ascontiguousarray(spec[:, : half + 1].T)
    neg = np.ascontiguousarray(spec[:, nfft - np.arange(1, half)].T)
    return nfft, pos, neg


def cqt_frames(samples: np.ndarray, sample_rate: int = SAMPLE_RATE, hop: int = HOP) -> np.ndarray:
    """Complex CQT of every frame centered at ``t * hop``, shape ``(1 + len // hop, 96)``."""
    samples = np.asarray(samples, dtype=np.float64)
    longest = kernel_lengths(sample_rate).max()
    if len(samples) < longest:
        raise DimensionError(f"audio has {len(samples)} samples, shorter than the longest CQT kernel ({longest})")
    nfft, pos, neg = _spectral_kernels(sample_rate)
    half = nfft // 2
    padded = np.pad(samples, (half, half))
    n_frames = 1 + len(samples) // hop
    out = np.empty((n_frames, N_BINS), dtype=complex)
    step = 64  # frames per FFT block, bounds memory
    for s in range(0, n_frames, step):
        idx = np.arange(s, min(s + step, n_frames))
        blocks = np.lib.stride_tricks.sliding_window_view(padded, nfft)[idx * hop]
        spec = np.fft.rfft(blocks, axis=1)
        out[idx] = spec @ pos + np.conj(spec[:, 1:half]) @ neg
    return out


def fix_length(values: np.ndarray, n_frames: int = N_FRAMES) -> np.ndarray:
    """Center-crop or symmetrically zero-pad along the frame axis."""
    n = values.shape[0]
    if n >= n_frames:
        s = (n - n_frames) // 2
        return values[s : s + n_frames]
    before = (n_frames - n) // 2
    return np.pad(values, ((before, n_frames - n - before), (0, 0)))


def cqt(audio: AudioBuffer, n_frames: int | None = N_FRAMES) -> Spectrogram:
    """Magnitude constant-Q spectrogram, ``(n_frames, 96)``; ``n_frames=None`` keeps every frame."""
    mag = np.abs(cqt_frames(audio.samples, audio.sample_rate))
    if n_frames is not None:
        mag = fix_length(mag, n_frames)
    return Spectrogram(mag, bin_frequencies(), HOP / audio.sample_rate)


def a_weighting(freqs) -> np.ndarray:
    """A-weighting gain in dB, normalized to exactly 0 dB at 1 kHz."""
    f2 = np.asarray(freqs, dtype=np.float64) ** 2

    def ra(f2):
        num = 12194.0**2 * f2**2
        den = (f2 + 20.6**2) * np.sqrt((f2 + 107.7**2) * (f2 + 737.9**2)) * (f2 + 12194.0**2)
        return num / den

    return 20.0 * np.log10(ra(f2) / ra(1000.0**2))


def weight_magnitudes(mag: np.ndarray, bin_freqs: np.ndarray, top_db: float = DYNAMIC_RANGE_DB) -> np.ndarray:
    db = 10.0 * np.log10(np.asarray(mag, dtype=np.float64) ** 2 + POWER_FLOOR) + a_weighting(bin_freqs)
    return np.maximum(db, db.max() - top_db)


def perceptual_weighting(spec: Spectrogram, top_db: float = DYNAMIC_RANGE_DB) -> Spectrogram:
    """Power in dB plus A-weighting per bin, clipped to ``top_db`` below the maximum."""
    if np.any(spec.values < 0):
        raise ValueError("perceptual weighting expects nonnegative magnitudes")
    values = weight_magnitudes(spec.values, spec.bin_freqs, top_db)
    return Spectrogram(values, spec.bin_freqs, spec.hop, weighted=True, meta=dict(spec.meta))
