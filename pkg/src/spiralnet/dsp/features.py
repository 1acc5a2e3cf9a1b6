"""Frame-level features: mel cepstrum, spectral shape, zero-crossing rate, silence."""
from __future__ import annotations

import warnings

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer

FRAME_LENGTH = 2048
HOP_LENGTH = 1024
N_MELS = 40
ROLLOFF = 0.85
SILENCE_DB = -60.0
LOG_FLOOR = 1e-10


def frame_signal(x: np.ndarray, frame_length: int = FRAME_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Frames ``(n, frame_length)`` with no padding, the leftover samples split evenly at both ends.

    The frame set of a time-reversed signal is then the reversed frame set of
    the original whenever the leftover is even, so order-free statistics are
    unchanged by reversal.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < frame_length:
        return np.pad(x, (0, frame_length - len(x)))[None]
    n = 1 + (len(x) - frame_length) // hop
    lead = (len(x) - frame_length - (n - 1) * hop) // 2
    return np.lib.stride_tricks.sliding_window_view(x[lead:], frame_length)[: n * hop : hop][:n]


def centered_frames(x: np.ndarray, frame_length: int = FRAME_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Frames centered at ``t * hop`` (zero padded), aligned with the CQT frame grid."""
    x = np.asarray(x, dtype=np.float64)
    padded = np.pad(x, (frame_length // 2, frame_length // 2))
    n = 1 + len(x) // hop
    return np.lib.stride_tricks.sliding_window_view(padded, frame_length)[: n * hop : hop][:n]


def _window(frame_length):
    return np.hanning(frame_length)  # symmetric


def magnitude_spectrum(frames: np.ndarray) -> np.ndarray:
    return np.abs(np.fft.rfft(frames * _window(frames.shape[1]), axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = FRAME_LENGTH, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters ``(n_mels, n_fft // 2 + 1)`` evenly spaced on the mel scale from 0 Hz to Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix, rows indexed by quefrency."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def log_mel(frames: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    power = magnitude_spectrum(frames) ** 2
    fb = mel_filterbank(N_MELS, frames.shape[1], sample_rate)
    return np.log(power @ fb.T + LOG_FLOOR)


def cepstrum(log_mel_frames: np.ndarray, n_keep: int) -> np.ndarray:
    """Quefrencies 1..n_keep of the orthonormal DCT-II (the DC term is dropped)."""
    m = dct_matrix(log_mel_frames.shape[1])
    return log_mel_frames @ m[1 : n_keep + 1].T


def mfcc(audio: AudioBuffer, n_keep: int = 12) -> np.ndarray:
    """Per-frame MFCC ``(n_frames, n_keep)`` from a 40-band mel filterbank."""
    if n_keep not in (12, 20):
        raise ValueError("n_keep must be 12 or 20")
    return cepstrum(log_mel(frame_signal(audio.samples), audio.sample_rate), n_keep)


def deltas(features: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +/- ``width`` frames, edges replicated."""
    padded = np.pad(features, ((width, width), (0, 0)), mode="edge")
    n = len(features)
    num = sum(j * (padded[width + j : width + j + n] - padded[width - j : width - j + n]) for j in range(1, width + 1))
    return num / (2.0 * sum(j * j for j in range(1, width + 1)))


def spectral_descriptors(audio: AudioBuffer) -> dict[str, np.ndarray]:
    """Per-frame centroid, bandwidth, skewness, rolloff (Hz) and zero-crossing rate (per second).

    Moments are taken over the normalized magnitude spectrum; all-zero frames
    get zeros.
    """
    sr = audio.sample_rate
    frames = frame_signal(audio.samples)
    mag = magnitude_spectrum(frames)
    freqs = np.fft.rfftfreq(frames.shape[1], 1.0 / sr)
    total = mag.sum(axis=1, keepdims=True)
    silent = total[:, 0] <= 0
    p = mag / np.where(total > 0, total, 1.0)
    centroid = p @ freqs
    dev = freqs[None, :] - centroid[:, None]
    bandwidth = np.sqrt(np.sum(p * dev**2, axis=1))
    skew = np.sum(p * dev**3, axis=1) / np.where(bandwidth > 0, bandwidth, 1.0) ** 3
    skew[bandwidth <= 0] = 0.0
    power = mag**2
    cum = np.cumsum(power, axis=1)
    idx = np.argmax(cum >= ROLLOFF * cum[:, -1:], axis=1)
    rolloff = freqs[idx]
    signs = np.signbit(frames)
    zcr = np.count_nonzero(signs[:, 1:] != signs[:, :-1], axis=1) * (sr / frames.shape[1])
    # frames that are exactly zero have no sign changes; -0.0 must not count
    zero = ~np.any(frames, axis=1)
    for arr in (centroid, bandwidth, skew, rolloff):
        arr[silent] = 0.0
    zcr[zero] = 0.0
    return {"centroid": centroid, "bandwidth": bandwidth, "skewness": skew, "rolloff": rolloff, "zcr": zcr}


def frame_rms(samples: np.ndarray, frame_length: int = FRAME_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    frames = centered_frames(samples, frame_length, hop)
    return np.sqrt(np.mean(frames**2, axis=1))


def detect_silence(audio: AudioBuffer | np.ndarray, threshold_db: float = SILENCE_DB) -> np.ndarray:
    """Boolean mask over CQT-aligned frames: True where frame RMS is ``threshold_db`` below the loudest frame."""
    samples = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio)
    rms = frame_rms(samples)
    peak = rms.max() if len(rms) else 0.0
    if peak <= 0:
        return np.ones(len(rms), dtype=bool)
    return rms < peak * 10.0 ** (threshold_db / 20.0)


def cluster_summary(distances: np.ndarray) -> dict[str, float]:
    q = np.quantile(distances, [0.1, 0.25, 0.5, 0.75, 0.9])
    return dict(zip(("decile10", "q25", "median", "q75", "decile90"), map(float, q)))


def pairwise_sq_distances(vectors: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances over all unordered pairs."""
    v = np.asarray(vectors, dtype=np.float64)
    i, j = np.triu_indices(len(v), k=1)
    return np.sum((v[i] - v[j]) ** 2, axis=1)


def cluster_distances(vectors: np.ndarray, groups) -> dict:
    """Distance summary per group label; groups with fewer than two members are skipped."""
    vectors = np.asarray(vectors)
    labels = list(groups)
    out = {}
    for g in dict.fromkeys(labels):
        members = vectors[[i for i, l in enumerate(labels) if l == g]]
        if len(members) < 2:
            warnings.warn(f"group {g!r} has a single member; skipped")
            continue
        d = pairwise_sq_distances(members)
        out[g] = {**cluster_summary(d), "n_pairs": len(d), "distances": d}
    return out
