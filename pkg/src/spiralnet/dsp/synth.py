"""Quasi-harmonic tones with a pitch-independent spectral envelope.

The partial at frequency ``f`` gets amplitude ``env(f)``, where ``env`` is
fixed per instrument and vanishes above a cutoff frequency. Transposing such
a tone moves the partials but not the cutoff.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer

PEAK_LEVEL = 0.5


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    f0: float
    n_partials: int
    cutoff: float  # Hz; partials at or above it are silent
    rolloff: float  # envelope decay exponent below the cutoff
    nuance: float = 0.0  # dB
    duration: float = 4.5
    instrument_id: int = 0
    even_gain: float = 1.0  # relative level of even-numbered partials
    attack: float = 0.02  # s
    decay: float = 30.0  # s, exponential time constant
    detune_cents: float = 2.0  # std of per-partial detuning
    noise_db: float = -70.0  # white noise level relative to the harmonic RMS


def envelope(freqs, cutoff: float, rolloff: float) -> np.ndarray:
    f = np.asarray(freqs, dtype=np.float64)
    env = (1.0 + (f / (0.5 * cutoff)) ** 2) ** (-rolloff / 2.0)
    return np.where(f < cutoff, env, 0.0)


def partial_frequencies(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    n = np.arange(1, spec.n_partials + 1)
    cents = rng.normal(0.0, spec.detune_cents, size=len(n))
    cents[0] = 0.0  # the fundamental stays on pitch
    return n * spec.f0 * 2.0 ** (cents / 1200.0)


def synth_tone(spec: SynthSpec, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Render ``spec``; the 0 dB nuance peaks at ``PEAK_LEVEL``, other nuances scale linearly from it."""
    if spec.f0 <= 0 or spec.n_partials < 1 or spec.duration <= 0:
        raise SynthError(f"invalid synth parameters: {spec}")
    if spec.f0 * spec.n_partials >= sample_rate / 2:
        raise SynthError(f"highest partial {spec.f0 * spec.n_partials:.0f} Hz is not below Nyquist")
    n = np.arange(1, spec.n_partials + 1)
    freqs = partial_frequencies(spec, rng)
    phases = rng.uniform(0.0, 2 * np.pi, size=len(n))
    amps = envelope(freqs, spec.cutoff, spec.rolloff)
    amps = amps * np.where(n % 2 == 0, spec.even_gain, 1.0)
    keep = amps > 0
    t = np.arange(int(round(spec.duration * sample_rate))) / sample_rate
    x = np.zeros_like(t)
    for f, a, ph in zip(freqs[keep], amps[keep], phases[keep]):
        x += a * np.sin(2 * np.pi * f * t + ph)
    shape = (1.0 - np.exp(-t / spec.attack)) * np.exp(-t / spec.decay)
    x *= shape
    if spec.noise_db is not None:
        rms = np.sqrt(np.mean(x**2))
        x += rng.standard_normal(len(x)) * rms * 10.0 ** (spec.noise_db / 20.0)
    peak = np.abs(x).max()
    if peak > 0:
        x *= PEAK_LEVEL / peak
    x *= 10.0 ** (spec.nuance / 20.0)
    return AudioBuffer(x, sample_rate)


@dataclass(frozen=True)
class Instrument:
    name: str
    lowest_midi: int
    cutoff: float
    rolloff: float
    even_gain: float
    attack: float
    decay: float


# eight surrogate classes; pitch ranges span 32 semitones from lowest_midi
INSTRUMENTS = (
    Instrument("piano", 36, 4000.0, 2.0, 1.0, 0.004, 1.5),
    Instrument("violin", 55, 6000.0, 1.0, 1.0, 0.10, 30.0),
    Instrument("dist. guitar", 40, 8000.0, 0.4, 1.0, 0.01, 4.0),
    Instrument("female singer", 57, 3500.0, 1.5, 1.0, 0.06, 30.0),
    Instrument("clarinet", 50, 2500.0, 1.0, 0.08, 0.03, 30.0),
    Instrument("flute", 60, 2200.0, 3.0, 1.0, 0.07, 30.0),
    Instrument("trumpet", 52, 5000.0, 0.3, 1.0, 0.03, 30.0),
    Instrument("tenor sax.", 44, 3000.0, 0.8, 0.5, 0.04, 30.0),
)

NUANCES_DB = {"pp": -20.0, "mf": -10.0, "ff": 0.0}
N_PITCHES = 32


def midi_to_hz(m) -> np.ndarray:
    return 440.0 * 2.0 ** ((np.asarray(m, dtype=np.float64) - 69.0) / 12.0)


def instrument_spec(instrument_id: int, pitch_index: int, nuance_db: float = 0.0, duration: float = 4.5,
                    sample_rate: int = SAMPLE_RATE) -> SynthSpec:
    inst = INSTRUMENTS[instrument_id]
    f0 = float(midi_to_hz(inst.lowest_midi + pitch_index))
    n_partials = max(1, int(np.ceil(min(inst.cutoff, 0.45 * sample_rate) / f0)))
    while f0 * n_partials >= sample_rate / 2:
        n_partials -= 1
    return SynthSpec(
        f0=f0, n_partials=n_partials, cutoff=inst.cutoff, rolloff=inst.rolloff, nuance=nuance_db,
        duration=duration, instrument_id=instrument_id, even_gain=inst.even_gain,
        attack=inst.attack, decay=inst.decay,
    )


def transpose(spec: SynthSpec, semitones: float) -> SynthSpec:
    """Same envelope, new pitch; the partial count follows the fixed cutoff."""
    f0 = spec.f0 * 2.0 ** (semitones / 12.0)
    return replace(spec, f0=f0, n_partials=max(1, int(np.ceil(spec.cutoff / f0))))
