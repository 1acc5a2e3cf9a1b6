"""WAV ingestion: RIFF parsing, downmix to mono, resampling to 44.1 kHz."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

SAMPLE_RATE = 44100

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class AudioError(ValueError):
    """Unreadable or unsupported audio. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


def _parse_riff(data: bytes):
    if len(data) < 12:
        raise AudioError("file too short for a RIFF header", len(data))
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioError("not a RIFF/WAVE file", 0)
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(data):
                raise AudioError("truncated fmt chunk", pos)
            tag, channels, rate, _, align, bits = struct.unpack("<HHIIHH", data[body : body + 16])
            if tag == WAVE_FORMAT_EXTENSIBLE and size >= 40:
                (tag,) = struct.unpack("<H", data[body + 24 : body + 26])
            fmt = (tag, channels, rate, align, bits)
        elif cid == b"data":
            if fmt is None:
                raise AudioError("data chunk before fmt chunk", pos)
            end = body + size
            if end > len(data):
                raise AudioError(f"truncated data chunk: header claims {size} bytes, {len(data) - body} present", len(data))
            return fmt, data[body:end], body
        pos = body + size + (size & 1)
    if fmt is None:
        raise AudioError("no fmt chunk", pos)
    raise AudioError("no data chunk", pos)


def _decode(fmt, raw: bytes, offset: int) -> np.ndarray:
    tag, channels, rate, align, bits = fmt
    if channels < 1:
        raise AudioError("zero channels", offset)
    width = bits // 8
    if len(raw) % (width * channels):
        raise AudioError("data length is not a whole number of frames", offset + len(raw))
    if tag == WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == WAVE_FORMAT_PCM and bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif tag == WAVE_FORMAT_PCM and bits == 32:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 64:
        x = np.frombuffer(raw, dtype="<f8").copy()
    else:
        raise AudioError(f"unsupported codec: format tag {tag}, {bits} bits", offset)
    return x.reshape(-1, channels)


def resample(x: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    """Band-limited polyphase resampling (Kaiser-windowed sinc FIR)."""
    if sr_in == sr_out:
        return x
    ratio = Fraction(sr_out, sr_in)
    return resample_poly(x, ratio.numerator, ratio.denominator)


def load_audio(path, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Read a PCM/float WAV file, average channels, resample to ``sample_rate``."""
    data = Path(path).read_bytes()
    fmt, raw, offset = _parse_riff(data)
    frames = _decode(fmt, raw, offset)
    mono = frames.mean(axis=1)
    mono = resample(mono, fmt[2], sample_rate)
    if not np.isfinite(mono).all():
        raise AudioError(f"{path}: non-finite samples")
    return AudioBuffer(mono, sample_rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE, bits: int = 16) -> None:
    """Write mono PCM (16-bit) or IEEE float (32-bit) WAV."""
    samples = np.asarray(samples, dtype=np.float64)
    if bits == 16:
        pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2").tobytes()
        tag, width = WAVE_FORMAT_PCM, 2
    elif bits == 32:
        pcm = samples.astype("<f4").tobytes()
        tag, width = WAVE_FORMAT_IEEE_FLOAT, 4
    else:
        raise ValueError("bits must be 16 or 32")
    fmt = struct.pack("<HHIIHH", tag, 1, sample_rate, sample_rate * width, width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", len(body)) + body)
