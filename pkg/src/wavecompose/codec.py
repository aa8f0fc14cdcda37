"""mu-law companding, 16-bit PCM WAV I/O and linear resampling."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError


def round_half_away(v):
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass
class PcmWaveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        self.sample_rate = int(self.sample_rate)
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class QuantizedWaveform:
    bins: np.ndarray
    q_channels: int
    sample_rate: int

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64).reshape(-1)
        if self.bins.size and (self.bins.min() < 0 or self.bins.max() >= self.q_channels):
            raise InputError(f"bins must lie in [0, {self.q_channels})")

    def __len__(self):
        return self.bins.size

    def one_hot(self) -> np.ndarray:
        """``[Q x T]`` one-hot matrix of the bins."""
        out = np.zeros((self.q_channels, self.bins.size))
        out[self.bins, np.arange(self.bins.size)] = 1.0
        return out


def compand(x, q: int) -> np.ndarray:
    mu = q - 1
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)


def expand(c, q: int) -> np.ndarray:
    mu = q - 1
    c = np.asarray(c, dtype=np.float64)
    return np.sign(c) * np.expm1(np.abs(c) * np.log1p(mu)) / mu


def mulaw_encode(w: PcmWaveform, q: int = 128) -> QuantizedWaveform:
    """Compand with mu = q-1 and quantize uniformly to ``q`` bins."""
    if q < 2:
        raise InputError(f"need at least 2 quantization channels, got {q}")
    x = w.samples
    if x.size and (np.min(x) < -1.0 or np.max(x) > 1.0):
        raise InputError("sample outside [-1, 1]")
    bins = round_half_away((compand(x, q) + 1.0) / 2.0 * (q - 1))
    return QuantizedWaveform(bins.astype(np.int64), q, w.sample_rate)


def mulaw_decode(qw: QuantizedWaveform) -> PcmWaveform:
    """Map each bin back to the amplitude at its companded center."""
    q = qw.q_channels
    c = 2.0 * qw.bins / (q - 1) - 1.0
    return PcmWaveform(np.clip(expand(c, q), -1.0, 1.0), qw.sample_rate)


# -------------------------------------------------------------------- WAV


def write_wav(w: PcmWaveform, path) -> None:
    """Write mono 16-bit little-endian PCM."""
    x = w.samples
    if x.size and (np.min(x) < -1.0 or np.max(x) > 1.0):
        raise InputError("sample outside [-1, 1]")
    pcm = round_half_away(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> PcmWaveform:
    """Read 16-bit PCM WAV; stereo (or more) channels are averaged to mono."""
    blob = Path(path).read_bytes()
    return parse_wav(blob)


def parse_wav(blob: bytes) -> PcmWaveform:
    if len(blob) < 12:
        raise FormatError("file too short for a RIFF header", 0)
    if blob[:4] != b"RIFF":
        raise FormatError("missing RIFF tag", 0)
    if blob[8:12] != b"WAVE":
        raise FormatError("RIFF form type is not WAVE", 8)
    pos = 12
    fmt = None
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise FormatError("truncated chunk header", pos)
        tag = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = pos + 8
        if body + size > len(blob):
            raise FormatError(f"chunk {tag!r} declares {size} bytes past end of file", pos)
        if tag == b"fmt ":
            if size < 16:
                raise FormatError("fmt chunk too short", pos)
            audio_format, channels, rate, _, block_align, bits = struct.unpack_from(
                "<HHIIHH", blob, body)
            if audio_format == 0xFFFE and size >= 40:
                (audio_format,) = struct.unpack_from("<H", blob, body + 24)
            if audio_format != 1:
                raise FormatError(f"unsupported encoding {audio_format} (need PCM)", body)
            if bits != 16:
                raise FormatError(f"unsupported sample width {bits} bits (need 16)", body + 14)
            if channels < 1 or rate < 1 or block_align != 2 * channels:
                raise FormatError("inconsistent fmt chunk", body)
            fmt = (channels, rate)
        elif tag == b"data":
            if fmt is None:
                raise FormatError("data chunk before fmt chunk", pos)
            channels, rate = fmt
            if size % (2 * channels):
                raise FormatError("data size is not a whole number of frames", pos)
            raw = np.frombuffer(blob, dtype="<i2", count=size // 2, offset=body)
            frames = raw.reshape(-1, channels).astype(np.float64) / 32767.0
            mono = np.clip(frames.mean(axis=1), -1.0, 1.0)
            return PcmWaveform(mono, rate)
        pos = body + size + (size & 1)
    raise FormatError("no data chunk found", len(blob))


def resample(w: PcmWaveform, target_rate: int) -> PcmWaveform:
    """Linear-interpolation resampling; output length is round(len * target/source)."""
    target_rate = int(target_rate)
    if target_rate < 1:
        raise InputError(f"target rate must be >= 1, got {target_rate}")
    if target_rate == w.sample_rate:
        return PcmWaveform(w.samples.copy(), w.sample_rate)
    n_out = int(round_half_away(len(w) * target_rate / w.sample_rate))
    if len(w) == 0 or n_out == 0:
        return PcmWaveform(np.zeros(n_out), target_rate)
    pos = np.arange(n_out) * (w.sample_rate / target_rate)
    out = np.interp(pos, np.arange(len(w)), w.samples)
    return PcmWaveform(out, target_rate)
