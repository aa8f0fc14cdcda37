"""Structure metric: spectrogram, 1-D pitch reductions, normalized cross-correlation, null test."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .codec import PcmWaveform
from .errors import InputError, UndefinedCorrelationError
from .symbolic import MidiScore, PianoRoll, note_to_freq, score_to_roll, top_notes

WINDOW_SIZE = 1024
HOP_SIZE = 256


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # [frames x bins]
    sample_rate: int
    window_size: int
    hop_size: int

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_size

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.magnitudes.shape[1]) * self.sample_rate / self.window_size

    def frame_energy(self) -> np.ndarray:
        """Windowed time-domain energy of each frame, recovered from the one-sided spectrum."""
        p = self.magnitudes ** 2
        weights = np.full(p.shape[1], 2.0)
        weights[0] = weights[-1] = 1.0
        return p @ weights / self.window_size


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(w: PcmWaveform, window_size: int = WINDOW_SIZE, hop: int = HOP_SIZE) -> Spectrogram:
    """Hann-windowed magnitude STFT; frame ``f`` covers samples f*hop .. f*hop + window_size - 1."""
    if window_size < 2 or window_size & (window_size - 1):
        raise InputError(f"window size {window_size} is not a power of two")
    if not 1 <= hop <= window_size:
        raise InputError(f"hop {hop} must be in [1, {window_size}]")
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size < window_size:
        raise InputError(f"signal of {x.size} samples is shorter than one window ({window_size})")
    frames = np.lib.stride_tricks.sliding_window_view(x, window_size)[::hop]
    mags = np.abs(np.fft.rfft(frames * hann(window_size), axis=1))
    return Spectrogram(mags, w.sample_rate, window_size, hop)


def top_note_series(roll: PianoRoll) -> np.ndarray:
    """Frequency of the highest sounding note per frame; 0 Hz where nothing plays."""
    top = top_notes(roll)
    freqs = np.array([note_to_freq(n) for n in range(128)] + [0.0])
    return freqs[np.where(top < 0, 128, top)]


def dominant_freq_series(spec: Spectrogram) -> np.ndarray:
    """Bin-center frequency of the loudest bin per frame (np.argmax keeps the lowest on ties)."""
    return spec.bin_frequencies()[np.argmax(spec.magnitudes, axis=1)]


def aligned_roll(score: MidiScore, spec: Spectrogram) -> PianoRoll:
    """Roll sampled at the spectrogram's frame centers, one row per spectrogram frame."""
    offset = int(round(spec.window_size / (2 * spec.hop_size)))
    full = score_to_roll(score, spec.frame_rate, spec.n_frames + offset)
    art = full.articulation[offset:] if full.articulation is not None else None
    return PianoRoll(full.frames[offset:], full.frame_rate, art)


@dataclass
class XcorrResult:
    lags: np.ndarray
    values: np.ndarray
    peak_lag: int
    peak_value: float

    def value(self, lag: int) -> float:
        i = int(lag - self.lags[0])
        if not 0 <= i < self.lags.size:
            raise IndexError(f"lag {lag} outside the computed range")
        return float(self.values[i])


def _centered(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean()
    if not np.any(c):
        raise UndefinedCorrelationError(f"series {name} has zero variance")
    return c


def normalized_xcorr(a, b, max_lag: int | None = None) -> XcorrResult:
    """value(l) = sum_t a'(t) b'(t + l) / (|a'| |b'|) for mean-removed a', b'."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise InputError(f"series must be 1-D and equally long, got {a.shape} and {b.shape}")
    n = a.size
    max_lag = n - 1 if max_lag is None else int(max_lag)
    if not 0 <= max_lag < n:
        raise InputError(f"max_lag must be in [0, {n - 1}]")
    ac, bc = _centered(a, "a"), _centered(b, "b")
    denom = np.sqrt(np.dot(ac, ac) * np.dot(bc, bc))
    lags = np.arange(-max_lag, max_lag + 1)
    values = np.empty(lags.size)
    for i, lag in enumerate(lags):
        if lag >= 0:
            num = np.dot(ac[:n - lag], bc[lag:])
        else:
            num = np.dot(ac[-lag:], bc[:n + lag])
        values[i] = num / denom
    np.clip(values, -1.0, 1.0, out=values)
    # highest value; among ties the smallest |lag|, then the negative one
    order = np.lexsort((lags, np.abs(lags), -values))
    best = order[0]
    return XcorrResult(lags, values, int(lags[best]), float(values[best]))


@dataclass
class NullTestReport:
    candidate: XcorrResult
    candidate_value: float
    distractor_values: np.ndarray
    percentile: float
    threshold_95: float
    exceeds_95: bool
    undefined_distractors: int

    def summary_line(self) -> str:
        return f"{self.candidate.peak_lag},{self.candidate.peak_value!r},{self.percentile!r}"


def _as_series(x) -> np.ndarray:
    return top_note_series(x) if isinstance(x, PianoRoll) else np.asarray(x, dtype=np.float64)


def null_test(audio_series, candidate, distractors, max_lag: int = 0) -> NullTestReport:
    """Rank the candidate's lag-0 correlation against ``distractors``.

    The percentile is the share of distractors scoring strictly below the
    candidate. Distractors with zero variance (e.g. empty rolls) score 0.
    """
    distractors = list(distractors)
    if not distractors:
        raise InputError("null test needs at least one distractor")
    audio = _as_series(audio_series)
    cand = normalized_xcorr(audio, _as_series(candidate), max_lag)
    c0 = cand.value(0)
    values, undefined = [], 0
    for d in distractors:
        try:
            values.append(normalized_xcorr(audio, _as_series(d), 0).value(0))
        except UndefinedCorrelationError:
            values.append(0.0)
            undefined += 1
    values = np.array(values)
    percentile = 100.0 * np.count_nonzero(values < c0) / values.size
    threshold = float(np.percentile(values, 95))
    return NullTestReport(cand, c0, values, percentile, threshold, bool(c0 > threshold), undefined)


def structure_test(pcm: PcmWaveform, score: MidiScore, distractor_scores, max_lag: int = 0,
                   window_size: int = WINDOW_SIZE, hop: int = HOP_SIZE) -> NullTestReport:
    """Full pipeline: audio dominant-frequency series against score top-note series."""
    spec = stft(pcm, window_size, hop)
    audio = dominant_freq_series(spec)
    return null_test(audio, aligned_roll(score, spec),
                     [aligned_roll(s, spec) for s in distractor_scores], max_lag)


def distractor_scores(rng: np.random.Generator, count: int, duration: float, **melody) -> list:
    """Duration-matched random monophonic scores for the null distribution."""
    from .symbolic import random_monophonic_score

    return [random_monophonic_score(rng, duration, **melody) for _ in range(count)]


def write_xcorr_csv(result: XcorrResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "value"])
        for lag, v in zip(result.lags, result.values):
            w.writerow([int(lag), repr(float(v))])


def write_spectrogram_csv(spec: Spectrogram, path) -> None:
    """One row per frame; the header lists bin center frequencies."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"{f:g}" for f in spec.bin_frequencies()])
        for i, row in enumerate(spec.magnitudes):
            w.writerow([i] + [f"{v:.6g}" for v in row])
