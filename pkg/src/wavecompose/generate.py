"""Autoregressive audio generation from a score, and MIDI edit-and-regenerate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import PcmWaveform, QuantizedWaveform, mulaw_decode
from .errors import InputError
from .symbolic import (DEFAULT_FRAME_RATE, LcSeries, MidiScore, NoteEvent, score_to_lc,
                       truncate_score)
from .wavenet import (LayerCache, WaveNetModel, conditioning_field, forward, incremental_step,
                      receptive_field)


@dataclass
class GenerateRequest:
    model: WaveNetModel
    score: MidiScore | None = None
    duration: float | None = None
    temperature: float = 1.0
    seed: int = 0
    fast: bool = True
    frame_rate: float = DEFAULT_FRAME_RATE


@dataclass
class Generation:
    quantized: QuantizedWaveform
    pcm: PcmWaveform
    score: MidiScore | None
    lc: LcSeries | None
    step_log_probs: np.ndarray = field(repr=False)

    def __iter__(self):
        yield self.quantized
        yield self.pcm

    @property
    def log_prob(self) -> float:
        return float(self.step_log_probs.sum())


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def sample_from_logits(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Draw from softmax(logits / temperature); temperature 0 takes the (lowest) argmax."""
    if temperature < 0:
        raise InputError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return int(np.argmax(logits))
    p = np.exp(log_softmax(logits / temperature))
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, logits.size - 1)


def _lc_for(req: GenerateRequest, n: int) -> LcSeries | None:
    c = req.model.config
    if not c.conditioned:
        return None
    if req.score is None:
        raise InputError("a conditioned model needs a score")
    score = truncate_score(req.score, n / c.sample_rate)
    return score_to_lc(score, c.sample_rate, n, req.frame_rate)


def generate(req: GenerateRequest) -> Generation:
    """Sample ``duration`` seconds sample by sample, feeding each draw back in.

    Generation starts after ``receptive_field`` center-bin (silent) samples
    with all-zero conditioning. ``fast`` selects cached incremental steps;
    otherwise every step recomputes a full forward pass over the window that
    can influence the next sample. Both routes use the same arithmetic and
    the same random draws, so they produce identical output.
    """
    model = req.model
    c = model.config
    if req.temperature < 0:
        raise InputError(f"temperature must be >= 0, got {req.temperature}")
    duration = req.duration
    if duration is None:
        if req.score is None:
            raise InputError("give a duration or a score")
        duration = req.score.duration
    n = int(round(duration * c.sample_rate))
    lc = _lc_for(req, n)
    q = c.quantization_channels
    center = q // 2
    rf = receptive_field(c)
    rng = np.random.default_rng(req.seed)
    out = np.empty(n, dtype=np.int64)
    logps = np.empty(n)
    zero_lc = np.zeros(c.initial_lc_channels) if c.conditioned else None

    def lc_input(i):
        if lc is None:
            return None
        return zero_lc if i == 0 else lc.columns[:, i - 1].astype(np.float64)

    if req.fast:
        cache = LayerCache(model)
        for _ in range(rf - 1):
            incremental_step(model, center, zero_lc, cache)
        for i in range(n):
            logits = incremental_step(model, center if i == 0 else int(out[i - 1]), lc_input(i), cache)
            out[i] = sample_from_logits(logits, req.temperature, rng)
            logps[i] = log_softmax(logits)[out[i]]
    else:
        window = max(rf, conditioning_field(c))
        hist = np.full(rf + n, center, dtype=np.int64)
        hist_lc = np.zeros((c.initial_lc_channels, rf + n)) if c.conditioned else None
        if lc is not None and n > 1:
            hist_lc[:, rf:rf + n - 1] = lc.columns[:, :n - 1]
        for i in range(n):
            stop = rf + i
            start = max(0, stop - window)
            y = hist_lc[:, start:stop] if hist_lc is not None else None
            logits = forward(model, hist[start:stop], y, exact=True).data[:, -1]
            out[i] = sample_from_logits(logits, req.temperature, rng)
            logps[i] = log_softmax(logits)[out[i]]
            hist[stop] = out[i]
    qw = QuantizedWaveform(out, q, c.sample_rate)
    score = truncate_score(req.score, duration) if req.score is not None else None
    return Generation(qw, mulaw_decode(qw), score, lc, logps)


def sequence_log_prob(model: WaveNetModel, bins: np.ndarray, lc: LcSeries | None = None) -> float:
    """Log-probability of generated ``bins`` under the model, using the generation priming."""
    c = model.config
    rf = receptive_field(c)
    n = len(bins)
    hist = np.concatenate([np.full(rf, c.quantization_channels // 2), bins]).astype(np.int64)
    y = None
    if c.conditioned:
        y = np.zeros((c.initial_lc_channels, rf + n))
        if n > 1:
            y[:, rf:rf + n - 1] = lc.columns[:, :n - 1]
    logits = forward(model, hist, y, exact=True).data
    cols = logits[:, rf - 1:rf - 1 + n]
    z = cols - cols.max(axis=0, keepdims=True)
    lsm = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    return float(lsm[bins, np.arange(n)].sum())


# ------------------------------------------------------------------ edits


@dataclass(frozen=True)
class Transpose:
    index: int
    semitones: int


@dataclass(frozen=True)
class Delete:
    index: int


@dataclass(frozen=True)
class Insert:
    note: int
    start: float
    end: float
    velocity: int = 64


def parse_edit_script(text: str) -> list:
    """Lines of ``transpose <i> <semitones>``, ``delete <i>``, ``insert <note> <start> <end>``."""
    edits = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "transpose" and len(parts) == 3:
                edits.append(Transpose(int(parts[1]), int(parts[2])))
            elif parts[0] == "delete" and len(parts) == 2:
                edits.append(Delete(int(parts[1])))
            elif parts[0] == "insert" and len(parts) == 4:
                edits.append(Insert(int(parts[1]), float(parts[2]), float(parts[3])))
            else:
                raise ValueError
        except ValueError:
            raise InputError(f"edit script line {lineno}: cannot parse {raw.strip()!r}") from None
    return edits


def apply_edits(score: MidiScore, edits) -> MidiScore:
    """Apply edits; indices refer to the original score's (sorted) event list."""
    events = list(score.events)
    deleted = set()
    for e in edits:
        if isinstance(e, (Transpose, Delete)) and not 0 <= e.index < len(score.events):
            raise InputError(f"edit references missing event {e.index}")
    for e in edits:
        if isinstance(e, Transpose):
            ev = events[e.index]
            events[e.index] = NoteEvent(ev.note + e.semitones, ev.start, ev.end, ev.velocity)
        elif isinstance(e, Delete):
            deleted.add(e.index)
    kept = [ev for i, ev in enumerate(events) if i not in deleted]
    kept += [NoteEvent(e.note, e.start, e.end, e.velocity) for e in edits if isinstance(e, Insert)]
    duration = max([score.duration] + [ev.end for ev in kept])
    return MidiScore(kept, duration)


@dataclass
class EditResult:
    original_score: MidiScore
    edited_score: MidiScore
    original: Generation
    edited: Generation

    def __iter__(self):
        yield self.edited_score
        yield self.edited


def edit_and_regenerate(req: GenerateRequest, edits) -> EditResult:
    """Generate from the score and from its edited copy with the same seed, for A/B listening."""
    if req.score is None:
        raise InputError("editing needs a score")
    edited_score = apply_edits(req.score, edits)
    duration = req.duration if req.duration is not None else req.score.duration
    base = GenerateRequest(req.model, req.score, duration, req.temperature, req.seed, req.fast,
                           req.frame_rate)
    alt = GenerateRequest(req.model, edited_score, duration, req.temperature, req.seed, req.fast,
                          req.frame_rate)
    return EditResult(req.score, edited_score, generate(base), generate(alt))
