"""Symbolic melodies: MIDI files, piano rolls, conditioning series, sine renderer."""

from __future__ import annotations

import csv
import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .codec import PcmWaveform
from .errors import FormatError, InputError

N_NOTES = 128
DEFAULT_FRAME_RATE = 62.5
PPQ = 480
DEFAULT_TEMPO = 500_000  # microseconds per quarter note (120 BPM)
SINE_AMPLITUDE = 0.2
FADE_SECONDS = 0.01


@dataclass(frozen=True)
class NoteEvent:
    note: int
    start: float
    end: float
    velocity: int = 64

    def __post_init__(self):
        if not 0 <= self.note < N_NOTES:
            raise InputError(f"note {self.note} outside [0, 127]")
        if self.start < 0 or not self.end > self.start:
            raise InputError(f"bad note interval [{self.start}, {self.end})")
        if not 1 <= self.velocity <= 127:
            raise InputError(f"velocity {self.velocity} outside [1, 127]")


@dataclass
class MidiScore:
    events: list = field(default_factory=list)
    duration: float | None = None

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: (e.start, e.note, e.end))
        last = max((e.end for e in self.events), default=0.0)
        if self.duration is None:
            self.duration = last
        if self.duration < last:
            raise InputError(f"duration {self.duration} shorter than last note end {last}")

    def __len__(self):
        return len(self.events)


@dataclass
class PianoRoll:
    """Binary ``[T_frames x 128]`` play matrix plus optional onset (articulation) matrix."""

    frames: np.ndarray
    frame_rate: float
    articulation: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class LcSeries:
    """Binary ``[128 x T_samples]`` local-conditioning series at audio rate."""

    columns: np.ndarray
    sample_rate: int

    def __len__(self):
        return self.columns.shape[1]

    def window(self, offset: int, length: int) -> np.ndarray:
        return self.columns[:, offset:offset + length]


def note_to_freq(note: int) -> float:
    """Equal-tempered frequency in Hz with A4 (note 69) = 440 Hz."""
    if not 0 <= note < N_NOTES:
        raise IndexError(f"note {note} outside [0, 127]")
    return 440.0 * 2.0 ** ((note - 69) / 12.0)


# ------------------------------------------------------------------- MIDI


def _read_vlq(data: bytes, pos: int, limit: int):
    value = 0
    for _ in range(4):
        if pos >= limit:
            raise FormatError("variable-length quantity runs past chunk end", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise FormatError("variable-length quantity longer than 4 bytes", pos)


def _vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _parse_track(data: bytes, start: int, end: int):
    """Return (note spans in ticks, tempo changes, end tick) for one track chunk."""
    pos = start
    tick = 0
    status = None
    open_notes: dict = {}
    spans = []
    tempos = []
    while pos < end:
        delta, pos = _read_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise FormatError("event truncated", pos)
        byte = data[pos]
        if byte & 0x80:
            pos += 1
            if byte < 0xF0:
                status = byte
        elif status is None:
            raise FormatError("running status without a prior status byte", pos)
        else:
            byte = status
        if byte == 0xFF:
            if pos >= end:
                raise FormatError("meta event truncated", pos)
            kind = data[pos]
            length, pos = _read_vlq(data, pos + 1, end)
            if pos + length > end:
                raise FormatError("meta event runs past chunk end", pos)
            body = data[pos:pos + length]
            pos += length
            if kind == 0x51 and length == 3:
                tempos.append((tick, int.from_bytes(body, "big")))
            elif kind == 0x2F:
                break
            continue
        if byte in (0xF0, 0xF7):
            length, pos = _read_vlq(data, pos, end)
            pos += length
            continue
        if byte >= 0xF0:
            raise FormatError(f"unsupported system message 0x{byte:02X}", pos - 1)
        kind = byte & 0xF0
        channel = byte & 0x0F
        n_data = 1 if kind in (0xC0, 0xD0) else 2
        if pos + n_data > end:
            raise FormatError("channel message truncated", pos)
        d = data[pos:pos + n_data]
        pos += n_data
        if kind == 0x90 and d[1] > 0:
            open_notes.setdefault((channel, d[0]), []).append((tick, d[1]))
        elif kind == 0x80 or (kind == 0x90 and d[1] == 0):
            stack = open_notes.get((channel, d[0]))
            if stack:
                on_tick, vel = stack.pop(0)
                spans.append((d[0], on_tick, tick, vel))
    for (channel, note), stack in open_notes.items():
        for on_tick, vel in stack:
            warnings.warn(f"note {note} on channel {channel} never released; closing at track end")
            spans.append((note, on_tick, tick, vel))
    return spans, tempos, tick


class _TempoMap:
    def __init__(self, tempos, seconds_per_tick_fixed=None, division=PPQ):
        self.fixed = seconds_per_tick_fixed
        self.division = division
        changes = sorted(tempos)
        if not changes or changes[0][0] != 0:
            changes.insert(0, (0, DEFAULT_TEMPO))
        self.ticks = [t for t, _ in changes]
        self.tempos = [u for _, u in changes]
        self.offsets = [0.0]
        for i in range(1, len(changes)):
            span = self.ticks[i] - self.ticks[i - 1]
            self.offsets.append(self.offsets[-1] + span * self.tempos[i - 1] / 1e6 / division)

    def seconds(self, tick: int) -> float:
        if self.fixed is not None:
            return tick * self.fixed
        i = int(np.searchsorted(self.ticks, tick, side="right")) - 1
        return self.offsets[i] + (tick - self.ticks[i]) * self.tempos[i] / 1e6 / self.division


def parse_midi(blob: bytes) -> MidiScore:
    """Parse a format 0/1 Standard MIDI File into a score (all channels merged)."""
    if len(blob) < 14 or blob[:4] != b"MThd":
        raise FormatError("missing MThd header chunk", 0)
    (hlen,) = struct.unpack_from(">I", blob, 4)
    if hlen < 6 or 8 + hlen > len(blob):
        raise FormatError("bad header chunk length", 4)
    fmt, ntracks, division = struct.unpack_from(">HHH", blob, 8)
    if fmt not in (0, 1):
        raise FormatError(f"unsupported MIDI format {fmt}", 8)
    fixed = None
    if division & 0x8000:
        fps = 256 - (division >> 8)
        fixed = 1.0 / (fps * (division & 0xFF))
    elif division == 0:
        raise FormatError("zero ticks per quarter note", 12)
    pos = 8 + hlen
    spans, tempos, end_tick = [], [], 0
    for _ in range(ntracks):
        if pos + 8 > len(blob):
            raise FormatError("missing track chunk", pos)
        tag = blob[pos:pos + 4]
        (size,) = struct.unpack_from(">I", blob, pos + 4)
        if pos + 8 + size > len(blob):
            raise FormatError("track chunk runs past end of file", pos)
        if tag == b"MTrk":
            s, t, e = _parse_track(blob, pos + 8, pos + 8 + size)
            spans += s
            tempos += t
            end_tick = max(end_tick, e)
        pos += 8 + size
    tmap = _TempoMap(tempos, fixed, division if not fixed else PPQ)
    events = []
    for note, on, off, vel in spans:
        if off <= on:
            continue
        events.append(NoteEvent(note, tmap.seconds(on), tmap.seconds(off), vel))
    last = max((e.end for e in events), default=0.0)
    return MidiScore(events, max(last, tmap.seconds(end_tick)))


def write_midi(score: MidiScore) -> bytes:
    """Format 0, 480 PPQ, 120 BPM tempo meta-event, channel 0."""
    ticks_per_second = PPQ * 1e6 / DEFAULT_TEMPO
    msgs = []
    for e in score.events:
        on = int(round(e.start * ticks_per_second))
        off = max(on + 1, int(round(e.end * ticks_per_second)))
        msgs.append((off, 0, bytes([0x80, e.note, 0])))
        msgs.append((on, 1, bytes([0x90, e.note, e.velocity])))
    msgs.sort(key=lambda m: (m[0], m[1]))
    track = bytearray(b"\x00\xff\x51\x03" + DEFAULT_TEMPO.to_bytes(3, "big"))
    tick = 0
    for when, _, msg in msgs:
        track += _vlq(when - tick) + msg
        tick = when
    end = max(tick, int(round(score.duration * ticks_per_second)))
    track += _vlq(end - tick) + b"\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, PPQ)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


def read_musicnet_labels(source, time_scale: float = 1.0) -> MidiScore:
    """Read ``start_time,end_time,note`` rows (times divided by ``time_scale``).

    ``source`` is a path or an open text stream. Extra MusicNet columns are
    ignored when a header row names the fields.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="") as fh:
            return read_musicnet_labels(fh, time_scale)
    rows = list(csv.reader(source))
    if not rows:
        return MidiScore([], 0.0)
    header = [c.strip().lower() for c in rows[0]]
    if "start_time" in header:
        idx = [header.index(k) for k in ("start_time", "end_time", "note")]
        rows = rows[1:]
    else:
        idx = [0, 1, 2]
    events = []
    for lineno, row in enumerate(rows, start=2 if "start_time" in header else 1):
        if not row or not "".join(row).strip():
            continue
        try:
            start, end = (float(row[i]) / time_scale for i in idx[:2])
            note = int(float(row[idx[2]]))
        except (ValueError, IndexError):
            raise FormatError(f"label row {lineno} is not start_time,end_time,note") from None
        events.append(NoteEvent(note, start, end))
    return MidiScore(events)


# ------------------------------------------------------------ piano rolls


def _frame_count(duration: float, rate: float) -> int:
    return int(math.ceil(duration * rate - 1e-9))


def score_to_roll(score: MidiScore, frame_rate: float = DEFAULT_FRAME_RATE,
                  n_frames: int | None = None) -> PianoRoll:
    """Frame ``t`` has note ``n`` on iff some event satisfies start <= t/frame_rate < end.

    Times within 1e-9 frames of a boundary count as on it, so note times that
    were summed in floating point still start on their intended frame.
    """
    if frame_rate <= 0:
        raise InputError("frame rate must be positive")
    if n_frames is None:
        n_frames = _frame_count(score.duration, frame_rate)
    play = np.zeros((n_frames, N_NOTES), dtype=np.uint8)
    artic = np.zeros_like(play)
    for e in score.events:
        lo = min(n_frames, _frame_count(e.start, frame_rate))
        hi = min(n_frames, _frame_count(e.end, frame_rate))
        if lo < hi:
            play[lo:hi, e.note] = 1
            artic[lo, e.note] = 1
    return PianoRoll(play, frame_rate, artic)


def roll_to_score(play: np.ndarray, frame_rate: float, articulation: np.ndarray | None = None,
                  velocity: int = 64) -> MidiScore:
    """Inverse of :func:`score_to_roll`: an onset bit (or a rising edge) starts a note."""
    play = np.asarray(play).astype(bool)
    n_frames = play.shape[0]
    artic = np.zeros_like(play) if articulation is None else np.asarray(articulation).astype(bool)
    events = []
    for note in range(play.shape[1]):
        start = None
        for t in range(n_frames + 1):
            on = t < n_frames and play[t, note]
            if start is not None and (not on or artic[t, note]):
                events.append(NoteEvent(note, start / frame_rate, t / frame_rate, velocity))
                start = None
            if on and start is None:
                start = t
    return MidiScore(events, n_frames / frame_rate)


def top_notes(roll: PianoRoll) -> np.ndarray:
    """Highest active note per frame, -1 for empty frames."""
    active = roll.frames.astype(bool)
    top = N_NOTES - 1 - np.argmax(active[:, ::-1], axis=1)
    return np.where(active.any(axis=1), top, -1)


def upsample_roll(roll: PianoRoll, sample_rate: int, length: int | None = None) -> LcSeries:
    """Hold-repeat expansion: column ``s`` copies frame floor(s * frame_rate / sample_rate).

    Columns past the last frame are zero.
    """
    if sample_rate < roll.frame_rate:
        raise InputError("sample rate must be at least the frame rate")
    if length is None:
        length = int(round(roll.n_frames * sample_rate / roll.frame_rate))
    idx = np.floor(np.arange(length) * roll.frame_rate / sample_rate).astype(np.int64)
    cols = np.zeros((N_NOTES, length), dtype=np.uint8)
    inside = idx < roll.n_frames
    cols[:, inside] = roll.frames[idx[inside]].T
    return LcSeries(cols, int(sample_rate))


def score_to_lc(score: MidiScore, sample_rate: int, length: int,
                frame_rate: float = DEFAULT_FRAME_RATE) -> LcSeries:
    """Conditioning series of exactly ``length`` columns (truncated or zero-padded).

    Columns at or after the score's duration are zero even when the last roll
    frame would otherwise be held past it.
    """
    roll = score_to_roll(score, frame_rate)
    lc = upsample_roll(roll, sample_rate, length)
    lc.columns[:, int(math.ceil(score.duration * sample_rate - 1e-9)):] = 0
    return lc


# ---------------------------------------------------------------- render


def render_sine(score: MidiScore, sample_rate: int, duration: float | None = None) -> PcmWaveform:
    """Additive sine rendering with 10 ms linear fades, clamped to [-1, 1]."""
    if duration is None:
        duration = score.duration
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    times = np.arange(n) / sample_rate
    for e in score.events:
        lo = int(np.searchsorted(times, e.start, side="left"))
        hi = int(np.searchsorted(times, e.end, side="left"))
        if lo >= hi:
            continue
        t = times[lo:hi]
        env = np.minimum(1.0, np.minimum(t - e.start, e.end - t) / FADE_SECONDS)
        amp = SINE_AMPLITUDE * e.velocity / 127.0
        out[lo:hi] += amp * env * np.sin(2.0 * np.pi * note_to_freq(e.note) * (t - e.start))
    return PcmWaveform(np.clip(out, -1.0, 1.0), sample_rate)


# ------------------------------------------------------ synthetic scores

MAJOR_STEPS = (0, 2, 4, 5, 7, 9, 11, 12)


def scale_score(tonic: int = 60, note_duration: float = 0.5, duration: float | None = None,
                descending: bool = False, velocity: int = 100) -> MidiScore:
    """Major scale played back and forth, abutting notes, filling ``duration``."""
    up = [tonic + s for s in MAJOR_STEPS]
    cycle = up + up[-2:0:-1]
    if descending:
        cycle = cycle[len(up) - 1:] + cycle[:len(up) - 1]
    if duration is None:
        duration = note_duration * len(up)
    events, t, i = [], 0.0, 0
    while t < duration - 1e-9:
        end = min(duration, t + note_duration)
        events.append(NoteEvent(cycle[i % len(cycle)], t, end, velocity))
        t, i = end, i + 1
    return MidiScore(events, duration)


def random_monophonic_score(rng: np.random.Generator, duration: float, low: int = 55,
                            high: int = 79, min_note: float = 0.25, max_note: float = 1.0,
                            velocity: int = 100, grid: float | None = None) -> MidiScore:
    """Abutting random notes (no rests) covering [0, duration).

    With ``grid`` every note length is a whole number of grid steps (at least one).
    """
    events, t = [], 0.0
    while t < duration - 1e-9:
        length = float(rng.uniform(min_note, max_note))
        if grid:
            length = max(1, round(length / grid)) * grid
        end = min(duration, t + length)
        if duration - end < min_note / 2:
            end = duration
        events.append(NoteEvent(int(rng.integers(low, high + 1)), t, end, velocity))
        t = end
    return MidiScore(events, duration)


def truncate_score(score: MidiScore, duration: float) -> MidiScore:
    """Keep the part of ``score`` before ``duration`` (longer scores are cut, shorter padded)."""
    events = [NoteEvent(e.note, e.start, min(e.end, duration), e.velocity)
              for e in score.events if e.start < duration]
    return MidiScore(events, duration)


def transposed(score: MidiScore, semitones: int) -> MidiScore:
    return MidiScore([NoteEvent(e.note + semitones, e.start, e.end, e.velocity)
                      for e in score.events], score.duration)


def merge_scores(scores: Iterable[MidiScore]) -> MidiScore:
    scores = list(scores)
    events = [e for s in scores for e in s.events]
    return MidiScore(events, max((s.duration for s in scores), default=0.0))


def parse_midi_file(path) -> MidiScore:
    with open(path, "rb") as fh:
        return parse_midi(fh.read())


def write_midi_file(score: MidiScore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_midi(score))


def read_labels_text(text: str, time_scale: float = 1.0) -> MidiScore:
    return read_musicnet_labels(io.StringIO(text), time_scale)
