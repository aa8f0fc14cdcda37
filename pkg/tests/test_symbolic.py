import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wavecompose.errors import FormatError, InputError
from wavecompose.symbolic import (LcSeries, MidiScore, NoteEvent, PianoRoll, note_to_freq,
                                  parse_midi, random_monophonic_score, read_labels_text,
                                  render_sine, roll_to_score, scale_score, score_to_lc,
                                  score_to_roll, top_notes, transposed, truncate_score,
                                  upsample_roll, write_midi)


def smf(events, division=480, fmt=0, extra_tracks=()):
    """Build a Standard MIDI File from (delta, bytes) pairs."""
    def vlq(v):
        out = [v & 0x7F]
        v >>= 7
        while v:
            out.append(0x80 | (v & 0x7F))
            v >>= 7
        return bytes(reversed(out))

    def track(evs):
        body = b"".join(vlq(d) + m for d, m in evs) + b"\x00\xff\x2f\x00"
        return b"MTrk" + struct.pack(">I", len(body)) + body

    tracks = [track(events)] + [track(t) for t in extra_tracks]
    return b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), division) + b"".join(tracks)


def test_note_event_invariants():
    with pytest.raises(InputError):
        NoteEvent(60, 1.0, 1.0)
    with pytest.raises(InputError):
        NoteEvent(128, 0.0, 1.0)
    assert NoteEvent(60, 0.0, 1.0).velocity == 64


def test_score_duration_invariant():
    with pytest.raises(InputError):
        MidiScore([NoteEvent(60, 0.0, 2.0)], 1.0)
    s = MidiScore([NoteEvent(62, 1.0, 2.0), NoteEvent(60, 0.0, 1.0)])
    assert [e.note for e in s.events] == [60, 62] and s.duration == 2.0


def test_note_to_freq():
    assert note_to_freq(69) == 440.0
    assert note_to_freq(81) == 880.0
    assert abs(note_to_freq(60) - 261.6256) < 1e-3
    with pytest.raises(IndexError):
        note_to_freq(128)


# ------------------------------------------------------------------ MIDI


def test_parse_single_note():
    blob = smf([(0, b"\x90\x3c\x64"), (480, b"\x80\x3c\x00")])
    s = parse_midi(blob)
    assert s.events == [NoteEvent(60, 0.0, 0.5, 100)]


def test_velocity_zero_note_on_and_running_status():
    blob = smf([(0, b"\x90\x3c\x64"), (240, b"\x3c\x00"), (0, b"\x3e\x50"), (240, b"\x3e\x00")])
    s = parse_midi(blob)
    assert [(e.note, e.start, e.end) for e in s.events] == [(60, 0.0, 0.25), (62, 0.25, 0.5)]


def test_tempo_change():
    # 60 BPM from the start: one quarter note = 1 s
    blob = smf([(0, b"\xff\x51\x03" + (1_000_000).to_bytes(3, "big")),
                (0, b"\x90\x45\x40"), (960, b"\x80\x45\x40")])
    assert parse_midi(blob).events == [NoteEvent(69, 0.0, 2.0)]


def test_format1_tempo_track():
    tempo = [(0, b"\xff\x51\x03" + (250_000).to_bytes(3, "big"))]
    notes = [(0, b"\x90\x40\x40"), (480, b"\x80\x40\x40")]
    s = parse_midi(smf(tempo, fmt=1, extra_tracks=[notes]))
    assert s.events == [NoteEvent(64, 0.0, 0.25)]


def test_empty_track():
    s = parse_midi(smf([]))
    assert len(s) == 0 and s.duration == 0.0


def test_dangling_note_closes_with_warning():
    blob = smf([(0, b"\x90\x3c\x64"), (480, b"\xff\x01\x01x")])
    with pytest.warns(UserWarning, match="never released"):
        s = parse_midi(blob)
    assert s.events == [NoteEvent(60, 0.0, 0.5, 100)]


def test_bad_header():
    with pytest.raises(FormatError):
        parse_midi(b"MThx" + b"\0" * 20)
    with pytest.raises(FormatError):
        parse_midi(smf([])[:-3])
    with pytest.raises(FormatError):
        parse_midi(smf([], fmt=2))


def test_round_trip_ten_notes():
    events = [NoteEvent(60 + i, i * 0.25, i * 0.25 + 0.5, 30 + i) for i in range(10)]
    s = MidiScore(events, 3.0)
    back = parse_midi(write_midi(s))
    assert back.events == s.events
    assert back.duration == 3.0


@given(st.lists(st.tuples(st.integers(0, 127), st.integers(0, 4000), st.integers(1, 2000),
                          st.integers(1, 127)), max_size=15))
def test_round_trip_within_one_tick(specs):
    # a note-on/note-off stream cannot say which of two overlapping same-pitch notes ends first
    events, busy = [], {}
    for n, s, d, v in specs:
        if any(s < e and s + d > b for b, e in busy.get(n, [])):
            continue
        busy.setdefault(n, []).append((s, s + d))
        events.append(NoteEvent(n, s / 960, (s + d) / 960 + 1e-4, v))
    score = MidiScore(events)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        back = parse_midi(write_midi(score))
    assert len(back) == len(score)
    for a, b in zip(sorted(score.events, key=lambda e: (e.note, e.start)),
                    sorted(back.events, key=lambda e: (e.note, e.start))):
        assert a.note == b.note and a.velocity == b.velocity
        assert abs(a.start - b.start) <= 1 / 960 and abs(a.end - b.end) <= 1 / 960


def test_same_pitch_overlap_keeps_notes_and_starts():
    score = MidiScore([NoteEvent(60, 0.0, 1.0), NoteEvent(60, 0.5, 0.75)])
    back = parse_midi(write_midi(score))
    assert len(back) == 2
    assert sorted(e.start for e in back.events) == [0.0, 0.5]
    assert all(e.end > e.start for e in back.events)


def test_musicnet_labels():
    text = "start_time,end_time,instrument,note,start_beat\n0.5,1.0,1,60,0\n0.0,0.5,1,62,0\n"
    s = read_labels_text(text)
    assert s.events == [NoteEvent(62, 0.0, 0.5), NoteEvent(60, 0.5, 1.0)]
    assert read_labels_text("0,1,69\n").events == [NoteEvent(69, 0.0, 1.0)]
    # MusicNet stores sample indices; a time scale converts them
    assert read_labels_text("0,44100,69\n", 44100).events == [NoteEvent(69, 0.0, 1.0)]
    with pytest.raises(FormatError):
        read_labels_text("a,b,c\n")


# ----------------------------------------------------------------- rolls


def test_empty_roll():
    roll = score_to_roll(MidiScore([], 1.0), 100)
    assert roll.frames.shape == (100, 128) and not roll.frames.any()


def test_triad_roll():
    s = MidiScore([NoteEvent(n, 0.0, 1.0) for n in (60, 64, 67)])
    roll = score_to_roll(s, 50)
    assert all(set(np.flatnonzero(f)) == {60, 64, 67} for f in roll.frames)


def test_abutting_notes_never_overlap():
    s = MidiScore([NoteEvent(60, 0.0, 0.5), NoteEvent(62, 0.5, 1.0)])
    roll = score_to_roll(s, 62.5)
    assert not np.any(roll.frames[:, 60] & roll.frames[:, 62])
    assert roll.frames[:, 60].sum() + roll.frames[:, 62].sum() == roll.n_frames


@given(st.lists(st.tuples(st.integers(0, 127), st.floats(0, 3), st.floats(0.02, 1)), max_size=8))
def test_top_note_recovers_max(specs):
    events = [NoteEvent(n, s, s + d) for n, s, d in specs]
    score = MidiScore(events, 4.0)
    roll = score_to_roll(score, 25)
    tops = top_notes(roll)
    for t in range(roll.n_frames):
        live = [e.note for e in events if e.start * 25 - 1e-9 <= t < e.end * 25 - 1e-9]
        assert tops[t] == (max(live) if live else -1)


def test_summed_note_times_start_on_their_frame():
    score = random_monophonic_score(np.random.default_rng(0), 8.0, min_note=0.1, max_note=0.3,
                                    grid=1 / 62.5)
    roll = score_to_roll(score, 62.5)
    for e in score.events:
        first = round(e.start * 62.5)
        assert roll.articulation[first, e.note] and top_notes(roll)[first] == e.note


def test_roll_to_score_inverts():
    s = MidiScore([NoteEvent(60, 0.0, 0.5), NoteEvent(60, 0.5, 1.0), NoteEvent(64, 0.25, 1.0)], 1.0)
    roll = score_to_roll(s, 8)
    back = roll_to_score(roll.frames, 8, roll.articulation, velocity=64)
    assert back.events == s.events


def test_upsample_identity_rate():
    roll = score_to_roll(scale_score(), 100)
    lc = upsample_roll(roll, 100)
    np.testing.assert_array_equal(lc.columns, roll.frames.T)


def test_upsample_hold():
    frames = np.zeros((2, 128), dtype=np.uint8)
    frames[0, 10] = 1
    frames[1, 20] = 1
    lc = upsample_roll(PianoRoll(frames, 1.0), 16000)
    assert lc.columns.shape == (128, 32000)
    assert lc.columns[10, :16000].all() and not lc.columns[10, 16000:].any()
    assert lc.columns[20, 16000:].all() and not lc.columns[20, :16000].any()


@given(st.integers(1, 8), st.sampled_from([1, 2, 5, 64]))
def test_upsample_count_scales(frames, factor):
    rng = np.random.default_rng(frames * factor)
    roll = PianoRoll(rng.integers(0, 2, size=(frames, 128)).astype(np.uint8), 10.0)
    lc = upsample_roll(roll, 10 * factor)
    assert lc.columns.sum() == roll.frames.sum() * factor
    patterns = {c.tobytes() for c in roll.frames}
    assert all(c.tobytes() in patterns for c in lc.columns.T)


def test_score_to_lc_exact_length():
    s = scale_score(duration=1.0)
    assert len(score_to_lc(s, 8000, 5000)) == 5000
    padded = score_to_lc(s, 8000, 12000)
    assert len(padded) == 12000 and not padded.columns[:, 8000:].any()


def test_lc_window():
    lc = LcSeries(np.arange(128 * 10).reshape(128, 10) % 2, 8000)
    assert lc.window(3, 4).shape == (128, 4)


# ---------------------------------------------------------------- render


def test_render_empty():
    w = render_sine(MidiScore([], 0.5), 8000)
    assert len(w) == 4000 and not w.samples.any()


def test_render_single_note_peak():
    w = render_sine(MidiScore([NoteEvent(69, 0.0, 1.0)]), 16000)
    spectrum = np.abs(np.fft.rfft(w.samples * np.hanning(len(w))))
    assert abs(np.argmax(spectrum) * 16000 / len(w) - 440.0) <= 1.0


@given(st.lists(st.tuples(st.integers(20, 100), st.floats(0, 0.3), st.floats(0.02, 0.3),
                          st.integers(1, 127)), max_size=12))
def test_render_bounded(specs):
    score = MidiScore([NoteEvent(n, s, s + d, v) for n, s, d, v in specs], 0.6)
    w = render_sine(score, 8000)
    assert np.all(np.abs(w.samples) <= 1.0)


def test_render_amplitude_and_fades():
    w = render_sine(MidiScore([NoteEvent(69, 0.0, 1.0, 127)]), 16000)
    assert abs(np.max(np.abs(w.samples)) - 0.2) < 1e-3
    assert np.max(np.abs(w.samples[:80])) < 0.1  # first 5 ms still fading in


# -------------------------------------------------------------- helpers


def test_scale_score_shape():
    s = scale_score(60, 0.5)
    assert [e.note for e in s.events] == [60, 62, 64, 65, 67, 69, 71, 72]
    assert s.duration == 4.0


def test_random_monophonic_covers_duration():
    s = random_monophonic_score(np.random.default_rng(0), 8.0)
    assert s.events[0].start == 0.0 and s.events[-1].end == 8.0
    for a, b in zip(s.events, s.events[1:]):
        assert a.end == b.start


def test_truncate_and_transpose():
    s = scale_score(60, 0.5)
    cut = truncate_score(s, 1.2)
    assert cut.duration == 1.2 and cut.events[-1].end == 1.2 and len(cut) == 3
    assert [e.note for e in transposed(s, 2).events][:2] == [62, 64]
