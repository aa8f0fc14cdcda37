"""Biaxial LSTM composer.

Per-note network instances share weights: a stack of LSTMs runs along time
for every note, then a second stack runs upward along the note axis inside
each timestep, so each note sees the decision already taken for the note
below it. Each note emits two bits per step: play and articulate (a fresh
onset).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, tensor as T
from .errors import DimensionError, FormatError, InputError
from .optim import Adam
from .symbolic import MidiScore, PianoRoll, roll_to_score, score_to_roll
from .tensor import Parameter, Tensor, sigmoid_array

log = logging.getLogger(__name__)

VICINITY = 12
N_FEATURES = 1 + 12 + 4 + 2 * (2 * VICINITY + 1) + 2
# column offsets inside a feature vector
PITCH_COLUMNS = slice(0, 13)
BEAT_COLUMNS = slice(13, 17)
DEFAULT_STEP_RATE = 8.0  # 4 steps per beat at 120 BPM


@dataclass
class BiaxialConfig:
    time_layer_sizes: tuple = (200, 200)
    note_layer_sizes: tuple = (100, 50)
    note_range: int = 128
    steps_per_beat: int = 4

    def __post_init__(self):
        self.time_layer_sizes = tuple(int(s) for s in self.time_layer_sizes)
        self.note_layer_sizes = tuple(int(s) for s in self.note_layer_sizes)
        sizes = self.time_layer_sizes + self.note_layer_sizes
        if not self.time_layer_sizes or not self.note_layer_sizes or min(sizes) < 1:
            raise InputError(f"layer sizes must be non-empty and >= 1, got {sizes}")
        if self.note_range < 1 or self.steps_per_beat < 1:
            raise InputError("note_range and steps_per_beat must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["time_layer_sizes"] = list(self.time_layer_sizes)
        d["note_layer_sizes"] = list(self.note_layer_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BiaxialConfig":
        return cls(**d)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.h.shape != self.c.shape:
            raise DimensionError(f"h {self.h.shape} and c {self.c.shape} differ")
        if not (np.all(np.isfinite(self.h)) and np.all(np.isfinite(self.c))):
            raise FloatingPointError("non-finite LSTM state")

    @classmethod
    def zeros(cls, *shape) -> "LstmState":
        return cls(np.zeros(shape), np.zeros(shape))


# ------------------------------------------------------------------- cells


def _affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    rows = x.shape[0]
    ones = Tensor.wrap(np.ones((rows, 1)))
    return T.add(T.matmul(x, weight), T.matmul(ones, T.reshape(bias, (1, bias.shape[0]))))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> tuple:
    """One differentiable LSTM update on ``[B x I]`` input; returns ``(h', c')``.

    ``weight`` is ``[(I+H) x 4H]`` over ``concat(x, h)`` with gate blocks
    input, forget, output, candidate (same layout as :func:`tensor.lstm`).
    """
    hidden = h.shape[-1]
    if (x.data.ndim != 2 or h.shape != c.shape or h.shape[0] != x.shape[0]
            or weight.shape != (x.shape[1] + hidden, 4 * hidden) or bias.shape != (4 * hidden,)):
        raise DimensionError(f"lstm_cell: input {x.shape}, state {h.shape}/{c.shape}, "
                             f"weight {weight.shape}, bias {bias.shape}")
    z = _affine(T.concat([x, h], axis=1), weight, bias)
    H = hidden
    i = T.sigmoid(T.slice_last(z, 0, H))
    f = T.sigmoid(T.slice_last(z, H, 2 * H))
    o = T.sigmoid(T.slice_last(z, 2 * H, 3 * H))
    g = T.tanh(T.slice_last(z, 3 * H, 4 * H))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def cell_step(x: np.ndarray, state: LstmState, weight: np.ndarray, bias: np.ndarray) -> tuple:
    """Plain-array LSTM update for sampling; returns ``(output, new_state)``."""
    H = state.h.shape[-1]
    z = np.concatenate([x, state.h], axis=-1) @ weight + bias
    i = sigmoid_array(z[..., :H])
    f = sigmoid_array(z[..., H:2 * H])
    o = sigmoid_array(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * state.c + i * g
    h = o * np.tanh(c)
    return h, LstmState(h, c)


# ---------------------------------------------------------------- features


def note_features(play_prev: np.ndarray, artic_prev: np.ndarray, beats) -> np.ndarray:
    """Per-(step, note) inputs, ``[S x N x 69]``, from the previous step's bits.

    Columns: normalized note number, pitch-class one-hot (12), beat bits (4),
    previous play/articulate of notes n-12..n+12 interleaved (50), and the
    note's own previous play/articulate (2).
    """
    play = np.atleast_2d(np.asarray(play_prev, dtype=np.float64))
    artic = np.atleast_2d(np.asarray(artic_prev, dtype=np.float64))
    beats = np.atleast_1d(np.asarray(beats, dtype=np.int64))
    steps, n = play.shape
    if artic.shape != play.shape or beats.shape != (steps,):
        raise DimensionError(f"play {play.shape}, articulation {artic.shape}, beats {beats.shape}")
    out = np.zeros((steps, n, N_FEATURES))
    notes = np.arange(n)
    out[:, :, 0] = notes / max(n - 1, 1)
    out[:, notes, 1 + notes % 12] = 1.0
    for i in range(4):
        out[:, :, 13 + i] = ((beats >> i) & 1)[:, None]
    pad_p = np.pad(play, ((0, 0), (VICINITY, VICINITY)))
    pad_a = np.pad(artic, ((0, 0), (VICINITY, VICINITY)))
    for k in range(2 * VICINITY + 1):
        out[:, :, 17 + 2 * k] = pad_p[:, k:k + n]
        out[:, :, 18 + 2 * k] = pad_a[:, k:k + n]
    out[:, :, 67] = play
    out[:, :, 68] = artic
    return out


def _roll_bits(roll: PianoRoll, note_range: int) -> tuple:
    if roll.articulation is None:
        raise InputError("composer rolls need an articulation channel")
    if roll.frames.shape[1] != note_range:
        raise DimensionError(f"roll has {roll.frames.shape[1]} notes, model expects {note_range}")
    return roll.frames.astype(np.float64), roll.articulation.astype(np.float64)


# ------------------------------------------------------------------- model


class BiaxialModel:
    """Composer parameters.

    Weights start at U(+-1/sqrt(fan_in)) and LSTM forget-gate biases at 1.
    The output bias starts at OUTPUT_PRIOR (about 2 % on) because almost all
    notes are silent at any step; starting at 0.5 instead spends the first
    updates driving every unit towards "off", which saturates the gates and
    leaves training stuck at the base-rate loss.
    """

    FORGET_BIAS = 1.0
    OUTPUT_PRIOR = -4.0

    def __init__(self, config: BiaxialConfig | None = None, seed: int = 0, zero_init: bool = False):
        self.config = config or BiaxialConfig()
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)

        def add(name, shape, bound):
            data = np.zeros(shape) if zero_init else rng.uniform(-bound, bound, size=shape)
            self.params[name] = Parameter(name, Tensor.wrap(data))

        def add_lstm(prefix, n_in, h):
            add(f"{prefix}/weight", (n_in + h, 4 * h), 1.0 / np.sqrt(n_in + h))
            add(f"{prefix}/bias", (4 * h,), 0.0)
            if not zero_init:
                self[f"{prefix}/bias"].data[h:2 * h] = self.FORGET_BIAS

        width = N_FEATURES
        for k, h in enumerate(self.config.time_layer_sizes):
            add_lstm(f"time{k}", width, h)
            width = h
        width += 2
        for k, h in enumerate(self.config.note_layer_sizes):
            add_lstm(f"note{k}", width, h)
            width = h
        add("out/weight", (width, 2), 1.0 / np.sqrt(width))
        add("out/bias", (2,), 0.0)
        if not zero_init:
            self["out/bias"].data[:] = self.OUTPUT_PRIOR

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self.params):
            raise FormatError("composer parameter names do not match the configuration")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise FormatError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.tensor.data = arr.copy()

    def initial_states(self) -> list:
        n = self.config.note_range
        return [LstmState.zeros(n, h) for h in self.config.time_layer_sizes]


def time_axis(model: BiaxialModel, features: np.ndarray) -> Tensor:
    """Time-layer outputs ``[S x N x H]`` for a feature block ``[S x N x 69]``."""
    h = Tensor.wrap(features)
    for k in range(len(model.config.time_layer_sizes)):
        h = T.lstm(h, model[f"time{k}/weight"], model[f"time{k}/bias"])
    return h


def sequence_logits(model: BiaxialModel, roll: PianoRoll) -> Tensor:
    """Teacher-forced logits ``[N x S x 2]`` for predicting every frame of ``roll``."""
    play, artic = _roll_bits(roll, model.config.note_range)
    steps, n = play.shape
    prev_p = np.vstack([np.zeros((1, n)), play[:-1]])
    prev_a = np.vstack([np.zeros((1, n)), artic[:-1]])
    feats = note_features(prev_p, prev_a, np.arange(steps))
    t_out = T.transpose(time_axis(model, feats), (1, 0, 2))  # [N x S x H]
    below = np.zeros((n, steps, 2))
    below[1:, :, 0] = play[:, :-1].T
    below[1:, :, 1] = artic[:, :-1].T
    h = T.concat([t_out, Tensor.wrap(below)], axis=2)
    for k in range(len(model.config.note_layer_sizes)):
        h = T.lstm(h, model[f"note{k}/weight"], model[f"note{k}/bias"])
    width = h.shape[2]
    flat = _affine(T.reshape(h, (n * steps, width)), model["out/weight"], model["out/bias"])
    return T.reshape(flat, (n, steps, 2))


def composer_loss(model: BiaxialModel, roll: PianoRoll) -> Tensor:
    """Binary cross-entropy summed over the two bits, averaged per note per step."""
    play, artic = _roll_bits(roll, model.config.note_range)
    logits = sequence_logits(model, roll)
    targets = np.stack([play.T, artic.T], axis=2)
    return T.sigmoid_bce(logits, targets, weight=1.0 / (play.shape[0] * play.shape[1]))


@dataclass
class ComposerResult:
    model: BiaxialModel
    losses: list = field(default_factory=list)
    optimizer: Adam | None = None


def train_composer(corpus: Sequence[PianoRoll], config: BiaxialConfig | None = None,
                   steps: int = 1000, seed: int = 0, learning_rate: float = 1e-2,
                   target_loss: float | None = None,
                   callback: Callable[[int, float], None] | None = None) -> ComposerResult:
    """Adam on one corpus roll per step (seeded choice); stops early below ``target_loss``."""
    corpus = list(corpus)
    if not corpus:
        raise InputError("composer corpus is empty")
    model = BiaxialModel(config, seed=seed)
    for roll in corpus:
        _roll_bits(roll, model.config.note_range)
    opt = Adam(learning_rate)
    params = model.parameters()
    losses = []
    for step in range(steps):
        roll = corpus[int(np.random.default_rng([seed, step]).integers(len(corpus)))]
        Adam.zero_grad(params)
        with T.Tape() as tape:
            loss = composer_loss(model, roll)
        value = float(loss.data)
        losses.append(value)
        if callback is not None:
            callback(step, value)
        if target_loss is not None and value < target_loss:
            break
        T.backward(tape, loss, params)
        opt.step(params)
    return ComposerResult(model, losses, opt)


# ---------------------------------------------------------------- sampling


def forward_step(model: BiaxialModel, roll_prev: np.ndarray, beat: int, states: list,
                 temperature: float = 1.0, rng: np.random.Generator | None = None,
                 teacher: np.ndarray | None = None) -> tuple:
    """Advance one timestep.

    ``roll_prev`` is ``[N x 2]`` (play, articulate) of the previous step.
    Returns ``(probabilities [N x 2], bits [N x 2], new time-layer states)``.
    The note-axis pass goes upward; each note sees the bits chosen for the
    note below (or ``teacher``'s bits when given). Temperature 0 thresholds
    at 0.5; articulation is only emitted for played notes.
    """
    cfg = model.config
    n = cfg.note_range
    roll_prev = np.asarray(roll_prev, dtype=np.float64)
    if roll_prev.shape != (n, 2):
        raise DimensionError(f"roll_prev must be [{n} x 2], got {roll_prev.shape}")
    if len(states) != len(cfg.time_layer_sizes):
        raise DimensionError("one state per time layer expected")
    if temperature > 0 and rng is None and teacher is None:
        raise InputError("sampling at temperature > 0 needs an rng")
    x = note_features(roll_prev[:, 0][None], roll_prev[:, 1][None], [beat])[0]
    new_states = []
    for k, st in enumerate(states):
        x, st = cell_step(x, st, model[f"time{k}/weight"].data, model[f"time{k}/bias"].data)
        new_states.append(st)
    note_states = [LstmState.zeros(h) for h in cfg.note_layer_sizes]
    probs = np.empty((n, 2))
    bits = np.zeros((n, 2))
    below = np.zeros(2)
    w_out, b_out = model["out/weight"].data, model["out/bias"].data
    for note in range(n):
        h = np.concatenate([x[note], below])
        for k, st in enumerate(note_states):
            h, note_states[k] = cell_step(h, st, model[f"note{k}/weight"].data,
                                          model[f"note{k}/bias"].data)
        logits = h @ w_out + b_out
        probs[note] = sigmoid_array(logits)
        if teacher is not None:
            bits[note] = teacher[note]
        else:
            if temperature == 0:
                chosen = probs[note] > 0.5
            else:
                chosen = rng.random(2) < sigmoid_array(logits / temperature)
            play = bool(chosen[0])
            # a note that was silent must articulate when it starts
            artic = play and (bool(chosen[1]) or roll_prev[note, 0] == 0)
            bits[note] = (float(play), float(artic))
        below = bits[note]
    return probs, bits, new_states


def sample_roll(model: BiaxialModel, steps: int, temperature: float = 1.0, seed: int = 0,
                step_rate: float = DEFAULT_STEP_RATE) -> PianoRoll:
    rng = np.random.default_rng(seed)
    n = model.config.note_range
    play = np.zeros((steps, n), dtype=np.uint8)
    artic = np.zeros_like(play)
    prev = np.zeros((n, 2))
    states = model.initial_states()
    for t in range(steps):
        _, bits, states = forward_step(model, prev, t, states, temperature, rng)
        play[t], artic[t] = bits[:, 0], bits[:, 1]
        prev = bits
    return PianoRoll(play, step_rate, artic)


def sample_score(model: BiaxialModel, steps: int, temperature: float = 1.0, seed: int = 0,
                 step_rate: float = DEFAULT_STEP_RATE) -> MidiScore:
    """Ancestral sampling of ``steps`` timesteps turned into note events."""
    roll = sample_roll(model, steps, temperature, seed, step_rate)
    return roll_to_score(roll.frames, step_rate, roll.articulation)


def scores_to_corpus(scores: Sequence[MidiScore], step_rate: float = DEFAULT_STEP_RATE) -> list:
    return [score_to_roll(s, step_rate) for s in scores]


def looped_pattern_roll(pattern: Sequence[Sequence[int]], repeats: int,
                        step_rate: float = DEFAULT_STEP_RATE) -> PianoRoll:
    """Roll repeating ``pattern`` (one list of sounding notes per step); repeated notes re-articulate."""
    steps = len(pattern) * repeats
    play = np.zeros((steps, 128), dtype=np.uint8)
    artic = np.zeros_like(play)
    for t in range(steps):
        for note in pattern[t % len(pattern)]:
            play[t, note] = 1
            artic[t, note] = 1
    return PianoRoll(play, step_rate, artic)


# ------------------------------------------------------------- checkpoints


def save_composer(model: BiaxialModel, path, optimizer: Adam | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    checkpoint.save(path, {"kind": "biaxial", "config": model.config.to_dict(),
                           "step": optimizer.step_count if optimizer else 0}, arrays)


def load_composer(path) -> BiaxialModel:
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "biaxial":
        raise FormatError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a biaxial one")
    model = BiaxialModel(BiaxialConfig.from_dict(meta["config"]))
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    return model
