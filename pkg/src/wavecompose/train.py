"""Aligned dataset assembly, the Adam training loop, checkpoints and loss comparisons."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, tensor as T
from .codec import PcmWaveform, QuantizedWaveform, mulaw_encode
from .errors import AlignmentError, FormatError, InputError, TrainingError
from .optim import Adam
from .symbolic import DEFAULT_FRAME_RATE, LcSeries, MidiScore, score_to_roll, upsample_roll
from .wavenet import WaveNetConfig, WaveNetModel, forward, receptive_field

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    steps: int = 1000
    window_length: int = 4096
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0 and f.name != "seed":
                raise InputError(f"{f.name} must be positive")

    def optimizer(self) -> Adam:
        return Adam(self.learning_rate, self.beta1, self.beta2, self.epsilon)


@dataclass
class AlignedExample:
    audio: QuantizedWaveform
    lc: LcSeries
    source: str
    offset: int

    def __post_init__(self):
        if len(self.audio) != len(self.lc):
            raise AlignmentError(f"{self.source}@{self.offset}: audio/LC lengths differ")


def build_dataset(pairs: Sequence, config: TrainConfig, model_config: WaveNetConfig) -> list:
    """Encode each (waveform, score[, source id]) pair and cut aligned windows.

    Windows are spread across each source at evenly spaced offsets with a
    seeded random jitter, always including both ends, so every sample of the
    source is covered.
    """
    rf = receptive_field(model_config)
    L = config.window_length
    if L < rf + 1:
        raise InputError(f"window length {L} must be at least receptive field + 1 = {rf + 1}")
    rng = np.random.default_rng(config.seed)
    examples = []
    for i, pair in enumerate(pairs):
        pcm, score = pair[0], pair[1]
        source = pair[2] if len(pair) > 2 else f"source{i}"
        if pcm.sample_rate != model_config.sample_rate:
            raise AlignmentError(f"{source}: sample rate {pcm.sample_rate} != "
                                 f"{model_config.sample_rate}")
        mismatch = abs(pcm.duration - score.duration)
        if mismatch > 1.0 / config.frame_rate + 1e-9:
            raise AlignmentError(f"{source}: audio lasts {pcm.duration:.4f}s but score "
                                 f"{score.duration:.4f}s")
        qw = mulaw_encode(pcm, model_config.quantization_channels)
        roll = score_to_roll(score, config.frame_rate)
        lc = upsample_roll(roll, pcm.sample_rate, len(pcm))
        n = len(pcm)
        if n < L:
            raise InputError(f"{source}: {n} samples is shorter than one window ({L})")
        count = max(1, math.ceil(n / L))
        base = np.linspace(0, n - L, count + 1 if count > 1 else 1)
        jitter = rng.integers(-L // 4, L // 4 + 1, size=base.size)
        jitter[0] = jitter[-1] = 0
        offsets = np.clip(np.round(base).astype(int) + jitter, 0, n - L)
        for off in offsets:
            off = int(off)
            examples.append(AlignedExample(
                QuantizedWaveform(qw.bins[off:off + L], qw.q_channels, qw.sample_rate),
                LcSeries(lc.columns[:, off:off + L], lc.sample_rate), source, off))
    return examples


def loss_mask(length: int, rf: int) -> np.ndarray:
    """Logit columns whose target index (column + 1) is at least ``rf``."""
    cols = np.arange(length)
    return (cols >= rf - 1) & (cols <= length - 2)


def batch_loss(model: WaveNetModel, batch: Sequence[AlignedExample]) -> T.Tensor:
    """Mean next-sample cross-entropy over the batch (call inside a Tape to train)."""
    c = model.config
    bins = np.stack([ex.audio.bins for ex in batch])
    rf = receptive_field(c)
    length = bins.shape[1]
    targets = np.zeros_like(bins)
    targets[:, :-1] = bins[:, 1:]
    mask = np.broadcast_to(loss_mask(length, rf), bins.shape)
    y = np.stack([ex.lc.columns for ex in batch]).astype(np.float64) if c.conditioned else None
    logits = forward(model, bins, y)
    return T.softmax_xent(logits, targets, mask)


def train_step(model: WaveNetModel, batch: Sequence[AlignedExample], optimizer: Adam) -> float:
    """One Adam update on ``batch``; returns the pre-update loss."""
    if not batch:
        raise InputError("empty batch")
    params = model.parameters()
    Adam.zero_grad(params)
    with T.Tape() as tape:
        loss = batch_loss(model, batch)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at optimizer step {optimizer.step_count + 1}")
    try:
        T.backward(tape, loss, params)
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite gradient at step {optimizer.step_count + 1}: {exc}") from exc
    optimizer.step(params)
    return value


def select_batch(dataset: Sequence, config: TrainConfig, step: int) -> list:
    """Examples for ``step``; depends only on (seed, step) so resumed runs see the same data."""
    rng = np.random.default_rng([config.seed, step])
    idx = rng.choice(len(dataset), size=config.batch_size, replace=len(dataset) < config.batch_size)
    return [dataset[i] for i in idx]


def train(model: WaveNetModel, dataset: Sequence, config: TrainConfig, steps: int | None = None,
          optimizer: Adam | None = None, start_step: int = 0,
          callback: Callable[[int, float], None] | None = None) -> list:
    """Run ``steps`` updates starting at ``start_step``; returns the per-step losses."""
    if not dataset:
        raise InputError("empty dataset")
    steps = config.steps if steps is None else steps
    optimizer = optimizer or config.optimizer()
    losses = []
    for step in range(start_step, start_step + steps):
        loss = train_step(model, select_batch(dataset, config, step), optimizer)
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return losses


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def write_loss_csv(path, losses: Sequence[float], start_step: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            w.writerow([start_step + i, repr(float(loss))])


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


def run_comparison(dataset: Sequence, conditioned_config: WaveNetConfig,
                   unconditioned_config: WaveNetConfig, config: TrainConfig,
                   steps: int | None = None, out_dir=None, progress=None) -> tuple:
    """Train both variants from the same seed on the same batches; returns both loss curves."""
    curves = []
    for name, mc in (("conditioned", conditioned_config), ("unconditioned", unconditioned_config)):
        model = WaveNetModel(mc, seed=config.seed)
        cb = (lambda s, l, n=name: progress(n, s, l)) if progress else None
        losses = train(model, dataset, config, steps, callback=cb)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_loss_csv(Path(out_dir) / f"{name}.csv", losses)
        curves.append(losses)
    return curves[0], curves[1]


# -------------------------------------------------------------- checkpoints


def save_checkpoint(model: WaveNetModel, optimizer: Adam | None, step: int, path,
                    kind: str = "wavenet") -> None:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    meta = {"kind": kind, "config": model.config.to_dict(), "step": int(step)}
    if optimizer is not None:
        meta["optimizer"] = {"learning_rate": optimizer.learning_rate, "beta1": optimizer.beta1,
                             "beta2": optimizer.beta2, "epsilon": optimizer.epsilon,
                             "step_count": optimizer.step_count}
        for k in optimizer.m:
            arrays[f"adam_m/{k}"] = optimizer.m[k]
            arrays[f"adam_v/{k}"] = optimizer.v[k]
    checkpoint.save(path, meta, arrays)


def load_checkpoint(path) -> tuple:
    """Return ``(model, optimizer or None, step)``."""
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "wavenet":
        raise FormatError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a wavenet one")
    config = WaveNetConfig.from_dict(meta["config"])
    model = WaveNetModel(config)
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = Adam(o["learning_rate"], o["beta1"], o["beta2"], o["epsilon"], o["step_count"])
        opt.m = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
        opt.v = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}
    return model, opt, int(meta["step"])


def synthetic_pairs(count: int, duration: float, sample_rate: int, seed: int = 0,
                    **melody) -> list:
    """Sine-rendered random monophonic melodies: the desk-scale aligned corpus."""
    from .symbolic import random_monophonic_score, render_sine

    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        score = random_monophonic_score(rng, duration, **melody)
        pairs.append((render_sine(score, sample_rate), score, f"synthetic{i}"))
    return pairs
