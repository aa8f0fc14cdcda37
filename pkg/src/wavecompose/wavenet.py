"""Locally conditioned WaveNet: dilated causal stack, gated units, cached stepping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .codec import QuantizedWaveform
from .errors import AlignmentError, ContractError, DimensionError, InputError
from .symbolic import N_NOTES, LcSeries
from .tensor import Parameter, Tensor, exact_matmul, relu_array, sigmoid_array


def doubling_schedule(blocks: int, max_dilation: int) -> tuple:
    """1, 2, 4, ..., max_dilation repeated ``blocks`` times."""
    block = []
    d = 1
    while d <= max_dilation:
        block.append(d)
        d *= 2
    return tuple(block * blocks)


@dataclass
class WaveNetConfig:
    initial_filter_width: int = 32
    dilation_filter_width: int = 2
    dilation_layers: int = 30
    residual_channels: int = 32
    dilation_channels: int = 32
    skip_channels: int = 512
    initial_lc_channels: int = 128
    dilation_lc_channels: int = 16
    quantization_channels: int = 128
    dilation_schedule: tuple = field(default=None)
    lc_filter_width: int = 32
    conditioned: bool = True
    sample_rate: int = 16000

    def __post_init__(self):
        if self.dilation_schedule is None:
            self.dilation_schedule = tuple(2 ** (i % 10) for i in range(self.dilation_layers))
        self.dilation_schedule = tuple(int(d) for d in self.dilation_schedule)
        if len(self.dilation_schedule) != self.dilation_layers:
            raise InputError(f"dilation schedule has {len(self.dilation_schedule)} entries, "
                             f"expected {self.dilation_layers}")
        if any(d < 1 for d in self.dilation_schedule):
            raise InputError("dilations must be >= 1")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v < 1:
                raise InputError(f"{f.name} must be positive")
        if self.quantization_channels < 2:
            raise InputError("need at least 2 quantization channels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_schedule"] = list(self.dilation_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WaveNetConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def unconditioned_baseline(config: WaveNetConfig | None = None) -> WaveNetConfig:
    """The 50-layer unconditioned variant: same settings, five doubling blocks, no LC path."""
    base = config or WaveNetConfig()
    d = base.to_dict()
    d.update(conditioned=False, dilation_layers=50, dilation_schedule=doubling_schedule(5, 512))
    return WaveNetConfig.from_dict(d)


def desk_config(conditioned: bool = True) -> WaveNetConfig:
    """Reduced model for desk-scale runs: two blocks of 1..64, residual/skip 16/64, 8 kHz."""
    return WaveNetConfig(dilation_layers=14, dilation_schedule=doubling_schedule(2, 64),
                         residual_channels=16, dilation_channels=16, skip_channels=64,
                         conditioned=conditioned, sample_rate=8000)


def receptive_field(config: WaveNetConfig) -> int:
    """Number of input samples that can influence one output column."""
    return config.initial_filter_width + sum(
        (config.dilation_filter_width - 1) * d for d in config.dilation_schedule)


def conditioning_field(config: WaveNetConfig) -> int:
    """Number of LC columns that can influence one output column (0 if unconditioned)."""
    if not config.conditioned:
        return 0
    return config.lc_filter_width + sum(
        (config.dilation_filter_width - 1) * d for d in config.dilation_schedule)


class WaveNetModel:
    """Parameter container; see :func:`forward` and :func:`incremental_step`."""

    def __init__(self, config: WaveNetConfig, seed: int = 0, zero_head: bool = True):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        c = config
        q, r, dch, s = (c.quantization_channels, c.residual_channels, c.dilation_channels,
                        c.skip_channels)

        def add(name, shape, fan_in, zero=False):
            if zero:
                data = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            self.params[name] = Parameter(name, Tensor.wrap(data))

        # shared parameters first so a conditioned model and an unconditioned one
        # built from the same seed hold identical W values
        add("input/kernel", (r, q, c.initial_filter_width), q * c.initial_filter_width)
        add("input/bias", (r,), 1, zero=True)
        for k, _ in enumerate(c.dilation_schedule):
            fan = r * c.dilation_filter_width
            add(f"layer{k}/filter", (dch, r, c.dilation_filter_width), fan)
            add(f"layer{k}/gate", (dch, r, c.dilation_filter_width), fan)
            add(f"layer{k}/filter_bias", (dch,), 1, zero=True)
            add(f"layer{k}/gate_bias", (dch,), 1, zero=True)
            add(f"layer{k}/residual", (r, dch, 1), dch)
            add(f"layer{k}/residual_bias", (r,), 1, zero=True)
            add(f"layer{k}/skip", (s, dch, 1), dch)
            add(f"layer{k}/skip_bias", (s,), 1, zero=True)
        add("head/hidden", (s, s, 1), s)
        add("head/hidden_bias", (s,), 1, zero=True)
        add("head/output", (q, s, 1), s, zero=zero_head)
        add("head/output_bias", (q,), 1, zero=True)
        if c.conditioned:
            lc = c.dilation_lc_channels
            add("lc/kernel", (lc, c.initial_lc_channels, c.lc_filter_width),
                c.initial_lc_channels * c.lc_filter_width)
            add("lc/bias", (lc,), 1, zero=True)
            for k, _ in enumerate(c.dilation_schedule):
                add(f"layer{k}/lc_filter", (dch, lc, 1), lc)
                add(f"layer{k}/lc_gate", (dch, lc, 1), lc)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ContractError(f"parameter mismatch: missing {sorted(missing)[:3]}, "
                                f"unexpected {sorted(extra)[:3]}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ContractError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.tensor.data = arr.copy()

    def lc_parameters(self) -> list:
        return [p for n, p in self.params.items() if n.startswith("lc/") or "/lc_" in n]


# ------------------------------------------------------------------ forward


def _as_onehot(x, q: int) -> np.ndarray:
    if isinstance(x, QuantizedWaveform):
        if x.q_channels != q:
            raise DimensionError(f"waveform has {x.q_channels} channels, model expects {q}")
        return x.one_hot()
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    if np.issubdtype(x.dtype, np.integer) and x.ndim in (1, 2):
        if x.size and (x.min() < 0 or x.max() >= q):
            raise IndexError(f"bins must lie in [0, {q})")
        out = np.zeros(x.shape[:-1] + (q, x.shape[-1]))
        if x.ndim == 1:
            out[x, np.arange(x.size)] = 1.0
        else:
            b, t = np.meshgrid(np.arange(x.shape[0]), np.arange(x.shape[1]), indexing="ij")
            out[b, x, t] = 1.0
        return out
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-2] != q:
        raise DimensionError(f"expected one-hot input with {q} rows, got {x.shape}")
    return x


def _as_lc(y, channels: int) -> np.ndarray:
    if isinstance(y, LcSeries):
        y = y.columns
    if isinstance(y, Tensor):
        y = y.data
    y = np.asarray(y, dtype=np.float64)
    if y.ndim not in (2, 3) or y.shape[-2] != channels:
        raise DimensionError(f"expected LC series with {channels} rows, got {y.shape}")
    return y


def lc_reduce(model: WaveNetModel, y) -> Tensor:
    """Causal convolution taking the 128-row LC series down to the per-layer LC width."""
    c = model.config
    if not c.conditioned:
        raise ContractError("model has no conditioning path")
    y = y if isinstance(y, Tensor) else Tensor.wrap(_as_lc(y, c.initial_lc_channels))
    return T.conv1d(y, model["lc/kernel"], 1, True, model["lc/bias"])


def gated_activation(model: WaveNetModel, x_in: Tensor, y_in: Tensor | None, layer: int) -> Tensor:
    """tanh(W_f*x + V_f*y) . sigmoid(W_g*x + V_g*y) for dilated layer ``layer``.

    With ``y_in`` absent the conditioning terms are dropped.
    """
    c = model.config
    if (y_in is not None) != c.conditioned:
        raise ContractError("conditioning input must be given iff the model is conditioned")
    d = c.dilation_schedule[layer]
    p = f"layer{layer}/"
    if y_in is None:
        f = T.conv1d(x_in, model[p + "filter"], d, True, model[p + "filter_bias"])
        g = T.conv1d(x_in, model[p + "gate"], d, True, model[p + "gate_bias"])
    else:
        if y_in.shape[-1] != x_in.shape[-1]:
            raise DimensionError("audio and LC activations differ in length")
        f = T.add(T.conv1d(x_in, model[p + "filter"], d),
                  T.conv1d(y_in, model[p + "lc_filter"], 1, True, model[p + "filter_bias"]))
        g = T.add(T.conv1d(x_in, model[p + "gate"], d),
                  T.conv1d(y_in, model[p + "lc_gate"], 1, True, model[p + "gate_bias"]))
    return T.mul(T.tanh(f), T.sigmoid(g))


def forward(model: WaveNetModel, x, y=None, exact: bool = False) -> Tensor:
    """Logits ``[Q x T]`` (or ``[B x Q x T]``); column t scores sample t+1.

    ``x`` is a one-hot ``[Q x T]`` array/Tensor, an integer bin array, or a
    :class:`QuantizedWaveform`; a Tensor stays on the tape, so gradients reach it. ``y`` is the ``[128 x T]`` conditioning
    series, required iff the model is conditioned. ``exact`` selects the
    fixed-order arithmetic shared with :func:`incremental_step`.
    """
    if exact:
        with T.exact_arithmetic():
            return forward(model, x, y, exact=False)
    c = model.config
    xh = _as_onehot(x, c.quantization_channels)
    if c.conditioned:
        if y is None:
            raise ContractError("conditioned model needs an LC series")
        yh = _as_lc(y, c.initial_lc_channels)
        if yh.shape[-1] != xh.shape[-1] or yh.ndim != xh.ndim:
            raise AlignmentError(f"audio length {xh.shape[-1]} != LC length {yh.shape[-1]}")
        cond = lc_reduce(model, Tensor.wrap(yh))
    else:
        if y is not None:
            raise ContractError("unconditioned model takes no LC series")
        cond = None
    xin = x if isinstance(x, Tensor) else Tensor.wrap(xh)
    h = T.conv1d(xin, model["input/kernel"], 1, True, model["input/bias"])
    skip = None
    for k in range(c.dilation_layers):
        z = gated_activation(model, h, cond, k)
        s = T.conv1d(z, model[f"layer{k}/skip"], 1, True, model[f"layer{k}/skip_bias"])
        skip = s if skip is None else T.add(skip, s)
        h = T.add(h, T.conv1d(z, model[f"layer{k}/residual"], 1, True,
                              model[f"layer{k}/residual_bias"]))
    out = T.relu(skip)
    out = T.conv1d(out, model["head/hidden"], 1, True, model["head/hidden_bias"])
    out = T.relu(out)
    return T.conv1d(out, model["head/output"], 1, True, model["head/output_bias"])


# ------------------------------------------------------------ cached steps


class RingBuffer:
    """The last ``capacity`` columns pushed, readable by age (1 = newest)."""

    def __init__(self, channels: int, capacity: int):
        self.capacity = capacity
        self.data = np.zeros((channels, capacity))
        self.head = 0

    def column(self, age: int) -> np.ndarray:
        return self.data[:, (self.head - age) % self.capacity]

    def push(self, col: np.ndarray) -> None:
        if self.capacity:
            self.data[:, self.head] = col
            self.head = (self.head + 1) % self.capacity

    def reset(self) -> None:
        self.data[:] = 0.0
        self.head = 0


def _flat(kernel: np.ndarray) -> np.ndarray:
    c_out, c_in, width = kernel.shape
    return kernel.transpose(0, 2, 1).reshape(c_out, width * c_in)


class LayerCache:
    """Per-stream state for :func:`incremental_step`.

    Holds one ring buffer per causal convolution sized exactly
    ``(width - 1) * dilation`` columns, plus a snapshot of the model's
    kernels in the flattened tap-major layout used by exact arithmetic.
    """

    def __init__(self, model: WaveNetModel):
        c = model.config
        self.model = model
        self.config_snapshot = c.to_dict()
        self.input = RingBuffer(c.quantization_channels, c.initial_filter_width - 1)
        self.lc = RingBuffer(c.initial_lc_channels, c.lc_filter_width - 1) if c.conditioned else None
        self.layers = [RingBuffer(c.residual_channels, (c.dilation_filter_width - 1) * d)
                       for d in c.dilation_schedule]
        self.kernels = {name: _flat(p.data) if p.data.ndim == 3 else p.data.copy()
                        for name, p in model.params.items()}
        self.steps = 0

    def reset(self) -> None:
        for buf in [self.input, self.lc, *self.layers]:
            if buf is not None:
                buf.reset()
        self.steps = 0


def _causal_column(buf: RingBuffer, current: np.ndarray, width: int, dilation: int) -> np.ndarray:
    taps = [buf.column((width - 1 - k) * dilation) for k in range(width - 1)]
    taps.append(current)
    return np.concatenate(taps)[:, None]


def incremental_step(model: WaveNetModel, sample: int, lc_col, caches: LayerCache) -> np.ndarray:
    """Logits for the next sample given the current one; advances ``caches`` by one step.

    Produces exactly the last column of ``forward(..., exact=True)`` over the
    whole history fed so far.
    """
    c = model.config
    if caches.model is not model or caches.config_snapshot != c.to_dict():
        raise ContractError("cache was built for a different model/config")
    q = c.quantization_channels
    if not 0 <= sample < q:
        raise IndexError(f"sample {sample} outside [0, {q})")
    K = caches.kernels
    x = np.zeros(q)
    x[sample] = 1.0
    col = _causal_column(caches.input, x, c.initial_filter_width, 1)
    h = exact_matmul(K["input/kernel"], col)[:, 0] + K["input/bias"]
    caches.input.push(x)

    cond = None
    if c.conditioned:
        if lc_col is None:
            raise ContractError("conditioned model needs an LC column")
        y = np.asarray(lc_col, dtype=np.float64).reshape(-1)
        if y.size != c.initial_lc_channels:
            raise DimensionError(f"LC column has {y.size} rows, expected {c.initial_lc_channels}")
        cond = exact_matmul(K["lc/kernel"], _causal_column(caches.lc, y, c.lc_filter_width, 1))[:, 0]
        cond = cond + K["lc/bias"]
        caches.lc.push(y)
    elif lc_col is not None:
        raise ContractError("unconditioned model takes no LC column")

    skip = None
    w = c.dilation_filter_width
    for k, d in enumerate(c.dilation_schedule):
        p = f"layer{k}/"
        buf = caches.layers[k]
        col = _causal_column(buf, h, w, d)
        if cond is None:
            f = exact_matmul(K[p + "filter"], col)[:, 0] + K[p + "filter_bias"]
            g = exact_matmul(K[p + "gate"], col)[:, 0] + K[p + "gate_bias"]
        else:
            yc = cond[:, None]
            f = exact_matmul(K[p + "filter"], col)[:, 0] + (
                exact_matmul(K[p + "lc_filter"], yc)[:, 0] + K[p + "filter_bias"])
            g = exact_matmul(K[p + "gate"], col)[:, 0] + (
                exact_matmul(K[p + "lc_gate"], yc)[:, 0] + K[p + "gate_bias"])
        buf.push(h)
        z = (np.tanh(f) * sigmoid_array(g))[:, None]
        s = exact_matmul(K[p + "skip"], z)[:, 0] + K[p + "skip_bias"]
        skip = s if skip is None else skip + s
        h = h + (exact_matmul(K[p + "residual"], z)[:, 0] + K[p + "residual_bias"])
    out = relu_array(skip)[:, None]
    out = exact_matmul(K["head/hidden"], out)[:, 0] + K["head/hidden_bias"]
    out = relu_array(out)[:, None]
    caches.steps += 1
    return exact_matmul(K["head/output"], out)[:, 0] + K["head/output_bias"]
