"""From-scratch LSTM: forward pass, backpropagation through time, Adam, model I/O.

No autodiff anywhere; every gradient below is derived by hand and checked
against central finite differences in the test suite. All arithmetic is
float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .domain import Block, FeatureTuple, LabeledTuple, ScalerParams

_MAGIC = b"BFLM"
_FORMAT_VERSION = 1


def sigmoid(x):
    """Logistic function 1/(1+exp(-x)), stable for large |x|.

    Accepts scalars or arrays; scalars come back as float.
    """
    arr = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(arr))
    out = np.where(arr >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))
    return float(out) if out.ndim == 0 else out


def softmax(logits):
    """Max-shifted softmax over the last axis."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = arr - np.max(arr, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def argmax_class(p) -> int:
    """Index of the largest probability; ties go to the lowest index."""
    arr = np.asarray(p)
    if arr.size == 0:
        raise ValueError("argmax of an empty vector")
    return int(np.argmax(arr))


@dataclass
class LstmParams:
    """Gate weights over [h, x], gate biases, and the dense head.

    `ws`/`bs` hold the 2-class stop logits head and are None in
    regression-only models.
    """

    wf: np.ndarray
    wu: np.ndarray
    wc: np.ndarray
    wo: np.ndarray
    bf: np.ndarray
    bu: np.ndarray
    bc: np.ndarray
    bo: np.ndarray
    wy: np.ndarray
    by: np.ndarray
    ws: Optional[np.ndarray] = None
    bs: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        h = self.wf.shape[0]
        hi = self.wf.shape[1]
        if hi <= h:
            raise ValueError(f"gate width {hi} must exceed hidden size {h}")
        for name in ("wf", "wu", "wc", "wo"):
            if getattr(self, name).shape != (h, hi):
                raise ValueError(f"{name} shape mismatch")
        for name in ("bf", "bu", "bc", "bo"):
            if getattr(self, name).shape != (h,):
                raise ValueError(f"{name} shape mismatch")
        if self.wy.shape[1] != h or self.by.shape != (self.wy.shape[0],):
            raise ValueError("head shape mismatch")
        if (self.ws is None) != (self.bs is None):
            raise ValueError("ws and bs must be given together")
        if self.ws is not None:
            if self.ws.shape != (2, h) or self.bs.shape != (2,):
                raise ValueError("stop head shape mismatch")
        for name, arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def hidden_size(self) -> int:
        return self.wf.shape[0]

    @property
    def input_size(self) -> int:
        return self.wf.shape[1] - self.wf.shape[0]

    @property
    def output_size(self) -> int:
        return self.wy.shape[0]

    @property
    def stop_mode(self) -> bool:
        return self.ws is not None

    def arrays(self) -> list:
        """(name, array) pairs in the fixed serialization order."""
        out = [("wf", self.wf), ("wu", self.wu), ("wc", self.wc), ("wo", self.wo),
               ("bf", self.bf), ("bu", self.bu), ("bc", self.bc), ("bo", self.bo),
               ("wy", self.wy), ("by", self.by)]
        if self.ws is not None:
            out += [("ws", self.ws), ("bs", self.bs)]
        return out

    def copy(self) -> "LstmParams":
        kwargs = {name: arr.copy() for name, arr in self.arrays()}
        return LstmParams(**kwargs)


@dataclass(frozen=True)
class LstmState:
    """Recurrent carry: cell state c and hidden state h."""

    c: np.ndarray
    h: np.ndarray

    def __post_init__(self) -> None:
        if self.c.shape != self.h.shape:
            raise ValueError("c and h must share a shape")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.h))):
            raise ValueError("non-finite state")


def zero_state(hidden_size: int) -> LstmState:
    return LstmState(c=np.zeros(hidden_size), h=np.zeros(hidden_size))


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters for the Adam-driven BPTT loop."""

    batch_size: int = 30
    hidden_size: int = 400
    learning_rate: float = 5e-4
    epochs: int = 200
    input_features: int = 3
    output_features: int = 3
    seed: int = 0
    mode: str = "regression"  # or "stop"
    k: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_scale: float = 0.08

    def __post_init__(self) -> None:
        for name in ("batch_size", "hidden_size", "input_features",
                     "output_features", "k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.learning_rate < 1.0:
            raise ValueError(f"learning_rate must be in [0,1), got {self.learning_rate}")
        if self.mode not in ("regression", "stop"):
            raise ValueError(f"mode must be 'regression' or 'stop', got {self.mode!r}")
        if self.k < 3:
            raise ValueError("k must be >= 3")


@dataclass(frozen=True)
class TrainingTrace:
    """Per-epoch mean training and validation losses."""

    train_losses: tuple
    val_losses: tuple

    def __post_init__(self) -> None:
        if len(self.train_losses) != len(self.val_losses):
            raise ValueError("trace lengths differ")

    def write_csv(self, stream) -> None:
        stream.write("epoch,train_loss,val_loss\n")
        for i, (tr, va) in enumerate(zip(self.train_losses, self.val_losses), 1):
            stream.write(f"{i},{tr!r},{va!r}\n")


def init_params(cfg: TrainConfig) -> LstmParams:
    """Seeded uniform(-init_scale, init_scale) initialization, fixed draw order."""
    rng = np.random.default_rng(cfg.seed)
    h, i, o = cfg.hidden_size, cfg.input_features, cfg.output_features
    s = cfg.init_scale

    def draw(*shape):
        return rng.uniform(-s, s, size=shape)

    kwargs = dict(
        wf=draw(h, h + i), wu=draw(h, h + i), wc=draw(h, h + i), wo=draw(h, h + i),
        bf=draw(h), bu=draw(h), bc=draw(h), bo=draw(h),
        wy=draw(o, h), by=draw(o),
    )
    if cfg.mode == "stop":
        kwargs["ws"] = draw(2, h)
        kwargs["bs"] = draw(2)
    return LstmParams(**kwargs)


def lstm_cell_step(x_t, state: LstmState, params: LstmParams) -> LstmState:
    """One recurrence step.

    f = sigma(Wf.[h,x] + bf), u = sigma(Wu.[h,x] + bu),
    g = tanh(Wc.[h,x] + bc), c' = c*f + g*u,
    o = sigma(Wo.[h,x] + bo), h' = o*tanh(c').
    """
    x = np.asarray(x_t, dtype=np.float64)
    a = np.concatenate([state.h, x])
    if a.shape[0] != params.wf.shape[1]:
        raise ValueError(f"input size {x.shape[0]} does not fit gate width "
                         f"{params.wf.shape[1]} (hidden {params.hidden_size})")
    f = sigmoid(params.wf @ a + params.bf)
    u = sigmoid(params.wu @ a + params.bu)
    g = np.tanh(params.wc @ a + params.bc)
    c = state.c * f + g * u
    o = sigmoid(params.wo @ a + params.bo)
    h = o * np.tanh(c)
    return LstmState(c=c, h=h)


def _as_input_array(features, input_size: int) -> np.ndarray:
    if isinstance(features, np.ndarray):
        arr = features.astype(np.float64, copy=False)
    else:
        rows = []
        for item in features:
            if isinstance(item, FeatureTuple):
                rows.append((item.lat, item.lon, item.sp))
            else:
                rows.append(tuple(item))
        arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != input_size:
        raise ValueError(f"expected (steps, {input_size}) inputs, got {arr.shape}")
    return arr


def forward(features, params: LstmParams):
    """Run the cell over one sequence from zero state and apply the head.

    The final hidden state passes through ReLU before the dense head, so a
    zero-parameter network outputs exactly the head bias. Returns
    (regression outputs, stop probabilities or None).
    """
    x = _as_input_array(features, params.input_size)
    if x.shape[0] == 0:
        raise ValueError("empty input sequence")
    state = zero_state(params.hidden_size)
    for t in range(x.shape[0]):
        state = lstm_cell_step(x[t], state, params)
    r = np.maximum(state.h, 0.0)
    y = params.wy @ r + params.by
    probs = softmax(params.ws @ r + params.bs) if params.stop_mode else None
    return y, probs


def loss(prediction, label, mode: str = "regression") -> float:
    """MSE over the regression outputs, plus cross-entropy in stop mode.

    In stop mode `prediction` is (outputs, class probabilities) as returned
    by forward, and `label` is (target outputs, is_stop flag); the two terms
    are summed with weight 1 each.
    """
    if mode == "regression":
        y = np.asarray(prediction, dtype=np.float64)
        target = np.asarray(label, dtype=np.float64)
        if y.shape != target.shape:
            raise ValueError(f"shape mismatch: {y.shape} vs {target.shape}")
        return float(np.mean((y - target) ** 2))
    if mode == "stop":
        y, probs = prediction
        target, flag = label
        mse = loss(y, target, "regression")
        p = float(np.asarray(probs)[int(flag)])
        return mse - math.log(max(p, 1e-300))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# Batched internals. Shapes: x (B, T, I); caches are per-step lists.

def _forward_batch(x: np.ndarray, params: LstmParams, need_cache: bool):
    batch, steps, _ = x.shape
    h = np.zeros((batch, params.hidden_size))
    c = np.zeros((batch, params.hidden_size))
    cache = [] if need_cache else None
    for t in range(steps):
        a = np.concatenate([h, x[:, t, :]], axis=1)
        f = sigmoid(a @ params.wf.T + params.bf)
        u = sigmoid(a @ params.wu.T + params.bu)
        g = np.tanh(a @ params.wc.T + params.bc)
        c_new = c * f + g * u
        o = sigmoid(a @ params.wo.T + params.bo)
        tc = np.tanh(c_new)
        h = o * tc
        if need_cache:
            cache.append((a, f, u, g, o, c, tc))
        c = c_new
    r = np.maximum(h, 0.0)
    y = r @ params.wy.T + params.by
    logits = r @ params.ws.T + params.bs if params.stop_mode else None
    return y, logits, r, h, cache


def _batch_loss_terms(y, logits, targets, flags):
    delta = y - targets
    per_block = np.sum(delta * delta, axis=1) / y.shape[1]
    if logits is not None:
        shifted = logits - np.max(logits, axis=1, keepdims=True)
        log_z = np.log(np.sum(np.exp(shifted), axis=1))
        per_block = per_block + log_z - shifted[np.arange(len(flags)), flags]
    return float(np.mean(per_block)), delta


def _loss_batch(x, targets, flags, params) -> float:
    y, logits, _, _, _ = _forward_batch(x, params, need_cache=False)
    value, _ = _batch_loss_terms(y, logits, targets, flags)
    return value


def _backward_batch(x, targets, flags, params):
    """Mean loss over the batch and its exact gradients, by hand-rolled BPTT."""
    batch = x.shape[0]
    hidden = params.hidden_size
    y, logits, r, h_last, cache = _forward_batch(x, params, need_cache=True)
    value, delta = _batch_loss_terms(y, logits, targets, flags)

    dy = (2.0 / y.shape[1]) * delta / batch
    grads = {"wy": dy.T @ r, "by": dy.sum(axis=0)}
    dr = dy @ params.wy
    if logits is not None:
        probs = softmax(logits)
        probs[np.arange(batch), flags] -= 1.0
        dlogits = probs / batch
        grads["ws"] = dlogits.T @ r
        grads["bs"] = dlogits.sum(axis=0)
        dr = dr + dlogits @ params.ws

    dh = dr * (h_last > 0.0)
    dc_next = np.zeros((batch, hidden))
    for name in ("wf", "wu", "wc", "wo"):
        grads[name] = np.zeros_like(getattr(params, name))
    for name in ("bf", "bu", "bc", "bo"):
        grads[name] = np.zeros_like(getattr(params, name))

    for t in range(x.shape[1] - 1, -1, -1):
        a, f, u, g, o, c_prev, tc = cache[t]
        do = dh * tc
        dzo = do * o * (1.0 - o)
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dzf = dc * c_prev * f * (1.0 - f)
        dzu = dc * g * u * (1.0 - u)
        dzg = dc * u * (1.0 - g * g)
        grads["wf"] += dzf.T @ a
        grads["wu"] += dzu.T @ a
        grads["wc"] += dzg.T @ a
        grads["wo"] += dzo.T @ a
        grads["bf"] += dzf.sum(axis=0)
        grads["bu"] += dzu.sum(axis=0)
        grads["bc"] += dzg.sum(axis=0)
        grads["bo"] += dzo.sum(axis=0)
        da = dzf @ params.wf + dzu @ params.wu + dzg @ params.wc + dzo @ params.wo
        dh = da[:, :hidden]
        dc_next = dc * f
    return value, grads


def blocks_to_arrays(blocks: Sequence[Block], mode: str) -> tuple:
    """Stack normalized blocks into (x, targets, flags) arrays."""
    if not blocks:
        raise ValueError("no blocks given")
    lengths = {len(b.features) for b in blocks}
    if len(lengths) != 1:
        raise ValueError(f"mixed block lengths: {sorted(lengths)}")
    x = np.asarray([[(t.lat, t.lon, t.sp) for t in b.features] for b in blocks])
    targets = np.asarray([(b.label_tuple.lat, b.label_tuple.lon, b.label_tuple.sp)
                          for b in blocks])
    flags = None
    if mode == "stop":
        raw = [b.stop_flag for b in blocks]
        if any(f is None for f in raw):
            raise ValueError("stop mode requires labeled blocks")
        flags = np.asarray(raw, dtype=np.int64)
    return x, targets, flags


def backward(block: Block, params: LstmParams) -> LstmParams:
    """Gradients of one block's loss, in a params-shaped container."""
    mode = "stop" if params.stop_mode else "regression"
    x, targets, flags = blocks_to_arrays([block], mode)
    _, grads = _backward_batch(x, targets, flags, params)
    return LstmParams(**grads)


@dataclass
class _AdamState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def for_params(params: LstmParams) -> "_AdamState":
        return _AdamState(m={n: np.zeros_like(a) for n, a in params.arrays()},
                          v={n: np.zeros_like(a) for n, a in params.arrays()})


def _adam_step(params: LstmParams, grads: dict, state: _AdamState,
               cfg: TrainConfig) -> None:
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, arr in params.arrays():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        arr -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train(train_blocks: Sequence[Block], val_blocks: Sequence[Block],
          cfg: TrainConfig) -> tuple:
    """Minibatch Adam training; returns (params, TrainingTrace).

    The reported training loss per epoch is the running mean of batch
    losses as they were seen (before each update); validation loss is a
    full pass at epoch end. Identical (seed, data, config) reproduce
    bit-identical parameters.
    """
    if not train_blocks or not val_blocks:
        raise ValueError("train and validation splits must be non-empty")
    x_tr, y_tr, f_tr = blocks_to_arrays(train_blocks, cfg.mode)
    x_va, y_va, f_va = blocks_to_arrays(val_blocks, cfg.mode)
    if x_tr.shape[1] != cfg.k - 1 or x_va.shape[1] != cfg.k - 1:
        raise ValueError(f"blocks have k={x_tr.shape[1] + 1} but config says k={cfg.k}")

    params = init_params(cfg)
    # Separate stream for epoch shuffles so it never aliases the init draws.
    rng = np.random.default_rng([cfg.seed, 1])
    adam = _AdamState.for_params(params)
    n = x_tr.shape[0]
    train_losses = []
    val_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            flags = f_tr[idx] if f_tr is not None else None
            value, grads = _backward_batch(x_tr[idx], y_tr[idx], flags, params)
            if not math.isfinite(value):
                raise RuntimeError(f"non-finite loss at epoch {epoch + 1}, "
                                   f"batch {start // cfg.batch_size + 1}")
            _adam_step(params, grads, adam, cfg)
            total += value * len(idx)
        train_losses.append(total / n)
        val_losses.append(_loss_batch(x_va, y_va, f_va, params))
    return params, TrainingTrace(train_losses=tuple(train_losses),
                                 val_losses=tuple(val_losses))


# ---------------------------------------------------------------------------
# Model file format: magic, version, shape header, parameter arrays in the
# order of LstmParams.arrays(), then the six scaler bounds. Little-endian f8.

_HEADER = struct.Struct("<4sIIIIBIIIqdddd")


def save_model(params: LstmParams, scaler: ScalerParams, cfg: TrainConfig) -> bytes:
    header = _HEADER.pack(
        _MAGIC, _FORMAT_VERSION,
        params.hidden_size, params.input_size, params.output_size,
        1 if params.stop_mode else 0,
        cfg.k, cfg.batch_size, cfg.epochs, cfg.seed,
        cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.init_scale,
    )
    chunks = [header]
    for _, arr in params.arrays():
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    scaler_values = [bound for pair in scaler.bounds() for bound in pair]
    chunks.append(np.asarray(scaler_values, dtype="<f8").tobytes())
    return b"".join(chunks)


def load_model(blob: bytes) -> tuple:
    """Inverse of save_model; returns (params, scaler, cfg)."""
    if len(blob) < _HEADER.size:
        raise ValueError("model blob truncated (missing header)")
    (magic, version, hidden, inputs, outputs, stop_flag, k, batch, epochs,
     seed, lr, beta1, beta2, init_scale) = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise ValueError("not a model file (bad magic)")
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    mode = "stop" if stop_flag else "regression"
    shapes = [("wf", (hidden, hidden + inputs)), ("wu", (hidden, hidden + inputs)),
              ("wc", (hidden, hidden + inputs)), ("wo", (hidden, hidden + inputs)),
              ("bf", (hidden,)), ("bu", (hidden,)), ("bc", (hidden,)), ("bo", (hidden,)),
              ("wy", (outputs, hidden)), ("by", (outputs,))]
    if stop_flag:
        shapes += [("ws", (2, hidden)), ("bs", (2,))]
    expected = _HEADER.size + 8 * (sum(int(np.prod(s)) for _, s in shapes) + 6)
    if len(blob) != expected:
        raise ValueError(f"model blob truncated or padded: "
                         f"{len(blob)} bytes, expected {expected}")
    offset = _HEADER.size
    kwargs = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        kwargs[name] = arr.reshape(shape).copy()
        offset += 8 * count
    bounds = np.frombuffer(blob, dtype="<f8", count=6, offset=offset)
    scaler = ScalerParams(lat_min=bounds[0], lat_max=bounds[1],
                          lon_min=bounds[2], lon_max=bounds[3],
                          sp_min=bounds[4], sp_max=bounds[5])
    cfg = TrainConfig(batch_size=batch, hidden_size=hidden, learning_rate=lr,
                      epochs=epochs, input_features=inputs, output_features=outputs,
                      seed=seed, mode=mode, k=k, beta1=beta1, beta2=beta2,
                      init_scale=init_scale)
    return LstmParams(**kwargs), scaler, cfg
