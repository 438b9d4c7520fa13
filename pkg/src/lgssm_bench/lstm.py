"""Single-layer LSTM sequence classifier built on numpy, with numba kernels for the recurrence.

Architecture: z-score input normalization -> LSTM layer (n_h units) ->
affine layer on the last hidden state -> softmax over the two classes.
Trained with softmax cross-entropy, backpropagation through time, Adam and
gradient clipping.

Batched functions take normalized inputs of shape (B, T, m_z); every
sequence in a batch has the same length.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Literal

import numpy as np
from numba import njit

from .ssm import Dataset, LabeledSequence, as_observation_batch, make_rng

log = logging.getLogger(__name__)

GATES = ("i", "f", "o", "c")
PARAM_NAMES = (
    "W_i", "W_f", "W_o", "W_c",
    "R_i", "R_f", "R_o", "R_c",
    "b_i", "b_f", "b_o", "b_c",
    "W_out", "b_out",
)
STD_FLOOR = 1e-8


class NumericFault(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class LstmParams:
    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    R_i: np.ndarray
    R_f: np.ndarray
    R_o: np.ndarray
    R_c: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray

    @property
    def n_h(self) -> int:
        return self.W_i.shape[0]

    @property
    def m_z(self) -> int:
        return self.W_i.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def map(self, fn) -> "LstmParams":
        return LstmParams(**{k: fn(v) for k, v in self.tensors().items()})

    def copy(self) -> "LstmParams":
        return self.map(np.copy)

    @classmethod
    def zeros(cls, n_h: int, m_z: int) -> "LstmParams":
        shapes = {}
        for g in GATES:
            shapes[f"W_{g}"] = (n_h, m_z)
            shapes[f"R_{g}"] = (n_h, n_h)
            shapes[f"b_{g}"] = (n_h,)
        shapes["W_out"] = (2, n_h)
        shapes["b_out"] = (2,)
        return cls(**{k: np.zeros(s) for k, s in shapes.items()})

    def check(self) -> None:
        n_h, m_z = self.n_h, self.m_z
        expect = LstmParams.zeros(n_h, m_z).tensors()
        for name, arr in self.tensors().items():
            if arr.shape != expect[name].shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expect[name].shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    def _stacked(self):
        W = np.concatenate([self.W_i, self.W_f, self.W_o, self.W_c])
        R = np.concatenate([self.R_i, self.R_f, self.R_o, self.R_c])
        b = np.concatenate([self.b_i, self.b_f, self.b_o, self.b_c])
        return W, R, b


def init_params(n_h: int, m_z: int, rng: np.random.Generator, forget_bias: float = 1.0) -> LstmParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, forget bias ``forget_bias``, other biases 0."""
    p = LstmParams.zeros(n_h, m_z)
    for g in GATES:
        a = 1.0 / np.sqrt(m_z)
        setattr(p, f"W_{g}", rng.uniform(-a, a, (n_h, m_z)))
        a = 1.0 / np.sqrt(n_h)
        setattr(p, f"R_{g}", rng.uniform(-a, a, (n_h, n_h)))
    p.W_out = rng.uniform(-1.0 / np.sqrt(n_h), 1.0 / np.sqrt(n_h), (2, n_h))
    p.b_f = np.full(n_h, float(forget_bias))
    return p


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, observations: np.ndarray) -> np.ndarray:
        return (observations - self.mean) / self.std


def fit_normalizer(train) -> Normalizer:
    """Per-channel mean and standard deviation over every step of every training sequence."""
    Z = as_observation_batch(train)
    if Z.size == 0:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    flat = Z.reshape(-1, Z.shape[2])
    return Normalizer(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR))


@dataclass
class ForwardCache:
    """Intermediates of a batched forward pass, indexed by step ``k`` (0..T).

    Row 0 of ``c`` and ``h`` holds the zero initial state; row 0 of the gate
    arrays is unused.
    """

    x: np.ndarray  # (B, T, m_z) normalized inputs
    gates: np.ndarray  # (B, T+1, 4 n_h), blocks i, f, o, candidate
    c: np.ndarray  # (B, T+1, n_h)
    tanh_c: np.ndarray
    h: np.ndarray
    y: np.ndarray  # (B, 2) logits
    p: np.ndarray  # (B, 2) probabilities

    def _block(self, j: int) -> np.ndarray:
        n = self.c.shape[2]
        return self.gates[..., j * n:(j + 1) * n]

    @property
    def i(self) -> np.ndarray:
        return self._block(0)

    @property
    def f(self) -> np.ndarray:
        return self._block(1)

    @property
    def o(self) -> np.ndarray:
        return self._block(2)

    @property
    def g(self) -> np.ndarray:
        """Candidate cell state."""
        return self._block(3)


def softmax(y: np.ndarray) -> np.ndarray:
    e = np.exp(y - y.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@njit(cache=True)
def _sigmoid(a):
    if a >= 0.0:
        return 1.0 / (1.0 + np.exp(-a))
    e = np.exp(a)
    return e / (1.0 + e)


@njit(cache=True)
def _forward_kernel(pre_x, R, gates, c, tc, h):
    B, T, n4 = pre_x.shape
    n = n4 // 4
    for b in range(B):
        for k in range(1, T + 1):
            for j in range(n4):
                a = pre_x[b, k - 1, j]
                for m in range(n):
                    a += R[j, m] * h[b, k - 1, m]
                gates[b, k, j] = _sigmoid(a) if j < 3 * n else np.tanh(a)
            for j in range(n):
                cc = gates[b, k, n + j] * c[b, k - 1, j] + gates[b, k, j] * gates[b, k, 3 * n + j]
                c[b, k, j] = cc
                t = np.tanh(cc)
                tc[b, k, j] = t
                h[b, k, j] = gates[b, k, 2 * n + j] * t


@njit(cache=True)
def _backward_kernel(x, gates, c, tc, h, R, dh_T, dW, dR, db):
    B, T1, n = h.shape
    n4 = 4 * n
    m_z = x.shape[2]
    da = np.empty(n4)
    for b in range(B):
        dh = dh_T[b].copy()
        dc = np.zeros(n)
        for k in range(T1 - 1, 0, -1):
            for j in range(n):
                i = gates[b, k, j]
                f = gates[b, k, n + j]
                o = gates[b, k, 2 * n + j]
                g = gates[b, k, 3 * n + j]
                t = tc[b, k, j]
                dcj = dc[j] + dh[j] * o * (1.0 - t * t)
                da[j] = dcj * g * i * (1.0 - i)
                da[n + j] = dcj * c[b, k - 1, j] * f * (1.0 - f)
                da[2 * n + j] = dh[j] * t * o * (1.0 - o)
                da[3 * n + j] = dcj * i * (1.0 - g * g)
                dc[j] = dcj * f
            for j in range(n4):
                for m in range(m_z):
                    dW[j, m] += da[j] * x[b, k - 1, m]
                for m in range(n):
                    dR[j, m] += da[j] * h[b, k - 1, m]
                db[j] += da[j]
            for m in range(n):
                acc = 0.0
                for j in range(n4):
                    acc += da[j] * R[j, m]
                dh[m] = acc


def forward_batch(params: LstmParams, x: np.ndarray) -> ForwardCache:
    """Forward pass on already normalized inputs ``x`` of shape (B, T, m_z)."""
    x = np.ascontiguousarray(x, dtype=float)
    B, T, _ = x.shape
    n = params.n_h
    W, R, b = params._stacked()
    pre_x = np.ascontiguousarray(x @ W.T + b)  # (B, T, 4n)
    gates = np.zeros((B, T + 1, 4 * n))
    c = np.zeros((B, T + 1, n))
    tc = np.zeros((B, T + 1, n))
    h = np.zeros((B, T + 1, n))
    _forward_kernel(pre_x, R, gates, c, tc, h)
    if not np.all(np.isfinite(c)):
        k = int(np.argmax(~np.all(np.isfinite(c), axis=(0, 2))))
        raise NumericFault(f"non-finite LSTM state at step {k}", step=k)
    y = h[:, T] @ params.W_out.T + params.b_out
    gates[:, 0] = np.nan
    return ForwardCache(x, gates, c, tc, h, y, softmax(y))


def forward(params: LstmParams, norm: Normalizer, obs) -> ForwardCache:
    """Forward pass for one sequence (or a batch) of raw observations."""
    Z = as_observation_batch(obs)
    if Z.shape[2] != params.m_z:
        raise ValueError(f"observation dimension {Z.shape[2]} does not match network m_z={params.m_z}")
    if not np.all(np.isfinite(Z)):
        raise NumericFault("non-finite input")
    return forward_batch(params, norm.apply(Z))


def cross_entropy(cache: ForwardCache, labels) -> np.ndarray:
    """Per-sequence loss -log p(true label)."""
    idx = np.asarray(labels, dtype=int).reshape(-1) - 1
    return -np.log(cache.p[np.arange(len(idx)), idx])


def backward(cache: ForwardCache, params: LstmParams, labels) -> LstmParams:
    """Gradient of the batch-mean cross-entropy with respect to every parameter.

    ``labels`` holds one label (1 or 2) per sequence in the cache; a single
    int is accepted for a single-sequence cache.
    """
    labels = np.asarray(labels, dtype=int).reshape(-1)
    B, T1, n = cache.h.shape
    T = T1 - 1
    if labels.shape != (B,):
        raise ValueError(f"need {B} labels, got {labels.shape[0]}")
    if cache.x.shape[2] != params.m_z or n != params.n_h:
        raise ValueError("cache was not produced by these parameters")
    _, R, _ = params._stacked()

    dy = cache.p.copy()
    dy[np.arange(B), labels - 1] -= 1.0
    dy /= B
    grads = LstmParams.zeros(n, params.m_z)
    grads.W_out = dy.T @ cache.h[:, T]
    grads.b_out = dy.sum(axis=0)

    dW = np.zeros((4 * n, params.m_z))
    dR = np.zeros((4 * n, n))
    db = np.zeros(4 * n)
    _backward_kernel(cache.x, cache.gates, cache.c, cache.tanh_c, cache.h, R, dy @ params.W_out, dW, dR, db)

    for j, gname in enumerate(GATES):
        rows = slice(j * n, (j + 1) * n)
        setattr(grads, f"W_{gname}", dW[rows])
        setattr(grads, f"R_{gname}", dR[rows])
        setattr(grads, f"b_{gname}", db[rows])
    return grads


@dataclass
class TrainConfig:
    n_h: int = 16
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    clip_threshold: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_mode: Literal["global", "per_tensor"] = "global"
    forget_bias: float = 1.0

    def __post_init__(self):
        for name in ("n_h", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("learning_rate", "clip_threshold", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.clip_mode not in ("global", "per_tensor"):
            raise ValueError(f"unknown clip_mode {self.clip_mode!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: LstmParams
    v: LstmParams
    t: int = 0

    @classmethod
    def like(cls, params: LstmParams) -> "AdamState":
        return cls(params.map(np.zeros_like), params.map(np.zeros_like), 0)


def global_norm(grads: LstmParams) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.tensors().values())))


def clip_gradients(grads: LstmParams, threshold: float, mode: str = "global") -> LstmParams:
    if mode == "per_tensor":
        def clip(g):
            n = np.sqrt(np.sum(g * g))
            return g * (threshold / n) if n > threshold else g
        return grads.map(clip)
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        return grads.map(lambda g: g * scale)
    return grads


def adam_step(
    params: LstmParams, grads: LstmParams, state: AdamState, config: TrainConfig
) -> tuple[LstmParams, AdamState]:
    """Clip, then take one bias-corrected Adam step; inputs are not modified."""
    for name, g in grads.tensors().items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient in {name}")
    grads = clip_gradients(grads, config.clip_threshold, config.clip_mode)
    b1, b2 = config.beta1, config.beta2
    t = state.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    m_old, v_old = state.m.tensors(), state.v.tensors()
    for name, p in params.tensors().items():
        g = getattr(grads, name)
        m = b1 * m_old[name] + (1.0 - b1) * g
        v = b2 * v_old[name] + (1.0 - b2) * g * g
        new_p[name] = p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        new_m[name] = m
        new_v[name] = v
    return LstmParams(**new_p), AdamState(LstmParams(**new_m), LstmParams(**new_v), t)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    train_accuracy: float


@dataclass
class TrainResult:
    params: LstmParams
    normalizer: Normalizer
    history: list[EpochLog] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (params, normalizer, history)
        return iter((self.params, self.normalizer, self.history))


def predict_proba(params: LstmParams, norm: Normalizer, observations) -> np.ndarray:
    return forward(params, norm, observations).p


def predict_batch(params: LstmParams, norm: Normalizer, observations) -> np.ndarray:
    p = predict_proba(params, norm, observations)
    return np.where(p[:, 1] > p[:, 0], 2, 1)


def predict(params: LstmParams, norm: Normalizer, obs) -> int:
    """argmax_i p(i | z_1:T); ties go to class 1."""
    labels = predict_batch(params, norm, obs)
    if len(labels) != 1:
        raise ValueError("predict takes one sequence; use predict_batch for several")
    return int(labels[0])


def train(
    train_set: Dataset,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> TrainResult:
    """Mini-batch Adam training for exactly ``config.max_epochs`` epochs.

    Each epoch shuffles with ``rng``, splits into batches of
    ``config.batch_size`` (the last may be short) and steps once per batch.
    The logged training accuracy is measured on the fly, before each
    batch's update.
    """
    if rng is None:
        rng = make_rng(config.seed)
    Z = train_set.observations
    labels = train_set.labels
    N = len(labels)
    if N < 1:
        raise ValueError("empty training set")
    norm = fit_normalizer(Z)
    X = norm.apply(Z)
    params = init_params(config.n_h, Z.shape[2], rng, config.forget_bias)
    state = AdamState.like(params)
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(N)
        loss_sum = 0.0
        correct = 0
        for bi, start in enumerate(range(0, N, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                cache = forward_batch(params, X[idx])
                grads = backward(cache, params, labels[idx])
                params, state = adam_step(params, grads, state, config)
            except NumericFault as exc:
                raise NumericFault(f"epoch {epoch}, batch {bi}: {exc}", step=exc.step) from exc
            loss_sum += float(cross_entropy(cache, labels[idx]).sum())
            correct += int(np.sum(np.where(cache.p[:, 1] > cache.p[:, 0], 2, 1) == labels[idx]))
        history.append(EpochLog(epoch, loss_sum / N, correct / N))
        log.debug("epoch %d loss %.4f acc %.3f", epoch, loss_sum / N, correct / N)
    return TrainResult(params, norm, history)


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})
