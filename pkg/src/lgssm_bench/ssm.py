"""Linear Gaussian state-space models: parameters, validation, simulation.

The model is

    x_k = F x_{k-1} + v_k,    v_k ~ N(0, Q)
    z_k = H x_k + w_k,        w_k ~ N(0, R)

with x_0 ~ N(mu0, Sigma0).

Randomness always comes from an explicit ``numpy.random.Generator`` built on
the counter-based Philox bit generator (see :func:`make_rng`).  Standard
normals are drawn with ``Generator.standard_normal`` (numpy's ziggurat
transform), so streams are bit-reproducible for a fixed numpy version.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

SYM_TOL = 1e-10
PSD_TOL = 1e-10


class ModelError(ValueError):
    """Raised when a set of model parameters violates the model assumptions."""


def make_rng(seed: int | np.random.SeedSequence, *key: int) -> np.random.Generator:
    """Build a Philox-backed generator from ``seed`` and an optional spawn key.

    ``make_rng(s, i, j)`` is the same stream wherever and whenever it is
    created, which is what lets Monte Carlo trials run in any order.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
        if key:
            ss = np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + key)
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.ndim != 2:
        raise ModelError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameter set {F, H, Q, R, mu0, Sigma0}.

    Scalars are promoted: ``ModelParams(1, 1, 1e-5, 1e-3, 0, 1e-4)`` is the
    one-dimensional random walk observed in noise.
    """

    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        for name in ("F", "H", "Q", "R", "Sigma0"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name), name))
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        if mu0.ndim != 1:
            raise ModelError(f"mu0 must be a vector, got shape {mu0.shape}")
        object.__setattr__(self, "mu0", mu0)

    @property
    def m_x(self) -> int:
        return self.F.shape[0]

    @property
    def m_z(self) -> int:
        return self.H.shape[0]

    def replace(self, **changes) -> "ModelParams":
        fields = {k: getattr(self, k) for k in ("F", "H", "Q", "R", "mu0", "Sigma0")}
        fields.update(changes)
        return ModelParams(**fields)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("F", "H", "Q", "R", "mu0", "Sigma0")}

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(
            a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.as_dict().values(), other.as_dict().values())
        )

    __hash__ = None

    @classmethod
    def scalar(cls, F=1.0, H=1.0, Q=1e-5, R=1e-3, mu0=0.0, Sigma0=0.0) -> "ModelParams":
        return cls(F, H, Q, R, mu0, Sigma0)


def _check_symmetric(a: np.ndarray, name: str) -> None:
    if a.shape[0] != a.shape[1]:
        raise ModelError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelError(f"{name} has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL:
        raise ModelError(f"{name} is not symmetric")


def _check_psd(a: np.ndarray, name: str) -> None:
    _check_symmetric(a, name)
    try:
        np.linalg.cholesky(a)
        return
    except np.linalg.LinAlgError:
        pass
    lam = np.linalg.eigvalsh(0.5 * (a + a.T))
    if lam.min() < -PSD_TOL:
        raise ModelError(f"{name} has a negative eigenvalue {lam.min():.3g}")


def validate_model(params: ModelParams, *, singular_R: bool = False) -> ModelParams:
    """Check dimensions and covariance assumptions; return ``params`` unchanged.

    Raises :class:`ModelError` on dimension mismatch, asymmetric covariances,
    ``R`` not positive definite, or ``Q``/``Sigma0`` with an eigenvalue below
    ``-1e-10``.  ``singular_R=True`` relaxes ``R`` to positive semi-definite,
    which is enough for sampling but not for filtering.
    """
    F, H = params.F, params.H
    m_x = F.shape[0]
    if F.shape != (m_x, m_x):
        raise ModelError(f"F must be square, got shape {F.shape}")
    if H.shape[1] != m_x:
        raise ModelError(f"H has shape {H.shape}, expected (m_z, {m_x})")
    m_z = H.shape[0]
    if params.Q.shape != (m_x, m_x):
        raise ModelError(f"Q has shape {params.Q.shape}, expected {(m_x, m_x)}")
    if params.R.shape != (m_z, m_z):
        raise ModelError(f"R has shape {params.R.shape}, expected {(m_z, m_z)}")
    if params.Sigma0.shape != (m_x, m_x):
        raise ModelError(f"Sigma0 has shape {params.Sigma0.shape}, expected {(m_x, m_x)}")
    if params.mu0.shape != (m_x,):
        raise ModelError(f"mu0 has shape {params.mu0.shape}, expected {(m_x,)}")
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(H)) and np.all(np.isfinite(params.mu0))):
        raise ModelError("F, H and mu0 must be finite")

    _check_psd(params.Q, "Q")
    _check_psd(params.Sigma0, "Sigma0")
    if singular_R:
        _check_psd(params.R, "R")
        return params
    _check_symmetric(params.R, "R")
    try:
        np.linalg.cholesky(params.R)
    except np.linalg.LinAlgError:
        raise ModelError("R must be positive definite") from None
    return params


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Return ``L`` with ``L @ L.T == cov``.

    Cholesky when ``cov`` is positive definite, otherwise an eigendecomposition
    with negative eigenvalues clamped to zero (covers singular PSD matrices).
    """
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        lam, U = np.linalg.eigh(0.5 * (cov + cov.T))
        return U * np.sqrt(np.clip(lam, 0.0, None))


@dataclass
class StateTrajectory:
    states: np.ndarray  # (T+1, m_x), row 0 is x_0

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1


@dataclass
class LabeledSequence:
    observations: np.ndarray  # (T, m_z), row k-1 is z_k
    label: int | None = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        if obs.ndim != 2 or obs.shape[0] < 1:
            raise ValueError(f"observations must be (T, m_z) with T >= 1, got {obs.shape}")
        self.observations = obs
        if self.label is not None and self.label not in (1, 2):
            raise ValueError(f"label must be 1 or 2, got {self.label}")

    @property
    def T(self) -> int:
        return self.observations.shape[0]

    @property
    def m_z(self) -> int:
        return self.observations.shape[1]


def simulate_sequence(
    params: ModelParams, T: int, rng: np.random.Generator
) -> tuple[StateTrajectory, LabeledSequence]:
    """Draw one state trajectory and its observations from ``params``.

    Draw order: x_0 noise, then all process noise, then all measurement
    noise.  Identical (rng state, params, T) gives identical output.
    ``R`` may be singular here.
    """
    validate_model(params, singular_R=True)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    L0 = covariance_factor(params.Sigma0)
    LQ = covariance_factor(params.Q)
    LR = covariance_factor(params.R)
    e0 = rng.standard_normal(params.m_x)
    ev = rng.standard_normal((T, params.m_x))
    ew = rng.standard_normal((T, params.m_z))

    x = np.empty((T + 1, params.m_x))
    x[0] = params.mu0 + L0 @ e0
    v = ev @ LQ.T
    for k in range(1, T + 1):
        x[k] = params.F @ x[k - 1] + v[k - 1]
    z = x[1:] @ params.H.T + ew @ LR.T
    return StateTrajectory(x), LabeledSequence(z)


@dataclass
class Dataset:
    """A collection of equal-length labelled sequences, stored as arrays."""

    observations: np.ndarray  # (N, T, m_z)
    labels: np.ndarray  # (N,) with entries in {1, 2}
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.observations.ndim != 3:
            raise ValueError(f"observations must be (N, T, m_z), got {self.observations.shape}")
        if self.labels.shape != (self.observations.shape[0],):
            raise ValueError("need exactly one label per sequence")
        if not np.all(np.isin(self.labels, (1, 2))):
            raise ValueError("labels must be 1 or 2")
        self.metadata.setdefault("class_counts", self.class_counts())

    def __len__(self) -> int:
        return self.observations.shape[0]

    def __getitem__(self, i: int) -> LabeledSequence:
        return LabeledSequence(self.observations[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[LabeledSequence]:
        for i in range(len(self)):
            yield self[i]

    @property
    def T(self) -> int:
        return self.observations.shape[1]

    @property
    def m_z(self) -> int:
        return self.observations.shape[2]

    def class_counts(self) -> dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in (1, 2)}

    def of_class(self, label: int) -> np.ndarray:
        return self.observations[self.labels == label]

    @classmethod
    def from_sequences(cls, sequences: Sequence[LabeledSequence]) -> "Dataset":
        if not sequences:
            raise ValueError("empty sequence collection")
        shapes = {s.observations.shape for s in sequences}
        if len(shapes) != 1:
            raise ValueError(f"sequences must share T and m_z, got shapes {sorted(shapes)}")
        return cls(np.stack([s.observations for s in sequences]), [s.label for s in sequences])


def generate_dataset(
    params1: ModelParams,
    params2: ModelParams,
    n_per_class: int,
    T: int,
    rng: np.random.Generator,
) -> Dataset:
    """Simulate a balanced dataset; labels alternate 1, 2, 1, 2, ..."""
    validate_model(params1, singular_R=True)
    validate_model(params2, singular_R=True)
    if params1.m_z != params2.m_z:
        raise ModelError(f"observation dimensions differ: {params1.m_z} vs {params2.m_z}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    obs = np.empty((2 * n_per_class, T, params1.m_z))
    labels = np.tile([1, 2], n_per_class)
    for i in range(n_per_class):
        obs[2 * i] = simulate_sequence(params1, T, rng)[1].observations
        obs[2 * i + 1] = simulate_sequence(params2, T, rng)[1].observations
    return Dataset(obs, labels)


def as_observation_batch(data) -> np.ndarray:
    """Coerce a Dataset, a LabeledSequence, a list of them or an array to (N, T, m_z)."""
    if isinstance(data, Dataset):
        return data.observations
    if isinstance(data, LabeledSequence):
        return data.observations[None]
    if isinstance(data, np.ndarray):
        arr = np.asarray(data, dtype=float)
        if arr.ndim == 2:
            return arr[None]
        if arr.ndim == 3:
            return arr
        raise ValueError(f"expected (T, m_z) or (N, T, m_z) array, got {arr.shape}")
    seqs = list(data)
    if not seqs:
        raise ValueError("no sequences given")
    arrays = [as_observation_batch(s)[0] for s in seqs]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"sequences must share T and m_z, got shapes {sorted(shapes)}")
    return np.stack(arrays)
