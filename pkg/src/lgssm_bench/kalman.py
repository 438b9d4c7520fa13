"""Kalman filter, innovations log-likelihood and RTS smoother.

All per-step arrays are indexed by the time step ``k`` directly and have
length ``T + 1``.  Index 0 of the state moments holds the prior
(mu0, Sigma0); entries that do not exist at ``k = 0`` (innovations,
innovation covariances, gains, lag-one covariances) are NaN there.

The ``*_batch`` functions run many sequences under one parameter set.  The
covariance recursion does not depend on the data, so it is computed once
and shared; only the means carry a leading sequence axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular

from .ssm import LabeledSequence, ModelParams, as_observation_batch, validate_model

MAX_COND = 1e14
LOG_2PI = float(np.log(2.0 * np.pi))


class KalmanError(ArithmeticError):
    """Base class for numerical failures in the filter or smoother."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FilterDivergenceError(KalmanError):
    pass


class SmootherError(KalmanError):
    pass


@njit(cache=True)
def _chol(a, L):
    """In-place lower Cholesky factor; False if ``a`` is not positive definite."""
    n = a.shape[0]
    L[:, :] = 0.0
    for j in range(n):
        s = a[j, j]
        for p in range(j):
            s -= L[j, p] * L[j, p]
        if not s > 0.0:
            return False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            s = a[i, j]
            for p in range(j):
                s -= L[i, p] * L[j, p]
            L[i, j] = s / L[j, j]
    return True


@njit(cache=True)
def _cho_solve(L, B):
    """Solve (L L') X = B for X."""
    n, m = B.shape
    X = B.copy()
    for c in range(m):
        for i in range(n):
            s = X[i, c]
            for j in range(i):
                s -= L[i, j] * X[j, c]
            X[i, c] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = X[i, c]
            for j in range(i + 1, n):
                s -= L[j, i] * X[j, c]
            X[i, c] = s / L[i, i]
    return X


@njit(cache=True)
def _sym(a):
    return 0.5 * (a + a.T)


@njit(cache=True)
def _factor(a, L):
    """Factor an SPD matrix into ``L``; return a status code (see ``_STATUS``)."""
    if not np.all(np.isfinite(a)):
        return 1
    if not _chol(a, L):
        return 2
    if a.shape[0] > 1:
        lam = np.linalg.eigvalsh(a)
        if lam[0] <= 0.0 or lam[-1] / lam[0] > MAX_COND:
            return 3
    return 0


_STATUS = {1: "has non-finite entries", 2: "is not positive definite", 3: "is numerically singular"}


@njit(cache=True)
def _filter_kernel(F, H, Q, R, mu0, Sigma0, Z, x_pred, x_filt, P_pred, P_filt, innov, S, K, ll):
    N, T, m_z = Z.shape
    m_x = F.shape[0]
    FT = np.ascontiguousarray(F.T)
    HT = np.ascontiguousarray(H.T)
    I = np.eye(m_x)
    L = np.zeros((m_z, m_z))
    y = np.zeros(m_z)
    quad = np.zeros(N)
    logdet = 0.0
    for n in range(N):
        x_pred[n, 0] = mu0
        x_filt[n, 0] = mu0
    P_pred[0] = Sigma0
    P_filt[0] = Sigma0

    for k in range(1, T + 1):
        Pp = _sym(F @ P_filt[k - 1] @ FT + Q)
        Sk = _sym(H @ Pp @ HT + R)
        status = _factor(Sk, L)
        if status:
            return status, k
        Kk = np.ascontiguousarray(_cho_solve(L, H @ Pp).T)
        A = I - Kk @ H
        P_filt[k] = _sym(A @ Pp @ np.ascontiguousarray(A.T) + Kk @ R @ np.ascontiguousarray(Kk.T))
        P_pred[k] = Pp
        S[k] = Sk
        K[k] = Kk
        for i in range(m_z):
            logdet += 2.0 * np.log(L[i, i])

        for n in range(N):
            for i in range(m_x):
                s = 0.0
                for j in range(m_x):
                    s += F[i, j] * x_filt[n, k - 1, j]
                x_pred[n, k, i] = s
            for i in range(m_z):
                s = Z[n, k - 1, i]
                for j in range(m_x):
                    s -= H[i, j] * x_pred[n, k, j]
                innov[n, k, i] = s
            for i in range(m_x):
                s = x_pred[n, k, i]
                for j in range(m_z):
                    s += Kk[i, j] * innov[n, k, j]
                x_filt[n, k, i] = s
            for i in range(m_z):
                s = innov[n, k, i]
                for j in range(i):
                    s -= L[i, j] * y[j]
                y[i] = s / L[i, i]
                quad[n] += y[i] * y[i]

    for n in range(N):
        ll[n] = -0.5 * (T * m_z * LOG_2PI + logdet + quad[n])
    return 0, 0


@njit(cache=True)
def _smoother_kernel(F, H, x_pred, x_filt, P_pred, P_filt, K, x_s, P_s, P_lag):
    N, T1, m_x = x_filt.shape
    T = T1 - 1
    L = np.zeros((m_x, m_x))
    J = np.zeros((T + 1, m_x, m_x))
    d = np.zeros(m_x)
    for k in range(T - 1, -1, -1):
        Pp = P_pred[k + 1]
        if np.any(Pp != 0.0):
            status = _factor(Pp, L)
            if status:
                return status, k + 1
            J[k] = _cho_solve(L, F @ P_filt[k]).T
        # else: state at k+1 known exactly, gain multiplies zero residuals
        Jk = np.ascontiguousarray(J[k])
        P_s[k] = _sym(P_filt[k] + Jk @ (P_s[k + 1] - Pp) @ np.ascontiguousarray(Jk.T))
        for n in range(N):
            for j in range(m_x):
                d[j] = x_s[n, k + 1, j] - x_pred[n, k + 1, j]
            for i in range(m_x):
                s = x_filt[n, k, i]
                for j in range(m_x):
                    s += Jk[i, j] * d[j]
                x_s[n, k, i] = s

    P_lag[T] = (np.eye(m_x) - np.ascontiguousarray(K[T]) @ H) @ F @ P_filt[T - 1]
    for k in range(T - 1, 0, -1):
        JpT = np.ascontiguousarray(J[k - 1].T)
        P_lag[k] = P_filt[k] @ JpT + np.ascontiguousarray(J[k]) @ (P_lag[k + 1] - F @ P_filt[k]) @ JpT
    return 0, 0


@dataclass
class FilterResult:
    x_pred: np.ndarray  # (T+1, m_x); x_pred[0] = mu0
    P_pred: np.ndarray  # (T+1, m_x, m_x); P_pred[0] = Sigma0
    x_filt: np.ndarray  # (T+1, m_x); x_filt[0] = mu0
    P_filt: np.ndarray  # (T+1, m_x, m_x)
    innovations: np.ndarray  # (T+1, m_z); row 0 NaN
    innovation_cov: np.ndarray  # (T+1, m_z, m_z); [0] NaN
    gains: np.ndarray  # (T+1, m_x, m_z); [0] NaN
    log_likelihood: float

    @property
    def T(self) -> int:
        return self.x_filt.shape[0] - 1


@dataclass
class SmootherResult:
    x_smooth: np.ndarray  # (T+1, m_x)
    P_smooth: np.ndarray  # (T+1, m_x, m_x)
    P_lag: np.ndarray  # (T+1, m_x, m_x); P_lag[k] = Cov(x_k, x_{k-1} | z_1:T), [0] NaN


@dataclass
class BatchFilterResult:
    """Filter output for N sequences under one model; covariances are shared."""

    x_pred: np.ndarray  # (N, T+1, m_x)
    P_pred: np.ndarray  # (T+1, m_x, m_x)
    x_filt: np.ndarray  # (N, T+1, m_x)
    P_filt: np.ndarray  # (T+1, m_x, m_x)
    innovations: np.ndarray  # (N, T+1, m_z)
    innovation_cov: np.ndarray  # (T+1, m_z, m_z)
    gains: np.ndarray  # (T+1, m_x, m_z)
    log_likelihood: np.ndarray  # (N,)

    def sequence(self, i: int) -> FilterResult:
        return FilterResult(
            self.x_pred[i], self.P_pred, self.x_filt[i], self.P_filt,
            self.innovations[i], self.innovation_cov, self.gains,
            float(self.log_likelihood[i]),
        )


@dataclass
class BatchSmootherResult:
    x_smooth: np.ndarray  # (N, T+1, m_x)
    P_smooth: np.ndarray  # (T+1, m_x, m_x)
    P_lag: np.ndarray  # (T+1, m_x, m_x)

    def sequence(self, i: int) -> SmootherResult:
        return SmootherResult(self.x_smooth[i], self.P_smooth, self.P_lag)


def _check_obs(params: ModelParams, Z: np.ndarray) -> None:
    if Z.shape[1] < 1:
        raise ValueError("observation sequences must have T >= 1")
    if Z.shape[2] != params.m_z:
        raise ValueError(f"observation dimension {Z.shape[2]} does not match model m_z={params.m_z}")


def filter_batch(params: ModelParams, observations, *, validate: bool = True) -> BatchFilterResult:
    """Run the Kalman filter over every sequence in ``observations`` (N, T, m_z)."""
    Z = np.ascontiguousarray(as_observation_batch(observations), dtype=float)
    if validate:
        validate_model(params)
    _check_obs(params, Z)
    N, T, m_z = Z.shape
    m_x = params.m_x

    x_pred = np.empty((N, T + 1, m_x))
    x_filt = np.empty((N, T + 1, m_x))
    P_pred = np.empty((T + 1, m_x, m_x))
    P_filt = np.empty((T + 1, m_x, m_x))
    innov = np.full((N, T + 1, m_z), np.nan)
    S = np.full((T + 1, m_z, m_z), np.nan)
    K = np.full((T + 1, m_x, m_z), np.nan)
    ll = np.empty(N)
    c = np.ascontiguousarray
    status, k = _filter_kernel(
        c(params.F), c(params.H), c(params.Q), c(params.R), c(params.mu0), c(params.Sigma0),
        Z, x_pred, x_filt, P_pred, P_filt, innov, S, K, ll,
    )
    if status:
        raise FilterDivergenceError(f"innovation covariance at step {k} {_STATUS[status]}", step=k)
    return BatchFilterResult(x_pred, P_pred, x_filt, P_filt, innov, S, K, ll)


def smooth_batch(
    params: ModelParams, observations, *, validate: bool = True
) -> tuple[BatchFilterResult, BatchSmootherResult]:
    """Filter then run the RTS backward pass, including lag-one covariances."""
    fr = filter_batch(params, observations, validate=validate)
    x_s = fr.x_filt.copy()
    P_s = fr.P_filt.copy()
    P_lag = np.full_like(fr.P_filt, np.nan)
    c = np.ascontiguousarray
    status, k = _smoother_kernel(
        c(params.F), c(params.H), fr.x_pred, fr.x_filt, fr.P_pred, fr.P_filt, fr.gains, x_s, P_s, P_lag
    )
    if status:
        raise SmootherError(f"predicted covariance at step {k} {_STATUS[status]}", step=k)
    return fr, BatchSmootherResult(x_s, P_s, P_lag)


def filter(params: ModelParams, obs: LabeledSequence | np.ndarray) -> FilterResult:
    """Kalman filter for a single observation sequence."""
    Z = as_observation_batch(obs)
    if Z.shape[0] != 1:
        raise ValueError("filter takes one sequence; use filter_batch for several")
    return filter_batch(params, Z).sequence(0)


def smooth(params: ModelParams, obs: LabeledSequence | np.ndarray) -> tuple[FilterResult, SmootherResult]:
    Z = as_observation_batch(obs)
    if Z.shape[0] != 1:
        raise ValueError("smooth takes one sequence; use smooth_batch for several")
    fr, sr = smooth_batch(params, Z)
    return fr.sequence(0), sr.sequence(0)


def log_likelihood(params: ModelParams, obs: LabeledSequence | np.ndarray) -> float:
    """Innovations-form log p(z_1:T) under ``params``."""
    return filter(params, obs).log_likelihood


def log_likelihood_batch(params: ModelParams, observations, *, validate: bool = True) -> np.ndarray:
    return filter_batch(params, observations, validate=validate).log_likelihood


def innovations_log_likelihood(innovations: np.ndarray, innovation_cov: np.ndarray) -> float:
    """Recompute -1/2 sum_k [log det(2 pi S_k) + v_k' S_k^-1 v_k] from stored values.

    Accepts the NaN-padded arrays of :class:`FilterResult` (row 0 is skipped).
    """
    total = 0.0
    for v, Sk in zip(innovations[1:], innovation_cov[1:]):
        L = np.linalg.cholesky(Sk)
        y = solve_triangular(L, v, lower=True)
        total += len(v) * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + y @ y
    return -0.5 * total
