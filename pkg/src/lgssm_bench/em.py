"""Maximum-likelihood fitting of state-space parameters with EM.

Several i.i.d. sequences are handled by summing the smoothed second-moment
statistics over sequences, so every update divides by the total number of
transitions ``N * T``.  The initial-state update averages the smoothed
x_{0|T} over sequences and adds their spread to the averaged P_{0|T}.

The M-step works from triangular square roots of the joint moment matrices,
so Q and R never come from subtracting moments that can be twenty orders
of magnitude larger than the noise itself (explosive F over long T).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import kalman
from .ssm import ModelParams, as_observation_batch, make_rng, validate_model

log = logging.getLogger(__name__)

COV_FLOOR = 1e-12
MAX_STATS_COND = 1e12


class EmError(RuntimeError):
    pass


class DegenerateStatisticsError(EmError):
    pass


class EStepError(EmError):
    def __init__(self, message: str, sequence_index: int):
        super().__init__(message)
        self.sequence_index = sequence_index


@dataclass
class SufficientStats:
    """Smoothed second moments summed over time steps and sequences.

    ``x0_sum`` and ``x0_outer_sum`` hold sum_n x_{0|T} and
    sum_n (x_{0|T} x_{0|T}' + P_{0|T}); keeping raw sums makes the
    statistics of two sequence sets add exactly.
    """

    S11: np.ndarray
    S10: np.ndarray
    S00: np.ndarray
    M11: np.ndarray
    M10: np.ndarray
    M00: np.ndarray
    x0_sum: np.ndarray
    x0_outer_sum: np.ndarray
    T_total: int
    n_seq: int
    # upper-triangular square roots: state_root' state_root = [[S00, S10'], [S10, S11]]
    # and obs_root' obs_root = [[M00, M10'], [M10, M11]]; None means derive from the moments
    state_root: np.ndarray | None = None
    obs_root: np.ndarray | None = None

    @property
    def x0_smooth(self) -> np.ndarray:
        return self.x0_sum / self.n_seq

    @property
    def P0_smooth(self) -> np.ndarray:
        m = self.x0_smooth
        return self.x0_outer_sum / self.n_seq - np.outer(m, m)

    def roots(self) -> tuple[np.ndarray, np.ndarray]:
        """Triangular factors of the joint (previous, current) state moments
        and of the joint (state, observation) moments.

        The M-step reads residual covariances off these factors instead of
        subtracting large moments, which keeps Q and R accurate when the
        smoothed states are many orders of magnitude larger than the noise.
        """
        state, obs = self.state_root, self.obs_root
        if state is None:
            state = _chol_upper(np.block([[self.S00, self.S10.T], [self.S10, self.S11]]))
        if obs is None:
            obs = _chol_upper(np.block([[self.M00, self.M10.T], [self.M10, self.M11]]))
        return state, obs

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        if not isinstance(other, SufficientStats):
            return NotImplemented
        names = ("S11", "S10", "S00", "M11", "M10", "M00", "x0_sum", "x0_outer_sum", "T_total", "n_seq")
        (a_state, a_obs), (b_state, b_obs) = self.roots(), other.roots()
        return SufficientStats(
            *(getattr(self, n) + getattr(other, n) for n in names),
            state_root=_triangularize(a_state, b_state),
            obs_root=_triangularize(a_obs, b_obs),
        )


def _triangularize(*blocks: np.ndarray) -> np.ndarray:
    """Upper-triangular R with R'R = sum_i B_i' B_i."""
    return np.linalg.qr(np.vstack(blocks), mode="r")


def _chol_upper(G: np.ndarray) -> np.ndarray:
    """Upper-triangular R with R'R = G for symmetric PSD G.

    Pivots that vanish to rounding leave a zero row instead of failing, so
    singular moment matrices (a state pinned to zero, say) still factor.
    """
    d = G.shape[0]
    R = np.zeros((d, d))
    for j in range(d):
        v = G[j, j] - R[:j, j] @ R[:j, j]
        if not v > 1e-13 * abs(G[j, j]):
            continue
        R[j, j] = np.sqrt(v)
        R[j, j + 1:] = (G[j, j + 1:] - R[:j, j] @ R[:j, j + 1:]) / R[j, j]
    return R


def _regression_root(X: np.ndarray, Y: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Upper-triangular R with R'R = [X Y]'[X Y] + cov.

    The Gram matrix is formed in the basis (X, Y - X B') with B a first
    least-squares fit, so the residual block is summed from small numbers
    rather than left over from subtracting moments of size |X|^2.
    """
    a = X.shape[1]
    C = _chol_upper(0.5 * (cov + cov.T))
    Cx, Cy = C[:, :a], C[:, a:]
    Gxx = X.T @ X + Cx.T @ Cx
    B = (Y.T @ X + Cy.T @ Cx) @ np.linalg.pinv(Gxx, hermitian=True)
    E = Y - X @ B.T
    Ce = Cy - Cx @ B.T
    Gex = E.T @ X + Ce.T @ Cx
    G = np.block([[Gxx, Gex.T], [Gex, E.T @ E + Ce.T @ Ce]])
    R = _chol_upper(0.5 * (G + G.T))
    R[:a, a:] += R[:a, :a] @ B.T
    return R


def _stats_from_smoother(Z: np.ndarray, sr: kalman.BatchSmootherResult) -> SufficientStats:
    N, T, _ = Z.shape
    x = sr.x_smooth
    cur, prev = x[:, 1:], x[:, :-1]
    P_cur = sr.P_smooth[1:].sum(axis=0)
    S11 = np.einsum("nki,nkj->ij", cur, cur) + N * P_cur
    S10 = np.einsum("nki,nkj->ij", cur, prev) + N * sr.P_lag[1:].sum(axis=0)
    S00 = np.einsum("nki,nkj->ij", prev, prev) + N * sr.P_smooth[:-1].sum(axis=0)
    M11 = np.einsum("nki,nkj->ij", Z, Z)
    M10 = np.einsum("nki,nkj->ij", Z, cur)
    x0 = x[:, 0]
    m_x, m_z = x.shape[2], Z.shape[2]
    joint_cov = np.block([
        [sr.P_smooth[:-1].sum(axis=0), sr.P_lag[1:].sum(axis=0).swapaxes(0, 1)],
        [sr.P_lag[1:].sum(axis=0), P_cur],
    ])
    X, Xc = prev.reshape(N * T, m_x), cur.reshape(N * T, m_x)
    state_root = _regression_root(X, Xc, N * joint_cov)
    obs_cov = np.zeros((m_x + m_z, m_x + m_z))
    obs_cov[:m_x, :m_x] = N * P_cur
    obs_root = _regression_root(Xc, Z.reshape(N * T, m_z), obs_cov)
    return SufficientStats(
        S11=S11,
        S10=S10,
        S00=S00,
        M11=M11,
        M10=M10,
        M00=S11.copy(),
        x0_sum=x0.sum(axis=0),
        x0_outer_sum=x0.T @ x0 + N * sr.P_smooth[0],
        T_total=N * T,
        n_seq=N,
        state_root=state_root,
        obs_root=obs_root,
    )


def _e_step(params: ModelParams, Z: np.ndarray) -> tuple[SufficientStats, float]:
    try:
        fr, sr = kalman.smooth_batch(params, Z, validate=False)
    except kalman.KalmanError as exc:
        # the covariance recursion is shared, so the first sequence already fails
        raise EStepError(f"sequence 0: {exc}", sequence_index=0) from exc
    return _stats_from_smoother(Z, sr), float(fr.log_likelihood.sum())


def e_step(params: ModelParams, sequences) -> SufficientStats:
    """Run the smoother under ``params`` and accumulate the six statistics."""
    validate_model(params)
    Z = as_observation_batch(sequences)
    return _e_step(params, Z)[0]


def _regress(root: np.ndarray, m: int, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Least squares of the trailing block on the leading ``m`` columns.

    With root = [[A, B], [0, C]] the coefficient is (A^-1 B)' and the
    residual second moment is C'C, which is PSD by construction.
    """
    A, B, C = root[:m, :m], root[:m, m:], root[m:, m:]
    s = np.linalg.svd(A, compute_uv=False)
    if not np.all(np.isfinite(root)) or s[-1] == 0 or (s[0] / s[-1]) ** 2 > MAX_STATS_COND:
        raise DegenerateStatisticsError(f"{name} is singular or ill-conditioned")
    coef = solve_triangular(A, B).T
    return coef, C.T @ C


def floor_covariance(C: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Symmetrize and raise every eigenvalue to at least ``floor``."""
    C = 0.5 * (C + C.T)
    lam, U = np.linalg.eigh(C)
    if lam[0] >= floor:
        return C
    C = (U * np.maximum(lam, floor)) @ U.T
    return 0.5 * (C + C.T)


def m_step(
    stats: SufficientStats,
    estimate_initial_state: bool = True,
    previous: ModelParams | None = None,
) -> ModelParams:
    """Closed-form maximizer of the expected complete-data log-likelihood."""
    state_root, obs_root = stats.roots()
    m_x = stats.S00.shape[0]
    F, Q = _regress(state_root, m_x, "S00")
    H, R = _regress(obs_root, m_x, "M00")
    Q, R = Q / stats.T_total, R / stats.T_total
    if estimate_initial_state:
        mu0 = stats.x0_smooth
        S0 = 0.5 * (stats.P0_smooth + stats.P0_smooth.T)
        lam, U = np.linalg.eigh(S0)
        if lam[0] < 0:
            S0 = (U * np.maximum(lam, 0.0)) @ U.T
    else:
        if previous is None:
            raise ValueError("previous parameters are needed when the initial state is not estimated")
        mu0, S0 = previous.mu0, previous.Sigma0
    return ModelParams(F, H, floor_covariance(Q), floor_covariance(R), mu0, S0)


def expected_complete_loglik(
    params: ModelParams, stats: SufficientStats, include_initial: bool = True
) -> float:
    """E[log p(Z, X | params)] under the smoothing distribution that produced ``stats``.

    This is the quantity the M-step maximizes.
    """
    F, H, Q, R = params.F, params.H, params.Q, params.R
    T, n = stats.T_total, stats.n_seq
    m_x, m_z = params.m_x, params.m_z

    def term(C, count, resid):
        # -2 log-density part; a covariance that is not positive definite has density 0
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            return np.inf
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return count * logdet + np.trace(np.linalg.solve(C, resid))

    # residual moments as W'W with W = root [-F'; I], never by subtraction
    state_root, obs_root = stats.roots()
    Wq = state_root @ np.vstack([-F.T, np.eye(m_x)])
    Wr = obs_root @ np.vstack([-H.T, np.eye(m_z)])
    rQ, rR = Wq.T @ Wq, Wr.T @ Wr
    total = term(Q, T, rQ) + term(R, T, rR) + (T * m_x + T * m_z) * np.log(2 * np.pi)
    if include_initial:
        d = stats.x0_smooth - params.mu0
        r0 = n * (stats.P0_smooth + np.outer(d, d))
        total += term(params.Sigma0, n, r0) + n * m_x * np.log(2 * np.pi)
    return -0.5 * total


def complete_data_neg2_loglik(params: ModelParams, states: np.ndarray, observations: np.ndarray) -> float:
    """-2 log p(Z, X | params) without the 2*pi constants, for one trajectory.

    ``states`` is (T+1, m_x) including x_0; ``observations`` is (T, m_z).
    """
    x = np.asarray(states, dtype=float).reshape(len(states), -1)
    z = np.asarray(observations, dtype=float).reshape(len(observations), -1)
    T = z.shape[0]

    def quad(C, r):
        return np.einsum("ki,ki->", r, np.linalg.solve(C, r.T).T)

    d0 = x[0] - params.mu0
    v = x[1:] - x[:-1] @ params.F.T
    w = z - x[1:] @ params.H.T
    return float(
        np.linalg.slogdet(params.Sigma0)[1]
        + T * np.linalg.slogdet(params.Q)[1]
        + T * np.linalg.slogdet(params.R)[1]
        + d0 @ np.linalg.solve(params.Sigma0, d0)
        + quad(params.Q, v)
        + quad(params.R, w)
    )


@dataclass
class EmConfig:
    n_restarts: int = 50
    max_iters: int = 50
    param_tol: float = 1e-7
    f_range: tuple[float, float] = (0.5, 1.5)
    h_range: tuple[float, float] = (0.5, 1.5)
    qr_log_range: tuple[float, float] = (1e-6, 1e-2)
    estimate_initial_state: bool = True
    state_dim: int | None = None  # defaults to the observation dimension
    sigma0_init: float = 1e-2

    def __post_init__(self):
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.param_tol > 0:
            raise ValueError("param_tol must be > 0")
        for name in ("f_range", "h_range", "qr_log_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must satisfy low < high, got {(lo, hi)}")
        if self.qr_log_range[0] <= 0:
            raise ValueError("qr_log_range must be positive")
        if self.state_dim is not None and self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")


@dataclass
class EmFitResult:
    params: ModelParams
    train_log_likelihood: float
    iterations_used: int
    restart_index: int
    loglik_trace: list[float]
    converged: bool = False
    failed: bool = False
    failure: str | None = None
    restart_log_likelihoods: list[float] = field(default_factory=list)


def max_param_change(a: ModelParams, b: ModelParams) -> float:
    return max(float(np.max(np.abs(x - y), initial=0.0)) for x, y in zip(a.as_dict().values(), b.as_dict().values()))


def em_run(init: ModelParams, sequences, config: EmConfig, restart_index: int = 0) -> EmFitResult:
    """Alternate E- and M-steps from ``init``.

    ``loglik_trace[i]`` is the observed-data log-likelihood of the i-th
    iterate (``loglik_trace[0]`` belongs to ``init``).  Stops after
    ``config.max_iters`` updates or once no parameter entry moves by more
    than ``config.param_tol``.  A numerical failure stops the run and the
    last iterate with a valid likelihood is returned with ``failed=True``.
    """
    validate_model(init)
    Z = as_observation_batch(sequences)
    stats, ll = _e_step(init, Z)
    params = init
    trace = [ll]
    iters = 0
    converged = failed = False
    failure = None
    for _ in range(config.max_iters):
        try:
            new = m_step(stats, config.estimate_initial_state, previous=params)
            new_stats, new_ll = _e_step(new, Z)
        except (EmError, kalman.KalmanError, np.linalg.LinAlgError) as exc:
            failed, failure = True, f"iteration {iters + 1}: {exc}"
            log.debug("EM restart %d stopped: %s", restart_index, failure)
            break
        if not np.isfinite(new_ll):
            failed, failure = True, f"iteration {iters + 1}: non-finite log-likelihood"
            break
        delta = max_param_change(params, new)
        params, stats, ll = new, new_stats, new_ll
        trace.append(ll)
        iters += 1
        if delta < config.param_tol:
            converged = True
            break
    return EmFitResult(params, ll, iters, restart_index, trace, converged, failed, failure)


def random_init(Z: np.ndarray, config: EmConfig, rng: np.random.Generator) -> ModelParams:
    """Draw a restart's starting point: uniform F, H and log-uniform diagonal Q, R.

    mu0 maps the mean first observation back through the pseudo-inverse of
    the drawn H.
    """
    m_z = Z.shape[2]
    m_x = config.state_dim or m_z
    F = rng.uniform(*config.f_range, size=(m_x, m_x))
    H = rng.uniform(*config.h_range, size=(m_z, m_x))
    lo, hi = np.log(config.qr_log_range[0]), np.log(config.qr_log_range[1])
    Q = np.diag(np.exp(rng.uniform(lo, hi, size=m_x)))
    R = np.diag(np.exp(rng.uniform(lo, hi, size=m_z)))
    mu0 = np.linalg.pinv(H) @ Z[:, 0].mean(axis=0)
    return ModelParams(F, H, Q, R, mu0, config.sigma0_init * np.eye(m_x))


def fit(
    sequences,
    config: EmConfig,
    rng: np.random.Generator | int,
    inits: dict[int, ModelParams] | None = None,
) -> EmFitResult:
    """Multi-restart EM; keep the restart with the highest training log-likelihood.

    Restart ``r`` draws its initialization from ``make_rng(base, r)`` where
    ``base`` is a single integer taken from ``rng``, so restarts could be
    evaluated in any order.  ``inits`` overrides the drawn start of selected
    restarts.  Ties go to the lowest restart index.
    """
    Z = as_observation_batch(sequences)
    if Z.shape[0] < 1:
        raise ValueError("need at least one sequence")
    base = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    best: EmFitResult | None = None
    lls: list[float] = []
    failures: list[str] = []
    for r in range(config.n_restarts):
        init = (inits or {}).get(r)
        if init is None:
            init = random_init(Z, config, make_rng(base, r))
        try:
            res = em_run(init, Z, config, restart_index=r)
        except (EmError, kalman.KalmanError, np.linalg.LinAlgError, ValueError) as exc:
            failures.append(f"restart {r}: {exc}")
            lls.append(float("nan"))
            continue
        lls.append(res.train_log_likelihood)
        if best is None or res.train_log_likelihood > best.train_log_likelihood:
            best = res
    if best is None:
        raise EmError("all EM restarts failed:\n  " + "\n  ".join(failures))
    best.restart_log_likelihoods = lls
    return best
