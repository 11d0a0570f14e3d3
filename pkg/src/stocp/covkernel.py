"""Distances, exponential-decay correlation matrices, separable space-time
correlation, Kronecker algebra, and multivariate-normal utilities.

The joint space-time covariance of a process field W (n locations x T weeks,
vectorized time-major) is Sigma_t (x) Sigma_s, a Kronecker product of a T x T
temporal and an n x n spatial correlation matrix. Only the factor matrices
are ever formed; the nT x nT joint appears solely in test oracles.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import InputError, NumericalError

# IUGG mean Earth radius, km
EARTH_RADIUS_KM = 6371.0088

# Jitter ladder for Cholesky factorizations of near-singular covariances.
JITTER_START = 1e-8
JITTER_MAX = 1e-4


def great_circle_distance(a, b) -> float:
    """Haversine distance in km between (lat, lon) points in degrees."""
    lat1, lon1 = (float(x) for x in a)
    lat2, lon2 = (float(x) for x in b)
    for lat, lon in ((lat1, lon1), (lat2, lon2)):
        if abs(lat) > 90 or abs(lon) > 180:
            raise InputError(f"invalid coordinates ({lat}, {lon})")
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2 - lon1)
    h = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return float(2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0))))


def pairwise_distances(lat, lon) -> np.ndarray:
    """n x n great-circle distance matrix (km) for aligned degree arrays."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    p = np.radians(lat)
    dl = np.radians(lon[:, None] - lon[None, :])
    dp = p[:, None] - p[None, :]
    h = np.sin(dp / 2.0) ** 2 + np.cos(p)[:, None] * np.cos(p)[None, :] * np.sin(dl / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    np.fill_diagonal(d, 0.0)
    return 0.5 * (d + d.T)


def time_lag_matrix(T: int) -> np.ndarray:
    """T x T matrix of absolute week lags."""
    t = np.arange(T, dtype=float)
    return np.abs(t[:, None] - t[None, :])


def exp_decay_matrix(pairwise: np.ndarray, decay: float, validate: bool = True) -> np.ndarray:
    """Entrywise exp(-decay * pairwise) correlation matrix.

    `validate=False` skips the input checks for matrices already validated
    once (cache-internal rebuilds on every decay proposal).
    """
    pairwise = np.asarray(pairwise, dtype=float)
    if decay <= 0:
        raise InputError(f"decay must be positive, got {decay}")
    if validate:
        if pairwise.ndim != 2 or pairwise.shape[0] != pairwise.shape[1]:
            raise InputError("pairwise matrix must be square")
        if not np.allclose(pairwise, pairwise.T, atol=1e-10):
            raise InputError("pairwise matrix must be symmetric")
        if np.any(pairwise < 0) or np.any(np.diag(pairwise) != 0):
            raise InputError("pairwise matrix must be nonnegative with a zero diagonal")
    return np.exp(-decay * pairwise)


def separable_correlation(phi_s: float, phi_t: float, dist: float, lag: float) -> float:
    """Space-time correlation exp(-phi_s*dist) * exp(-phi_t*lag)."""
    if phi_s <= 0 or phi_t <= 0:
        raise InputError("decay parameters must be positive")
    if dist < 0 or lag < 0:
        raise InputError("distance and lag must be nonnegative")
    return float(np.exp(-phi_s * dist) * np.exp(-phi_t * lag))


def kron_quad_matrix(A_inv: np.ndarray, B_inv: np.ndarray, Wmat: np.ndarray) -> float:
    """trace(B_inv @ Wmat @ A_inv @ Wmat.T) for a q x p matricization Wmat."""
    return float(np.sum((B_inv @ Wmat) * (Wmat @ A_inv)))


def kron_quadratic_form(A_inv: np.ndarray, B_inv: np.ndarray, v: np.ndarray) -> float:
    """Quadratic form v' (A_inv (x) B_inv) v without forming the Kronecker
    product. v must be in time-major order with p = A_inv's dimension (time)
    and q = B_inv's dimension (space)."""
    A_inv = np.asarray(A_inv, dtype=float)
    B_inv = np.asarray(B_inv, dtype=float)
    v = np.asarray(v, dtype=float)
    p, q = A_inv.shape[0], B_inv.shape[0]
    if A_inv.shape != (p, p) or B_inv.shape != (q, q) or v.shape != (p * q,):
        raise InputError(
            f"dimension mismatch: A_inv {A_inv.shape}, B_inv {B_inv.shape}, v {v.shape}"
        )
    Wmat = v.reshape((q, p), order="F")
    return kron_quad_matrix(A_inv, B_inv, Wmat)


def jittered_cholesky(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of a symmetric matrix, adding diagonal jitter
    1e-8 -> 1e-4 (x10 steps) on failure. Returns (L, jitter_used)."""
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(A.shape[0])
    while jitter <= JITTER_MAX:
        try:
            return np.linalg.cholesky(A + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(
        f"Cholesky failed for a {A.shape[0]}x{A.shape[0]} matrix even with jitter {JITTER_MAX}"
    )


def chol_sample_mvn(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(mean, cov) via Cholesky; deterministic given rng state."""
    mean = np.asarray(mean, dtype=float)
    L, _ = jittered_cholesky(cov)
    z = rng.standard_normal(mean.shape[0])
    return mean + L @ z


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Dense multivariate-normal log density (test-oracle scale only)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    L, _ = jittered_cholesky(cov)
    r = sla.solve_triangular(L, x - mean, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + float(r @ r))


def conditional_time_slice(
    Sigma_t: np.ndarray, Sigma_s: np.ndarray, t: int, field: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional distribution of time slice t of a zero-mean field with
    covariance Sigma_t (x) Sigma_s, given all other slices.

    `field` is the (n, T) matrix of current values; column t is ignored.
    Returns (mean: n-vector, cov: n x n). The spatial factor cancels from
    the mean, so mean = field[:, others] @ w with w = Sigma_22^{-1} Sigma_21,
    and cov = (Sigma_11 - Sigma_12 Sigma_22^{-1} Sigma_21) * Sigma_s.
    """
    Sigma_t = np.asarray(Sigma_t, dtype=float)
    Sigma_s = np.asarray(Sigma_s, dtype=float)
    field = np.asarray(field, dtype=float)
    T = Sigma_t.shape[0]
    n = Sigma_s.shape[0]
    if not (0 <= t < T):
        raise InputError(f"time index {t} outside 0..{T - 1}")
    if field.shape != (n, T):
        raise InputError(f"field must be (n={n}, T={T}), got {field.shape}")
    if T == 1:
        return np.zeros(n), Sigma_t[0, 0] * Sigma_s
    others = np.concatenate([np.arange(t), np.arange(t + 1, T)])
    s11 = Sigma_t[t, t]
    s12 = Sigma_t[t, others]
    s22 = Sigma_t[np.ix_(others, others)]
    try:
        c22 = sla.cho_factor(s22, lower=True)
        w = sla.cho_solve(c22, s12)
    except np.linalg.LinAlgError:
        L, _ = jittered_cholesky(s22)
        w = sla.cho_solve((L, True), s12)
    cond_var = float(s11 - s12 @ w)
    mean = field[:, others] @ w
    return mean, cond_var * Sigma_s


@dataclass
class TemporalConditioner:
    """Precomputed full-conditional weights for every time slice.

    For a zero-mean Gaussian with T x T covariance Sigma, the conditional of
    coordinate t given the rest has mean sum_{s != t} w[s, t] x_s and variance
    var[t], with w[:, t] = -Q[:, t]/Q[t, t] (zeroed at t) and var[t] = 1/Q[t, t]
    for Q = Sigma^{-1}. Identical to the partitioned form used by
    conditional_time_slice.
    """

    weights: np.ndarray  # (T, T); column t gives the slice-t weights
    var: np.ndarray      # (T,)

    @classmethod
    def from_corr(cls, Sigma_t: np.ndarray) -> "TemporalConditioner":
        T = Sigma_t.shape[0]
        if T == 1:
            return cls(weights=np.zeros((1, 1)), var=np.array([float(Sigma_t[0, 0])]))
        L, _ = jittered_cholesky(Sigma_t)
        Q = sla.cho_solve((L, True), np.eye(T))
        d = np.diag(Q).copy()
        W = -Q / d[None, :]
        np.fill_diagonal(W, 0.0)
        # rounding collapses float dust so equal conditional variances (e.g.
        # all interior slices of a stationary kernel) share one memo entry
        return cls(weights=W, var=np.round(1.0 / d, 13))

    def slice_mean(self, t: int, field: np.ndarray) -> np.ndarray:
        return field @ self.weights[:, t]


class CorrBundle:
    """A correlation matrix plus its factorization by-products, built lazily."""

    __slots__ = ("mat", "_chol", "_logdet", "_inv", "_conditioner", "_slice_cov")

    def __init__(self, mat: np.ndarray):
        self.mat = mat
        self._chol = None
        self._logdet = None
        self._inv = None
        self._conditioner = None
        self._slice_cov = {}

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol, _ = jittered_cholesky(self.mat)
        return self._chol

    @property
    def logdet(self) -> float:
        if self._logdet is None:
            self._logdet = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        return self._logdet

    @property
    def inv(self) -> np.ndarray:
        if self._inv is None:
            self._inv = sla.cho_solve((self.chol, True), np.eye(self.mat.shape[0]))
        return self._inv

    @property
    def conditioner(self) -> TemporalConditioner:
        if self._conditioner is None:
            self._conditioner = TemporalConditioner.from_corr(self.mat)
        return self._conditioner

    def solve(self, B: np.ndarray) -> np.ndarray:
        """mat^{-1} @ B via the cached Cholesky factor."""
        return sla.cho_solve((self.chol, True), B)

    def data_posterior_slice(self, cond_var: float) -> tuple[np.ndarray, np.ndarray]:
        """(cov, chol) of [ (cond_var * mat)^{-1} + I ]^{-1}, memoized on
        cond_var. This is the posterior covariance of one time slice under a
        unit-variance observation layer."""
        hit = self._slice_cov.get(cond_var)
        if hit is not None:
            return hit
        n = self.mat.shape[0]
        precision = self.inv / cond_var + np.eye(n)
        Lp, _ = jittered_cholesky(precision)
        cov = sla.cho_solve((Lp, True), np.eye(n))
        cov = 0.5 * (cov + cov.T)
        Lc, _ = jittered_cholesky(cov)
        out = (cov, Lc)
        if len(self._slice_cov) > 64:
            self._slice_cov.clear()
        self._slice_cov[cond_var] = out
        return out


class CorrCache:
    """LRU-memoized exponential-decay correlation bundles for one grid.

    Distances are computed once; T x T and n x n matrices are rebuilt only
    when a decay parameter actually changes value.
    """

    def __init__(self, dist_km: np.ndarray, T: int, max_entries: int = 32):
        self.dist_km = np.asarray(dist_km, dtype=float)
        self.lags = time_lag_matrix(T)
        self.max_entries = max_entries
        self._spatial: OrderedDict[float, CorrBundle] = OrderedDict()
        self._temporal: OrderedDict[float, CorrBundle] = OrderedDict()

    @classmethod
    def for_grid(cls, grid) -> "CorrCache":
        return cls(pairwise_distances(grid.lat, grid.lon), grid.T)

    def _get(self, store: OrderedDict, key: float, pairwise: np.ndarray) -> CorrBundle:
        bundle = store.get(key)
        if bundle is None:
            bundle = CorrBundle(exp_decay_matrix(pairwise, key, validate=False))
            store[key] = bundle
            if len(store) > self.max_entries:
                store.popitem(last=False)
        else:
            store.move_to_end(key)
        return bundle

    def spatial(self, decay: float) -> CorrBundle:
        return self._get(self._spatial, float(decay), self.dist_km)

    def temporal(self, decay: float) -> CorrBundle:
        return self._get(self._temporal, float(decay), self.lags)
