"""Full-conditional updates for the latent ordinal-probit changepoint model.

Model recap (unit variances throughout, for identifiability):

    y_i = j  iff  cut_{j-1} < pi_i <= cut_j,   cut_1 pinned at 0
    pi_i = x_i' theta      + u_i        + eps_i      for blocks before the
                                                      changepoint (t <= t0)
    pi_i = x_i' theta_star + u_i + v_i  + eps*_i     after it (t > t0)

    U ~ N(0, Sigma_ut (x) Sigma_us),  V ~ N(0, Sigma_vt (x) Sigma_vs)
    theta ~ N(0, kappa * Psi),  Psi = blockdiag(I_{1+G}, Omega_s^1..Omega_s^H)
    free cuts ~ uniform between neighbors, decays ~ U(0, 3), t0 ~ U{0..T}

t0 counts the number of pre-changepoint time blocks; time-block indices in
code are 0-based, so block t is pre iff t < t0.

Each update draws from the exact conditional given the rest of the state.
The cut-point conditional marginalizes the latent entries of the two
adjacent categories (their truncated-Gaussian integrals collapse to normal
CDF differences); those entries are redrawn immediately afterwards so every
later update conditions on a coherent state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import covkernel, rngkit
from .errors import InputError, NumericalError
from .panel import DesignMatrix, OrdinalPanel, to_matrix, to_vector

DECAY_LOWER = 0.0
DECAY_UPPER = 3.0

PHI_NAMES = ("phi_vt", "phi_vs", "phi_ut", "phi_us")


@dataclass
class DecayParams:
    """Exponential-decay rates: per-km for spatial, per-week for temporal."""

    phi_us: float
    phi_ut: float
    phi_vs: float
    phi_vt: float
    omega_s: np.ndarray       # (H,) pre-regime varying-coefficient decays
    omega_star_s: np.ndarray  # (H,)

    def __post_init__(self):
        self.omega_s = np.asarray(self.omega_s, dtype=float)
        self.omega_star_s = np.asarray(self.omega_star_s, dtype=float)
        for name in PHI_NAMES:
            v = getattr(self, name)
            if not (DECAY_LOWER < v < DECAY_UPPER):
                raise InputError(f"{name}={v} outside ({DECAY_LOWER}, {DECAY_UPPER})")
        for arr, name in ((self.omega_s, "omega_s"), (self.omega_star_s, "omega_star_s")):
            if arr.size and not np.all((arr > DECAY_LOWER) & (arr < DECAY_UPPER)):
                raise InputError(f"{name} entries must lie in ({DECAY_LOWER}, {DECAY_UPPER})")

    def copy(self) -> "DecayParams":
        return DecayParams(self.phi_us, self.phi_ut, self.phi_vs, self.phi_vt,
                           self.omega_s.copy(), self.omega_star_s.copy())


@dataclass
class ModelState:
    """One chain's current values. cuts has length m+1 with cuts[0] = -inf,
    cuts[1] = 0, free cuts strictly increasing, cuts[m] = +inf."""

    pi: np.ndarray          # (M,)
    U: np.ndarray           # (n, T)
    V: np.ndarray           # (n, T)
    theta: np.ndarray       # (k,)
    theta_star: np.ndarray  # (k,)
    cuts: np.ndarray        # (m+1,)
    decay: DecayParams
    t0: int
    kappa: float = 1.0

    def copy(self) -> "ModelState":
        return ModelState(self.pi.copy(), self.U.copy(), self.V.copy(),
                          self.theta.copy(), self.theta_star.copy(), self.cuts.copy(),
                          self.decay.copy(), self.t0, self.kappa)


@dataclass
class Workspace:
    """Per-fit immutable data plus precomputed caches shared by all updates.

    The M x M joint covariance is never formed; only the T x T temporal and
    n x n spatial factors live in the cache, rebuilt on decay changes.
    """

    panel: OrdinalPanel
    design: DesignMatrix
    cache: covkernel.CorrCache
    cat_idx: tuple            # index arrays per category 1..m (cat_idx[j])
    gram_prefix: np.ndarray   # (T+1, k, k); gram_prefix[c] = X[:n*c]' X[:n*c]
    cut_width: float = 1.0
    decay_width: float = 0.25
    max_stepouts: int = 50

    @property
    def n(self) -> int:
        return self.panel.grid.n

    @property
    def T(self) -> int:
        return self.panel.grid.T

    @property
    def X(self) -> np.ndarray:
        return self.design.X


def make_workspace(panel: OrdinalPanel, design: DesignMatrix,
                   cut_width: float = 1.0, decay_width: float = 0.25,
                   max_stepouts: int = 50) -> Workspace:
    grid = panel.grid
    if design.X.shape[0] != grid.M:
        raise InputError("design matrix rows do not match the panel")
    cat_idx = [None] + [np.flatnonzero(panel.y == j) for j in range(1, panel.m + 1)]
    k = design.X.shape[1]
    blocks = design.X.reshape(grid.T, grid.n, k)
    per_block = np.einsum("tni,tnj->tij", blocks, blocks)
    gram_prefix = np.concatenate([np.zeros((1, k, k)), np.cumsum(per_block, axis=0)])
    return Workspace(
        panel=panel,
        design=design,
        cache=covkernel.CorrCache.for_grid(grid),
        cat_idx=tuple(cat_idx),
        gram_prefix=gram_prefix,
        cut_width=cut_width,
        decay_width=decay_width,
        max_stepouts=max_stepouts,
    )


def check_state(state: ModelState, panel: OrdinalPanel) -> None:
    """Raise InputError if any model-state invariant is violated."""
    m = panel.m
    cuts = state.cuts
    if cuts.shape != (m + 1,):
        raise InputError(f"cuts must have length m+1={m + 1}")
    if not (np.isneginf(cuts[0]) and cuts[1] == 0.0 and np.isposinf(cuts[m])):
        raise InputError("cuts must run from -inf through 0 to +inf")
    if not np.all(np.diff(cuts[1:m]) > 0):
        raise InputError("free cuts must be strictly increasing")
    lower = cuts[panel.y - 1]
    upper = cuts[panel.y]
    if not (np.all(state.pi > lower) and np.all(state.pi <= upper)):
        raise InputError("latent values stray outside their category windows")
    if not (0 <= state.t0 <= panel.grid.T):
        raise InputError(f"t0={state.t0} outside 0..{panel.grid.T}")
    DecayParams(**{f: getattr(state.decay, f) for f in
                   ("phi_us", "phi_ut", "phi_vs", "phi_vt", "omega_s", "omega_star_s")})


# ---------------------------------------------------------------------------
# Means and regime bookkeeping
# ---------------------------------------------------------------------------

def latent_mean(state: ModelState, ws: Workspace) -> np.ndarray:
    """Noise-free latent mean per observation: regression plus U (plus V
    after the changepoint)."""
    n = ws.n
    npre = n * state.t0
    X = ws.X
    mean = np.empty(ws.panel.grid.M)
    if npre:
        mean[:npre] = X[:npre] @ state.theta + to_vector(state.U)[:npre]
    if npre < mean.shape[0]:
        uv = to_vector(state.U)[npre:] + to_vector(state.V)[npre:]
        mean[npre:] = X[npre:] @ state.theta_star + uv
    return mean


# ---------------------------------------------------------------------------
# Latent field
# ---------------------------------------------------------------------------

def update_latent(state: ModelState, ws: Workspace, rng: np.random.Generator) -> None:
    """Redraw every latent value from its truncated normal window."""
    y = ws.panel.y
    mean = latent_mean(state, ws)
    state.pi = rngkit.sample_truncated_normal(
        mean, 1.0, state.cuts[y - 1], state.cuts[y], rng
    )


# ---------------------------------------------------------------------------
# Regression coefficients
# ---------------------------------------------------------------------------

def _psi_inverse(ws: Workspace, omegas: np.ndarray, kappa: float) -> np.ndarray:
    """Inverse prior dispersion Psi^{-1}/kappa for one coefficient block."""
    d = ws.design
    k = d.X.shape[1]
    n = ws.n
    out = np.zeros((k, k))
    idx = np.arange(1 + d.G)
    out[idx, idx] = 1.0
    for h in range(d.H):
        blk = d.varying_block(h)
        out[blk, blk] = ws.cache.spatial(float(omegas[h])).inv
    return out / kappa


def coefficient_posterior(state: ModelState, ws: Workspace, segment: str):
    """Gaussian conditional (mean, cov) of theta (segment='pre') or
    theta_star ('post') given everything else."""
    n, T = ws.n, ws.T
    npre = n * state.t0
    if segment == "pre":
        if state.t0 == 0:
            raise InputError("pre segment is empty (t0 = 0)")
        rows = slice(0, npre)
        gram = ws.gram_prefix[state.t0]
        resid = state.pi[rows] - to_vector(state.U)[rows]
        omegas = state.decay.omega_s
    elif segment == "post":
        if state.t0 == T:
            raise InputError("post segment is empty (t0 = T)")
        rows = slice(npre, n * T)
        gram = ws.gram_prefix[T] - ws.gram_prefix[state.t0]
        resid = state.pi[rows] - to_vector(state.U)[rows] - to_vector(state.V)[rows]
        omegas = state.decay.omega_star_s
    else:
        raise InputError(f"segment must be 'pre' or 'post', got {segment!r}")
    precision = gram + _psi_inverse(ws, omegas, state.kappa)
    L, _ = covkernel.jittered_cholesky(precision)
    import scipy.linalg as sla
    cov = sla.cho_solve((L, True), np.eye(precision.shape[0]))
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (ws.X[rows].T @ resid)
    return mean, cov


def update_coefficients(state: ModelState, ws: Workspace, segment: str,
                        rng: np.random.Generator) -> None:
    mean, cov = coefficient_posterior(state, ws, segment)
    draw = covkernel.chol_sample_mvn(mean, cov, rng)
    if segment == "pre":
        state.theta = draw
    else:
        state.theta_star = draw


# ---------------------------------------------------------------------------
# Cut points
# ---------------------------------------------------------------------------

def cutpoint_log_density(state: ModelState, ws: Workspace, j: int, candidate: float,
                         mean: np.ndarray | None = None) -> float:
    """Log conditional density of free cut j (2 <= j <= m-1) with the latent
    entries of categories j and j+1 integrated out: sums of log normal-CDF
    differences over those observations. -inf outside (cut_{j-1}, cut_{j+1})."""
    m = ws.panel.m
    if not (2 <= j <= m - 1):
        raise InputError(f"cut index must lie in 2..{m - 1}, got {j}")
    cuts = state.cuts
    if not (cuts[j - 1] < candidate < cuts[j + 1]):
        return -np.inf
    if mean is None:
        mean = latent_mean(state, ws)
    total = 0.0
    idx = ws.cat_idx[j]
    if idx.size:
        total += float(np.sum(rngkit.log_ndtr_diff(cuts[j - 1] - mean[idx],
                                                   candidate - mean[idx])))
    idx = ws.cat_idx[j + 1]
    if idx.size:
        total += float(np.sum(rngkit.log_ndtr_diff(candidate - mean[idx],
                                                   cuts[j + 1] - mean[idx])))
    return total


def update_cutpoints(state: ModelState, ws: Workspace, rng: np.random.Generator) -> None:
    """Slice-sample each free cut in ascending order, then redraw the latent
    entries of the two adjacent categories so their windows hold again."""
    m = ws.panel.m
    if m < 3:
        return
    mean = latent_mean(state, ws)
    y = ws.panel.y
    for j in range(2, m):
        cfg = rngkit.SliceConfig(
            width=ws.cut_width,
            max_stepouts=ws.max_stepouts,
            bounds=(float(state.cuts[j - 1]), float(state.cuts[j + 1])),
        )
        state.cuts[j] = rngkit.slice_sample_1d(
            lambda d: cutpoint_log_density(state, ws, j, d, mean=mean),
            float(state.cuts[j]), cfg, rng,
        )
        for cat in (j, j + 1):
            idx = ws.cat_idx[cat]
            if idx.size:
                state.pi[idx] = rngkit.sample_truncated_normal(
                    mean[idx], 1.0, state.cuts[cat - 1], state.cuts[cat], rng
                )


# ---------------------------------------------------------------------------
# Space-time process slices
# ---------------------------------------------------------------------------

def _process_bundles(state: ModelState, ws: Workspace, which: str):
    decay = state.decay
    if which == "u":
        return (ws.cache.temporal(decay.phi_ut), ws.cache.spatial(decay.phi_us), state.U)
    if which == "v":
        return (ws.cache.temporal(decay.phi_vt), ws.cache.spatial(decay.phi_vs), state.V)
    raise InputError(f"which must be 'u' or 'v', got {which!r}")


def _slice_mean_chol(bs, mu_c, c, resid):
    """Posterior (mean, chol, cov) for one slice given its conditional-prior
    mean mu_c and variance scale c; resid=None means prior only."""
    if resid is None:
        return mu_c, np.sqrt(c) * bs.chol, c * bs.mat
    cov, chol = bs.data_posterior_slice(c)
    mean = cov @ (bs.inv @ (mu_c / c) + resid)
    return mean, chol, cov


def process_slice_posterior(state: ModelState, ws: Workspace, which: str, t: int):
    """Conditional (mean, cov, chol) for column t (0-based) of U or V.

    V columns in the pre regime follow their conditional prior; every other
    case combines the Kronecker time-slice prior with the unit-variance data
    layer: cov = [Sigma_c^{-1} + I]^{-1}, mean = cov (Sigma_c^{-1} mu_c + r_t).
    """
    n, T = ws.n, ws.T
    if not (0 <= t < T):
        raise InputError(f"time index {t} outside 0..{T - 1}")
    bt, bs, fld = _process_bundles(state, ws, which)
    cond = bt.conditioner
    mu_c = cond.slice_mean(t, fld)
    c = float(cond.var[t])
    pre = t < state.t0
    if which == "v" and pre:
        # conditional prior only; no data term before the changepoint
        mean, chol, cov = _slice_mean_chol(bs, mu_c, c, None)
        return mean, cov, chol
    rows = slice(t * n, (t + 1) * n)
    Xt = ws.X[rows]
    if which == "v":
        resid = state.pi[rows] - Xt @ state.theta_star - state.U[:, t]
    elif pre:
        resid = state.pi[rows] - Xt @ state.theta
    else:
        resid = state.pi[rows] - Xt @ state.theta_star - state.V[:, t]
    mean, chol, cov = _slice_mean_chol(bs, mu_c, c, resid)
    return mean, cov, chol


def update_process_slice(state: ModelState, ws: Workspace, which: str, t: int,
                         rng: np.random.Generator) -> None:
    mean, _, chol = process_slice_posterior(state, ws, which, t)
    draw = mean + chol @ rng.standard_normal(ws.n)
    if which == "u":
        state.U[:, t] = draw
    else:
        state.V[:, t] = draw


def _update_process_block(state: ModelState, ws: Workspace, which: str,
                          rng: np.random.Generator) -> None:
    """Sequential slice-by-slice update of a whole process, with the
    regression means and residual matrices assembled once up front."""
    n, T = ws.n, ws.T
    t0 = state.t0
    bt, bs, fld = _process_bundles(state, ws, which)
    cond = bt.conditioner
    weights, var = cond.weights, cond.var
    pi_mat = to_matrix(state.pi, n, T)
    mu_post = to_matrix(ws.X @ state.theta_star, n, T) if t0 < T else None
    if which == "u":
        resid_mat = np.empty((n, T))
        if t0 > 0:
            mu_pre = to_matrix(ws.X @ state.theta, n, T)
            resid_mat[:, :t0] = pi_mat[:, :t0] - mu_pre[:, :t0]
        if t0 < T:
            resid_mat[:, t0:] = pi_mat[:, t0:] - mu_post[:, t0:] - state.V[:, t0:]
    else:
        resid_mat = (pi_mat - mu_post - state.U) if t0 < T else None
    for t in range(T):
        mu_c = fld @ weights[:, t]
        c = float(var[t])
        if which == "v" and t < t0:
            resid = None
        else:
            resid = resid_mat[:, t]
        mean, chol, _ = _slice_mean_chol(bs, mu_c, c, resid)
        fld[:, t] = mean + chol @ rng.standard_normal(n)


# ---------------------------------------------------------------------------
# Decay parameters
# ---------------------------------------------------------------------------

def _separable_quad(bt, bs, fld: np.ndarray) -> float:
    """trace(Sigma_s^{-1} W Sigma_t^{-1} W') via cached Cholesky solves;
    equals kron_quadratic_form on the vectorized field."""
    A = bs.solve(fld)        # Sigma_s^{-1} W    (n, T)
    C = bt.solve(fld.T)      # Sigma_t^{-1} W'   (T, n)
    return float(np.sum(A * C.T))


def decay_log_density(state: ModelState, ws: Workspace, which, candidate: float) -> float:
    """Log conditional density of one decay parameter at `candidate`,
    rebuilding only the affected correlation matrix. `which` is one of the
    phi names, or ("omega", h) / ("omega_star", h) for coefficient decays."""
    if not (DECAY_LOWER < candidate < DECAY_UPPER):
        return -np.inf
    n, T = ws.n, ws.T
    cache = ws.cache
    d = state.decay
    if which in ("phi_vt", "phi_ut"):
        fld = state.V if which == "phi_vt" else state.U
        bt = cache.temporal(candidate)
        bs = cache.spatial(d.phi_vs if which == "phi_vt" else d.phi_us)
        return -0.5 * n * bt.logdet - 0.5 * _separable_quad(bt, bs, fld)
    if which in ("phi_vs", "phi_us"):
        fld = state.V if which == "phi_vs" else state.U
        bs = cache.spatial(candidate)
        bt = cache.temporal(d.phi_vt if which == "phi_vs" else d.phi_ut)
        return -0.5 * T * bs.logdet - 0.5 * _separable_quad(bt, bs, fld)
    kind, h = which
    blk = ws.design.varying_block(h)
    if kind == "omega":
        g = state.theta[blk]
    elif kind == "omega_star":
        g = state.theta_star[blk]
    else:
        raise InputError(f"unknown decay parameter {which!r}")
    bo = cache.spatial(candidate)
    return -0.5 * bo.logdet - float(g @ bo.solve(g)) / (2.0 * state.kappa)


def _slice_decay(state, ws, which, current, rng) -> float:
    cfg = rngkit.SliceConfig(width=ws.decay_width, max_stepouts=ws.max_stepouts,
                             bounds=(DECAY_LOWER, DECAY_UPPER))
    return rngkit.slice_sample_1d(
        lambda c: decay_log_density(state, ws, which, c), current, cfg, rng
    )


def update_decays(state: ModelState, ws: Workspace, rng: np.random.Generator) -> None:
    """Slice-sample every live decay parameter. The V-process and starred
    coefficient decays freeze while the post segment is empty (t0 = T)."""
    d = state.decay
    post_live = state.t0 < ws.T
    if post_live:
        d.phi_vt = _slice_decay(state, ws, "phi_vt", d.phi_vt, rng)
        d.phi_vs = _slice_decay(state, ws, "phi_vs", d.phi_vs, rng)
    d.phi_ut = _slice_decay(state, ws, "phi_ut", d.phi_ut, rng)
    d.phi_us = _slice_decay(state, ws, "phi_us", d.phi_us, rng)
    for h in range(ws.design.H):
        d.omega_s[h] = _slice_decay(state, ws, ("omega", h), d.omega_s[h], rng)
    if post_live:
        for h in range(ws.design.H):
            d.omega_star_s[h] = _slice_decay(state, ws, ("omega_star", h),
                                             d.omega_star_s[h], rng)


# ---------------------------------------------------------------------------
# Changepoint
# ---------------------------------------------------------------------------

def changepoint_log_pmf(state: ModelState, ws: Workspace,
                        support: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Normalized log pmf of t0 over its support.

    The candidate-wise residual sums are assembled from per-time-block
    squared residuals under both regimes via prefix sums (O(M) total).
    Returns (candidates, log_pmf).
    """
    n, T = ws.n, ws.T
    lo, hi = support if support is not None else (0, T)
    if not (0 <= lo <= hi <= T):
        raise InputError(f"changepoint support ({lo}, {hi}) outside 0..{T}")
    cands = np.arange(lo, hi + 1)
    pi_mat = to_matrix(state.pi, n, T)
    mu_pre = to_matrix(ws.X @ state.theta, n, T)
    mu_post = to_matrix(ws.X @ state.theta_star, n, T)
    a = np.sum((pi_mat - mu_pre - state.U) ** 2, axis=0)
    b = np.sum((pi_mat - mu_post - state.U - state.V) ** 2, axis=0)
    ca = np.concatenate([[0.0], np.cumsum(a)])
    cb = np.concatenate([[0.0], np.cumsum(b)])
    # unit noise variances on both sides make the Gaussian normalizers a
    # common constant; kept out of the weights
    logw = -0.5 * (ca[cands] + (cb[T] - cb[cands]))
    return cands, logw - logsumexp(logw)


def update_changepoint(state: ModelState, ws: Workspace, rng: np.random.Generator,
                       support: tuple[int, int] | None = None) -> None:
    lo, hi = support if support is not None else (0, ws.T)
    if lo == hi:
        state.t0 = lo
        return
    cands, logp = changepoint_log_pmf(state, ws, (lo, hi))
    cdf = np.cumsum(np.exp(logp))
    u = rng.random()
    state.t0 = int(cands[min(np.searchsorted(cdf, u), cands.size - 1)])


# ---------------------------------------------------------------------------
# One full sweep
# ---------------------------------------------------------------------------

def gibbs_sweep(state: ModelState, ws: Workspace, rng: np.random.Generator,
                support: tuple[int, int] | None = None) -> None:
    """One full pass over all conditionals in the fixed order
    pi -> theta -> theta* -> cuts -> U_t -> V_t -> decays -> t0.

    Updates whose conditioning segment is empty are skipped: theta needs a
    nonempty pre segment, and the entire post block (theta*, V, its decays)
    freezes while t0 = T.
    """
    T = ws.T
    update_latent(state, ws, rng)
    if state.t0 >= 1:
        update_coefficients(state, ws, "pre", rng)
    if state.t0 <= T - 1:
        update_coefficients(state, ws, "post", rng)
    update_cutpoints(state, ws, rng)
    for t in range(T):
        update_process_slice(state, ws, "u", t, rng)
    if state.t0 < T:
        for t in range(T):
            update_process_slice(state, ws, "v", t, rng)
    update_decays(state, ws, rng)
    lo, hi = support if support is not None else (0, T)
    if lo != hi:
        update_changepoint(state, ws, rng, (lo, hi))
