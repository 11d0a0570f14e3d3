"""Generative sampling from the latent changepoint model, synthetic grids for
recovery studies, and a dense brute-force joint density used as the oracle
for every full-conditional test.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import covkernel
from .conditionals import DecayParams, ModelState
from .errors import InputError
from .panel import (
    CovariatePanel,
    DesignMatrix,
    OrdinalPanel,
    SpaceTimeGrid,
    assemble_design,
    standardize,
    to_matrix,
    to_vector,
)

DENSE_SCALE_LIMIT = 64  # dense oracles refuse anything bigger than n*T = 64


@dataclass
class TrueParams:
    """Ground-truth parameter bundle for simulation studies."""

    m: int
    t0: int
    theta: np.ndarray
    theta_star: np.ndarray
    cuts: np.ndarray  # full length m+1 with -inf / 0 / ... / +inf
    decay: DecayParams
    kappa: float = 1.0
    G: int = 1
    H: int = 1

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.theta_star = np.asarray(self.theta_star, dtype=float)
        self.cuts = np.asarray(self.cuts, dtype=float)
        if self.cuts.shape != (self.m + 1,):
            raise InputError(f"cuts must have length m+1={self.m + 1}")
        if not (np.isneginf(self.cuts[0]) and self.cuts[1] == 0.0 and np.isposinf(self.cuts[-1])):
            raise InputError("cuts must run -inf, 0, ..., +inf")
        if self.m >= 3 and not np.all(np.diff(self.cuts[1:self.m]) > 0):
            raise InputError("free cuts must be strictly increasing")


def full_cuts(free_cuts, m: int) -> np.ndarray:
    """Assemble the length-(m+1) cut array from the finite thresholds
    (delta_1 .. delta_{m-1}, with delta_1 = 0)."""
    free_cuts = np.asarray(free_cuts, dtype=float)
    if free_cuts.shape != (m - 1,):
        raise InputError(f"need m-1={m - 1} finite cuts, got {free_cuts.shape}")
    if free_cuts[0] != 0.0:
        raise InputError("the first cut is pinned at 0")
    return np.concatenate([[-np.inf], free_cuts, [np.inf]])


def categorize_latent(pi: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    """Threshold latent values: y = j iff cut_{j-1} < pi <= cut_j."""
    inner = cuts[1:-1]
    return np.searchsorted(inner, pi, side="left").astype(np.int64) + 1


def make_jittered_grid(n: int, T: int, span_km: float = 500.0,
                       rng: np.random.Generator | None = None,
                       center=(40.0, -76.0)) -> SpaceTimeGrid:
    """Roughly square lattice of n locations spanning ~span_km, jittered."""
    if rng is None:
        rng = np.random.default_rng(0)
    side = math.ceil(math.sqrt(n))
    deg = span_km / 111.195  # km per degree of latitude
    coords = []
    for i in range(n):
        r, c = divmod(i, side)
        frac_r = r / max(side - 1, 1)
        frac_c = c / max(side - 1, 1)
        coords.append((frac_r, frac_c))
    jitter = rng.uniform(-0.03, 0.03, size=(n, 2))
    lat = center[0] + (np.array([p[0] for p in coords]) - 0.5 + jitter[:, 0]) * deg
    lon = center[1] + (np.array([p[1] for p in coords]) - 0.5 + jitter[:, 1]) * deg
    ids = tuple(f"L{i + 1:02d}" for i in range(n))
    return SpaceTimeGrid(ids=ids, lat=lat, lon=lon, T=T)


def simulate_covariates(grid: SpaceTimeGrid, G: int, H: int,
                        rng: np.random.Generator) -> CovariatePanel:
    """Independent unit-normal covariate columns, then standardized."""
    raw = CovariatePanel(
        fixed_names=tuple(f"x{g + 1}" for g in range(G)),
        fixed=rng.standard_normal((grid.M, G)),
        varying_names=tuple(f"z{h + 1}" for h in range(H)),
        varying=rng.standard_normal((grid.M, H)),
    )
    return standardize(raw)


def draw_separable_field(dist_km: np.ndarray, T: int, phi_s: float, phi_t: float,
                         rng: np.random.Generator) -> np.ndarray:
    """One (n, T) draw of a zero-mean field with covariance
    Sigma_t (x) Sigma_s, via the factor Choleskys (never the nT x nT joint)."""
    Ls, _ = covkernel.jittered_cholesky(covkernel.exp_decay_matrix(dist_km, phi_s))
    Lt, _ = covkernel.jittered_cholesky(
        covkernel.exp_decay_matrix(covkernel.time_lag_matrix(T), phi_t))
    Z = rng.standard_normal((dist_km.shape[0], T))
    return Ls @ Z @ Lt.T


@dataclass
class LatentTruth:
    """Everything the simulator knows that the fitter must recover."""

    params: TrueParams
    covariates: CovariatePanel
    design: DesignMatrix
    pi: np.ndarray
    U: np.ndarray
    V: np.ndarray


def simulate_panel(true_params: TrueParams, grid: SpaceTimeGrid,
                   rng: np.random.Generator,
                   covariates: CovariatePanel | None = None) -> tuple[OrdinalPanel, LatentTruth]:
    """Draw one panel from the generative model: U and V from their separable
    Gaussians, the latent field with unit noise, categories by thresholding."""
    tp = true_params
    if covariates is None:
        covariates = simulate_covariates(grid, tp.G, tp.H, rng)
    design = assemble_design(grid, covariates)
    k = design.X.shape[1]
    if tp.theta.shape != (k,) or tp.theta_star.shape != (k,):
        raise InputError(f"theta vectors must have length k={k}")
    if not (0 <= tp.t0 <= grid.T):
        raise InputError(f"t0={tp.t0} outside 0..{grid.T}")
    dist = covkernel.pairwise_distances(grid.lat, grid.lon)
    U = draw_separable_field(dist, grid.T, tp.decay.phi_us, tp.decay.phi_ut, rng)
    V = draw_separable_field(dist, grid.T, tp.decay.phi_vs, tp.decay.phi_vt, rng)
    npre = grid.n * tp.t0
    mean = np.empty(grid.M)
    mean[:npre] = design.X[:npre] @ tp.theta + to_vector(U)[:npre]
    mean[npre:] = design.X[npre:] @ tp.theta_star + to_vector(U)[npre:] + to_vector(V)[npre:]
    pi = mean + rng.standard_normal(grid.M)
    y = categorize_latent(pi, tp.cuts)
    panel = OrdinalPanel(grid=grid, y=y, m=tp.m)
    return panel, LatentTruth(params=tp, covariates=covariates, design=design,
                              pi=pi, U=U, V=V)


def simulate_piecewise_panel(grid: SpaceTimeGrid, thetas, boundaries,
                             cuts: np.ndarray, m: int,
                             phi_us: float, phi_ut: float,
                             rng: np.random.Generator,
                             covariates: CovariatePanel | None = None,
                             G: int = 1, H: int = 1):
    """Panel whose regression coefficients switch at several changepoints.

    `boundaries` lists the last week of each regime except the final one
    (e.g. [25, 45] with T = 70 gives regimes 1-25, 26-45, 46-70); `thetas`
    has one coefficient vector per regime. The shared field U and the unit
    noise keep the covariance structure constant, so only the mean shifts.
    """
    if covariates is None:
        covariates = simulate_covariates(grid, G, H, rng)
    design = assemble_design(grid, covariates)
    edges = [0, *boundaries, grid.T]
    if len(thetas) != len(edges) - 1:
        raise InputError("need one theta per regime")
    if any(edges[i] >= edges[i + 1] for i in range(len(edges) - 1)):
        raise InputError("boundaries must be increasing within 1..T-1")
    dist = covkernel.pairwise_distances(grid.lat, grid.lon)
    U = draw_separable_field(dist, grid.T, phi_us, phi_ut, rng)
    mean = np.empty(grid.M)
    for r, th in enumerate(thetas):
        rows = slice(grid.n * edges[r], grid.n * edges[r + 1])
        mean[rows] = design.X[rows] @ np.asarray(th, dtype=float)
    pi = mean + to_vector(U) + rng.standard_normal(grid.M)
    y = categorize_latent(pi, cuts)
    return OrdinalPanel(grid=grid, y=y, m=m), covariates, U, pi


# ---------------------------------------------------------------------------
# Dense joint density (test oracle)
# ---------------------------------------------------------------------------

def _psi_dense(design: DesignMatrix, omegas, dist_km: np.ndarray) -> np.ndarray:
    k = design.X.shape[1]
    psi = np.zeros((k, k))
    idx = np.arange(1 + design.G)
    psi[idx, idx] = 1.0
    for h in range(design.H):
        blk = design.varying_block(h)
        psi[blk, blk] = covkernel.exp_decay_matrix(dist_km, float(omegas[h]))
    return psi


def dense_joint_logdensity(state: ModelState, panel: OrdinalPanel,
                           design: DesignMatrix, dist_km: np.ndarray) -> float:
    """Unnormalized log joint density of (pi, U, V, theta, theta*, cuts,
    decays, t0) under the observed categories, evaluated with explicit dense
    matrices. Flat priors contribute as support indicators only.

    Scale-guarded to n*T <= 64; this is the oracle every conditional update
    is validated against via density-ratio identities.
    """
    grid = panel.grid
    n, T, M = grid.n, grid.T, grid.M
    if M > DENSE_SCALE_LIMIT:
        raise InputError(f"dense oracle limited to n*T <= {DENSE_SCALE_LIMIT}, got {M}")
    cuts = state.cuts
    y = panel.y
    d = state.decay
    # support indicators: category windows, cut ordering, decay box, t0 range
    if not (0 <= state.t0 <= T):
        return -np.inf
    if panel.m >= 3 and not np.all(np.diff(cuts[1:panel.m]) > 0):
        return -np.inf
    for v in (d.phi_us, d.phi_ut, d.phi_vs, d.phi_vt, *d.omega_s, *d.omega_star_s):
        if not (0.0 < v < 3.0):
            return -np.inf
    if np.any(state.pi <= cuts[y - 1]) or np.any(state.pi > cuts[y]):
        return -np.inf

    npre = n * state.t0
    mean = np.empty(M)
    mean[:npre] = design.X[:npre] @ state.theta + to_vector(state.U)[:npre]
    mean[npre:] = (design.X[npre:] @ state.theta_star
                   + to_vector(state.U)[npre:] + to_vector(state.V)[npre:])
    total = -0.5 * float(np.sum((state.pi - mean) ** 2)) - 0.5 * M * np.log(2 * np.pi)

    lags = covkernel.time_lag_matrix(T)
    K_u = np.kron(covkernel.exp_decay_matrix(lags, d.phi_ut),
                  covkernel.exp_decay_matrix(dist_km, d.phi_us))
    total += covkernel.mvn_logpdf(to_vector(state.U), np.zeros(M), K_u)
    K_v = np.kron(covkernel.exp_decay_matrix(lags, d.phi_vt),
                  covkernel.exp_decay_matrix(dist_km, d.phi_vs))
    total += covkernel.mvn_logpdf(to_vector(state.V), np.zeros(M), K_v)

    k = design.X.shape[1]
    psi = _psi_dense(design, d.omega_s, dist_km)
    total += covkernel.mvn_logpdf(state.theta, np.zeros(k), state.kappa * psi)
    psi_star = _psi_dense(design, d.omega_star_s, dist_km)
    total += covkernel.mvn_logpdf(state.theta_star, np.zeros(k), state.kappa * psi_star)

    total += -np.log(T + 1)  # discrete-uniform changepoint prior
    return total


# ---------------------------------------------------------------------------
# TrueParams JSON round-trip (CLI `simulate` input)
# ---------------------------------------------------------------------------

def true_params_to_dict(tp: TrueParams) -> dict:
    return {
        "m": tp.m,
        "t0": tp.t0,
        "theta": tp.theta.tolist(),
        "theta_star": tp.theta_star.tolist(),
        "cuts": tp.cuts[1:tp.m].tolist(),
        "phi_us": tp.decay.phi_us,
        "phi_ut": tp.decay.phi_ut,
        "phi_vs": tp.decay.phi_vs,
        "phi_vt": tp.decay.phi_vt,
        "omega_s": tp.decay.omega_s.tolist(),
        "omega_star_s": tp.decay.omega_star_s.tolist(),
        "kappa": tp.kappa,
        "G": tp.G,
        "H": tp.H,
    }


def true_params_from_dict(obj: dict) -> TrueParams:
    required = {"m", "t0", "theta", "theta_star", "cuts",
                "phi_us", "phi_ut", "phi_vs", "phi_vt"}
    missing = required - obj.keys()
    if missing:
        raise InputError(f"true-params file missing keys: {sorted(missing)}")
    m = int(obj["m"])
    H = int(obj.get("H", len(obj.get("omega_s", [])) or 0))
    decay = DecayParams(
        phi_us=float(obj["phi_us"]),
        phi_ut=float(obj["phi_ut"]),
        phi_vs=float(obj["phi_vs"]),
        phi_vt=float(obj["phi_vt"]),
        omega_s=np.asarray(obj.get("omega_s", [1.0] * H), dtype=float),
        omega_star_s=np.asarray(obj.get("omega_star_s", [1.0] * H), dtype=float),
    )
    return TrueParams(
        m=m,
        t0=int(obj["t0"]),
        theta=np.asarray(obj["theta"], dtype=float),
        theta_star=np.asarray(obj["theta_star"], dtype=float),
        cuts=full_cuts(np.asarray(obj["cuts"], dtype=float), m),
        decay=decay,
        kappa=float(obj.get("kappa", 1.0)),
        G=int(obj.get("G", 1)),
        H=H,
    )


def load_true_params(path) -> TrueParams:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    return true_params_from_dict(obj)
