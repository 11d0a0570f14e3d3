"""Multi-chain Gibbs driver: initialization, sweeps, burn-in/thinning,
trace storage, and Gelman-Rubin convergence monitoring.

Every chain is a pure function of (panel, design, config, seed, chain index):
streams are derived from the seed plus a path, chains never share state, and
they may run in separate processes with bitwise-identical results.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import conditionals, rngkit
from .conditionals import DecayParams, ModelState, Workspace, gibbs_sweep, make_workspace
from .errors import InputError, NumericalError
from .panel import DesignMatrix, OrdinalPanel


@dataclass(frozen=True)
class FitConfig:
    """Sampler configuration. Defaults: three chains, 6000 iterations with a
    2000-iteration burn-in and thinning by 2, convergence flagged at
    R-hat > 1.1."""

    n_chains: int = 3
    n_iterations: int = 6000
    burn_in: int = 2000
    thin: int = 2
    seed: int = 0
    kappa: float = 1.0
    cut_width: float = 1.0
    decay_width: float = 0.25
    max_stepouts: int = 50
    monitored: tuple[str, ...] | None = None
    t0_support: tuple[int, int] | None = None
    no_changepoint: bool = False
    snapshot_every: int = 10  # snapshot pi/U/V every k-th retained draw; 0 = never
    workers: int = 1
    rhat_threshold: float = 1.1
    stream_path: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_chains < 1:
            raise InputError(f"n_chains must be >= 1, got {self.n_chains}")
        if self.thin < 1:
            raise InputError(f"thin must be >= 1, got {self.thin}")
        if not (0 <= self.burn_in < self.n_iterations):
            raise InputError(
                f"need 0 <= burn_in < n_iterations, got {self.burn_in}, {self.n_iterations}"
            )
        if self.n_retained < 1:
            raise InputError("no retained draws: check n_iterations/burn_in/thin")
        if self.kappa <= 0:
            raise InputError(f"kappa must be positive, got {self.kappa}")
        if self.snapshot_every < 0 or self.workers < 1:
            raise InputError("snapshot_every must be >= 0 and workers >= 1")

    @property
    def n_retained(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin


def scalar_labels(design: DesignMatrix, m: int, no_changepoint: bool) -> tuple[str, ...]:
    """Trace column names, in extraction order."""
    labels = list(design.labels)
    if not no_changepoint:
        labels += [lab + "_star" for lab in design.labels]
    labels += [f"delta{j}" for j in range(2, m)]
    labels += ["phi_us", "phi_ut"]
    if not no_changepoint:
        labels += ["phi_vs", "phi_vt"]
    labels += [f"omega_{name}" for name in _varying_names(design)]
    if not no_changepoint:
        labels += [f"omega_{name}_star" for name in _varying_names(design)]
    if not no_changepoint:
        labels += ["t0"]
    return tuple(labels)


def _varying_names(design: DesignMatrix) -> list[str]:
    # varying covariate names recovered from the gamma column labels
    names = []
    for lab in design.labels:
        if lab.startswith("gamma_"):
            name = lab[len("gamma_"):].rsplit("[", 1)[0]
            if name not in names:
                names.append(name)
    return names


def extract_scalars(state: ModelState, design: DesignMatrix, m: int,
                    no_changepoint: bool) -> np.ndarray:
    parts = [state.theta]
    if not no_changepoint:
        parts.append(state.theta_star)
    parts.append(state.cuts[2:m])
    d = state.decay
    parts.append(np.array([d.phi_us, d.phi_ut]))
    if not no_changepoint:
        parts.append(np.array([d.phi_vs, d.phi_vt]))
    parts.append(d.omega_s)
    if not no_changepoint:
        parts.append(d.omega_star_s)
        parts.append(np.array([float(state.t0)]))
    return np.concatenate(parts)


def default_monitored(labels: tuple[str, ...]) -> tuple[str, ...]:
    """Everything except the per-location coefficient fields (weakly
    identified nuisance entries; still recorded in traces)."""
    return tuple(lab for lab in labels if not lab.startswith("gamma_"))


def _effective_support(cfg: FitConfig, T: int) -> tuple[int, int]:
    if cfg.no_changepoint:
        return (T, T)
    lo, hi = cfg.t0_support if cfg.t0_support is not None else (0, T)
    if not (0 <= lo <= hi <= T):
        raise InputError(f"t0 support ({lo}, {hi}) outside 0..{T}")
    return (lo, hi)


def init_chain(panel: OrdinalPanel, design: DesignMatrix, cfg: FitConfig,
               chain_index: int, rng: np.random.Generator | None = None) -> ModelState:
    """Starting state for one chain: U = V = 0, standard-normal coefficient
    entries, cuts at 0, 1, 2, ..., decays uniform on (0, 3), t0 uniform on
    its support, latent values at their window midpoints."""
    if rng is None:
        rng = rngkit.stream_rng(cfg.seed, *cfg.stream_path, chain_index)
    grid = panel.grid
    k = design.X.shape[1]
    m = panel.m
    theta = rng.standard_normal(k)
    theta_star = rng.standard_normal(k)
    cuts = np.concatenate([[-np.inf], np.arange(m - 1, dtype=float), [np.inf]])

    def _open_uniform() -> float:
        v = float(rng.uniform(0.0, 3.0))
        while v == 0.0:
            v = float(rng.uniform(0.0, 3.0))
        return v

    H = design.H
    decay = DecayParams(
        phi_us=_open_uniform(),
        phi_ut=_open_uniform(),
        phi_vs=_open_uniform(),
        phi_vt=_open_uniform(),
        omega_s=np.array([_open_uniform() for _ in range(H)]),
        omega_star_s=np.array([_open_uniform() for _ in range(H)]),
    )
    lo, hi = _effective_support(cfg, grid.T)
    t0 = int(rng.integers(lo, hi + 1))
    lower = cuts[panel.y - 1]
    upper = cuts[panel.y]
    pi = np.where(
        np.isneginf(lower), upper - 1.0,
        np.where(np.isposinf(upper), lower + 1.0, 0.5 * (lower + upper)),
    )
    return ModelState(pi=pi, U=np.zeros((grid.n, grid.T)), V=np.zeros((grid.n, grid.T)),
                      theta=theta, theta_star=theta_star, cuts=cuts, decay=decay,
                      t0=t0, kappa=cfg.kappa)


@dataclass
class ChainResult:
    index: int
    scalars: np.ndarray | None = None   # (R, P)
    loglik: np.ndarray | None = None    # (R,)
    snapshots: dict | None = None
    error: str | None = None


def run_chain(panel: OrdinalPanel, design: DesignMatrix, cfg: FitConfig,
              chain_index: int) -> ChainResult:
    """Run one chain end to end; numerical failures abort the chain and are
    reported rather than raised."""
    from .selection import observed_likelihood  # deferred: selection imports gibbs

    ws = make_workspace(panel, design, cfg.cut_width, cfg.decay_width, cfg.max_stepouts)
    rng = rngkit.stream_rng(cfg.seed, *cfg.stream_path, chain_index)
    state = init_chain(panel, design, cfg, chain_index, rng=rng)
    support = _effective_support(cfg, ws.T)
    labels = scalar_labels(design, panel.m, cfg.no_changepoint)
    R = cfg.n_retained
    scalars = np.empty((R, len(labels)))
    loglik = np.empty(R)
    snaps = {"retained_index": [], "pi": [], "U": [], "V": []}
    r = 0
    try:
        for it in range(1, cfg.n_iterations + 1):
            gibbs_sweep(state, ws, rng, support)
            if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                scalars[r] = extract_scalars(state, design, panel.m, cfg.no_changepoint)
                loglik[r] = observed_likelihood(state, ws)
                if cfg.snapshot_every and r % cfg.snapshot_every == 0:
                    snaps["retained_index"].append(r)
                    snaps["pi"].append(state.pi.copy())
                    snaps["U"].append(state.U.copy())
                    snaps["V"].append(state.V.copy())
                r += 1
    except NumericalError as exc:
        return ChainResult(index=chain_index, error=str(exc))
    snapshots = {
        "retained_index": np.array(snaps["retained_index"], dtype=int),
        "pi": np.array(snaps["pi"]),
        "U": np.array(snaps["U"]),
        "V": np.array(snaps["V"]),
    }
    return ChainResult(index=chain_index, scalars=scalars, loglik=loglik,
                       snapshots=snapshots)


def _chain_worker(args):
    return run_chain(*args)


@dataclass
class TraceStore:
    """Retained posterior draws for all chains, addressable by parameter
    name, plus per-draw observed-data log-likelihoods and R-hat metadata."""

    labels: tuple[str, ...]
    chains: np.ndarray          # (C, R, P)
    loglik: np.ndarray          # (C, R)
    chain_indices: tuple[int, ...]
    snapshots: tuple            # one snapshot dict per surviving chain
    rhat: dict
    meta: dict

    @property
    def n_chains(self) -> int:
        return self.chains.shape[0]

    @property
    def n_retained(self) -> int:
        return self.chains.shape[1]

    def get(self, label: str) -> np.ndarray:
        if label == "loglik":
            return self.loglik
        try:
            j = self.labels.index(label)
        except ValueError:
            raise InputError(f"no trace column named {label!r}") from None
        return self.chains[:, :, j]

    def pooled(self, label: str) -> np.ndarray:
        return self.get(label).reshape(-1)

    def t0_mode(self) -> int:
        draws = self.pooled("t0").astype(int)
        return int(np.bincount(draws).argmax())

    def summary(self) -> dict:
        params = {}
        for j, lab in enumerate(self.labels):
            pooled = self.chains[:, :, j].reshape(-1)
            params[lab] = {
                "mean": float(np.mean(pooled)),
                "sd": float(np.std(pooled, ddof=1)) if pooled.size > 1 else 0.0,
                "q2.5": float(np.quantile(pooled, 0.025)),
                "q97.5": float(np.quantile(pooled, 0.975)),
                "rhat": self.rhat.get(lab),
            }
        return {
            "parameters": params,
            "converged": self.meta.get("converged"),
            "undefined_rhat": self.meta.get("undefined_rhat", []),
            "n_chains": self.n_chains,
            "n_retained": self.n_retained,
            "seed": self.meta.get("seed"),
            "chain_errors": self.meta.get("chain_errors", {}),
        }

    def write_traces(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for c, chain_idx in enumerate(self.chain_indices):
            path = out_dir / f"traces_chain{chain_idx}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["draw", *self.labels, "loglik"])
                for r in range(self.n_retained):
                    row = [r]
                    row += [np.format_float_scientific(v, precision=17)
                            for v in self.chains[c, r]]
                    row.append(np.format_float_scientific(self.loglik[c, r], precision=17))
                    w.writerow(row)
            paths.append(path)
        return paths

    def write_summary(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def gelman_rubin(chains, split: bool = False):
    """Potential scale reduction factor.

    `chains` is (C, R) for one parameter (returns a float) or (C, R, P)
    (returns a length-P array). Needs >= 2 chains and >= 10 retained draws.
    Zero within-chain variance gives NaN (undefined), not a failure.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim == 2:
        return float(gelman_rubin(x[:, :, None], split=split)[0])
    if x.ndim != 3:
        raise InputError("chains must be (C, R) or (C, R, P)")
    if split:
        C, R, P = x.shape
        half = R // 2
        x = np.concatenate([x[:, :half], x[:, R - half:]], axis=0)
    C, R, P = x.shape
    if C < 2 or R < 10:
        raise InputError(f"need >= 2 chains of >= 10 draws, got {C} x {R}")
    within = np.mean(np.var(x, axis=1, ddof=1), axis=0)
    means = np.mean(x, axis=1)
    b_over_n = np.var(means, axis=0, ddof=1)
    out = np.full(P, np.nan)
    ok = within > 0
    var_plus = (R - 1) / R * within[ok] + b_over_n[ok]
    out[ok] = np.sqrt(var_plus / within[ok])
    return out


def run_chains(panel: OrdinalPanel, design: DesignMatrix, cfg: FitConfig) -> TraceStore:
    """Run all chains, merge traces, and attach convergence diagnostics.

    A numerical failure aborts only the offending chain; the fit returns as
    long as at least one chain survives (flagged in the metadata).
    """
    labels = scalar_labels(design, panel.m, cfg.no_changepoint)
    args = [(panel, design, cfg, c) for c in range(cfg.n_chains)]
    if cfg.workers > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.n_chains)) as pool:
            results = list(pool.map(_chain_worker, args))
    else:
        results = [run_chain(*a) for a in args]
    errors = {r.index: r.error for r in results if r.error is not None}
    survivors = [r for r in results if r.error is None]
    if not survivors:
        raise NumericalError(f"all {cfg.n_chains} chains failed: {errors}")
    chains = np.stack([r.scalars for r in survivors])
    loglik = np.stack([r.loglik for r in survivors])
    monitored = cfg.monitored if cfg.monitored is not None else default_monitored(labels)
    unknown = [lab for lab in monitored if lab not in labels]
    if unknown:
        raise InputError(f"monitored parameters not in traces: {unknown}")
    rhat: dict = {}
    undefined: list[str] = []
    if chains.shape[0] >= 2 and chains.shape[1] >= 10:
        cols = [labels.index(lab) for lab in monitored]
        values = gelman_rubin(chains[:, :, cols])
        for lab, v in zip(monitored, values):
            if np.isnan(v):
                rhat[lab] = None
                undefined.append(lab)
            else:
                rhat[lab] = float(v)
    defined = [v for v in rhat.values() if v is not None]
    converged = bool(defined) and all(v <= cfg.rhat_threshold for v in defined)
    meta = {
        "seed": cfg.seed,
        "stream_path": list(cfg.stream_path),
        "no_changepoint": cfg.no_changepoint,
        "monitored": list(monitored),
        "converged": converged,
        "undefined_rhat": undefined,
        "chain_errors": errors,
        "rhat_threshold": cfg.rhat_threshold,
    }
    return TraceStore(
        labels=labels,
        chains=chains,
        loglik=loglik,
        chain_indices=tuple(r.index for r in survivors),
        snapshots=tuple(r.snapshots for r in survivors),
        rhat=rhat,
        meta=meta,
    )
