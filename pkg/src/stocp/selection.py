"""Observed-data likelihood, harmonic-mean marginal likelihood, Bayes
factors, the no-changepoint model, and recursive binary segmentation.

Decision rule: a changepoint is decisive when the log Bayes factor of the
changepoint model over the no-changepoint model exceeds log 100. Accepted
changepoints must sit at least MIN_SEGMENT_WEEKS from both segment ends, and
segments of RECURSE_FLOOR_WEEKS or fewer weeks are never fitted.
"""

from __future__ import annotations

import datetime as _dt
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from . import rngkit
from .conditionals import ModelState, Workspace, latent_mean, make_workspace
from .errors import InputError, NumericalError, StocpError
from .gibbs import FitConfig, TraceStore, run_chains
from .panel import (
    CovariatePanel,
    OrdinalPanel,
    SpaceTimeGrid,
    assemble_design,
)

logger = logging.getLogger("stocp")

LOG_DECISIVE = math.log(100.0)
MIN_SEGMENT_WEEKS = 12   # accepted changepoints keep every regime this long
RECURSE_FLOOR_WEEKS = 24  # segments with <= this many weeks are not fitted
MIN_HARMONIC_DRAWS = 100


def observed_likelihood(state: ModelState, ws: Workspace) -> float:
    """Log probability of the observed categories given the regression
    coefficients and process fields, with only the unit white noise
    marginalized: sum of log[Phi(cut_y - m_i) - Phi(cut_{y-1} - m_i)]."""
    y = ws.panel.y
    mean = latent_mean(state, ws)
    terms = rngkit.log_ndtr_diff(state.cuts[y - 1] - mean, state.cuts[y] - mean)
    total = float(np.sum(terms))
    if not np.isfinite(total):
        raise NumericalError("observed-data log-likelihood is not finite")
    return total


def category_log_probs(state: ModelState, ws: Workspace) -> np.ndarray:
    """(M, m) matrix of per-slot log category probabilities; each row's
    probabilities sum to one."""
    mean = latent_mean(state, ws)
    m = ws.panel.m
    out = np.empty((mean.shape[0], m))
    for j in range(1, m + 1):
        out[:, j - 1] = rngkit.log_ndtr_diff(state.cuts[j - 1] - mean, state.cuts[j] - mean)
    return out


def harmonic_mean_marginal(loglik_trace: np.ndarray) -> float:
    """Harmonic-mean estimate of the log marginal likelihood from retained
    per-draw log-likelihoods: -(logsumexp(-l) - log m)."""
    ll = np.asarray(loglik_trace, dtype=float).reshape(-1)
    if ll.size == 0:
        raise InputError("empty log-likelihood trace")
    if ll.size < MIN_HARMONIC_DRAWS:
        raise InputError(
            f"harmonic-mean estimator needs >= {MIN_HARMONIC_DRAWS} draws, got {ll.size}"
        )
    return float(-(logsumexp(-ll) - np.log(ll.size)))


def harmonic_mean_mcse(loglik_trace: np.ndarray, n_batches: int = 20) -> float:
    """Batch-means Monte-Carlo standard error of the harmonic-mean log
    marginal likelihood (the estimator is high-variance; borderline verdicts
    should be read with this in hand)."""
    ll = np.asarray(loglik_trace, dtype=float).reshape(-1)
    if ll.size < 2 * n_batches:
        n_batches = max(2, ll.size // 2)
    size = ll.size // n_batches
    ests = [
        float(-(logsumexp(-ll[b * size:(b + 1) * size]) - np.log(size)))
        for b in range(n_batches)
    ]
    return float(np.std(ests, ddof=1) / np.sqrt(n_batches))


def fit_nochange(panel: OrdinalPanel, design, cfg: FitConfig) -> TraceStore:
    """Fit the no-changepoint model: t0 pinned at T with the post-regime
    block (theta*, V, and their decays) frozen; traces carry no starred,
    V-process, or t0 columns."""
    return run_chains(panel, design, replace(cfg, no_changepoint=True))


@dataclass(frozen=True)
class BayesFactor:
    log_bf: float
    decisive: bool

    def describe(self) -> str:
        tag = "decisive" if self.decisive else "not decisive"
        return f"log BF: {_fmt_number(self.log_bf)}, {tag}"


def _fmt_number(x: float) -> str:
    return str(int(round(x))) if abs(x - round(x)) < 5e-7 else f"{x:.2f}"


def bayes_factor(logml_1: float, logml_2: float) -> BayesFactor:
    """Log Bayes factor of model 1 over model 2 and the decisiveness verdict
    at the log-100 cutoff."""
    if not (np.isfinite(logml_1) and np.isfinite(logml_2)):
        raise InputError("log marginal likelihoods must be finite")
    log_bf = float(logml_1 - logml_2)
    return BayesFactor(log_bf=log_bf, decisive=log_bf > LOG_DECISIVE)


# ---------------------------------------------------------------------------
# Week formatting
# ---------------------------------------------------------------------------

def format_week(week: int) -> str:
    """1 -> '1st week', 57 -> '57th week'."""
    if 10 <= week % 100 <= 20:
        suffix = "th"
    else:
        suffix = {1: "st", 2: "nd", 3: "rd"}.get(week % 10, "th")
    return f"{week}{suffix} week"


def week_to_date(week: int, origin: _dt.date) -> _dt.date:
    """Calendar date of a 1-based week index, with `origin` the date of
    week 1."""
    return origin + _dt.timedelta(weeks=week - 1)


# ---------------------------------------------------------------------------
# Segment slicing
# ---------------------------------------------------------------------------

def slice_weeks(panel: OrdinalPanel, covariates: CovariatePanel, lo: int, hi: int):
    """Restrict the panel and covariates to global weeks lo..hi (1-based,
    inclusive). Covariate columns constant within the window are dropped
    with a logged notice. Categories are compressed to the observed set so
    every free cut keeps a proper conditional."""
    grid = panel.grid
    if not (1 <= lo <= hi <= grid.T):
        raise InputError(f"week range {lo}..{hi} outside 1..{grid.T}")
    n = grid.n
    rows = slice((lo - 1) * n, hi * n)
    sub_grid = SpaceTimeGrid(ids=grid.ids, lat=grid.lat, lon=grid.lon, T=hi - lo + 1)

    y = panel.y[rows]
    observed = np.unique(y)
    remap = {int(c): r + 1 for r, c in enumerate(observed)}
    y_compressed = np.array([remap[int(c)] for c in y], dtype=np.int64)
    sub_panel = OrdinalPanel(grid=sub_grid, y=y_compressed, m=len(observed))

    dropped: list[str] = []

    def _keep(block: np.ndarray, names):
        keep_cols, keep_names = [], []
        for j, name in enumerate(names):
            col = block[rows, j]
            if np.ptp(col) < 1e-12:
                dropped.append(name)
            else:
                keep_cols.append(col)
                keep_names.append(name)
        if keep_cols:
            return np.column_stack(keep_cols), tuple(keep_names)
        return np.empty((sub_grid.M, 0)), ()

    fixed, fixed_names = _keep(covariates.fixed, covariates.fixed_names)
    varying, varying_names = _keep(covariates.varying, covariates.varying_names)
    if dropped:
        logger.info("weeks %d..%d: dropped constant covariates %s", lo, hi, dropped)
    sub_cov = CovariatePanel(
        fixed_names=fixed_names, fixed=fixed,
        varying_names=varying_names, varying=varying,
        standardized=covariates.standardized, stats=covariates.stats,
    )
    return sub_panel, sub_cov, dropped, remap


# ---------------------------------------------------------------------------
# Binary segmentation
# ---------------------------------------------------------------------------

@dataclass
class SegmentFit:
    """Outcome of fitting the changepoint and no-changepoint models on one
    segment; t0 quantities are local (0..T_segment)."""

    t0_mode: int
    t0_q2_5: int
    t0_q97_5: int
    log_ml_change: float
    log_ml_nochange: float
    log_ml_mcse: float = float("nan")
    converged: bool | None = None


@dataclass
class SegmentNode:
    lo: int
    hi: int
    stage: int
    verdict: str | None = None  # accepted | rejected | insufficient-data |
                                # too-close-to-endpoint | failed
    changepoint_week: int | None = None
    changepoint_interval: tuple[int, int] | None = None
    log_bf: float | None = None
    log_ml_change: float | None = None
    log_ml_nochange: float | None = None
    log_ml_mcse: float | None = None
    notes: list = field(default_factory=list)
    dropped_covariates: list = field(default_factory=list)
    error: str | None = None
    children: list = field(default_factory=list)

    @property
    def weeks(self) -> int:
        return self.hi - self.lo + 1


@dataclass
class SegmentationReport:
    """Recursion tree of the binary-segmentation procedure."""

    root: SegmentNode
    origin_date: _dt.date | None = None

    def nodes(self) -> list[SegmentNode]:
        out, queue = [], [self.root]
        while queue:
            node = queue.pop(0)
            out.append(node)
            queue.extend(node.children)
        return out

    def accepted_changepoints(self) -> list[int]:
        return sorted(n.changepoint_week for n in self.nodes() if n.verdict == "accepted")

    def final_regimes(self) -> list[tuple[int, int]]:
        return sorted((n.lo, n.hi) for n in self.nodes() if not n.children)

    def to_dict(self) -> dict:
        rows = []
        for node in sorted(self.nodes(), key=lambda s: (s.stage, s.lo)):
            row = {
                "stage": node.stage,
                "lo": node.lo,
                "hi": node.hi,
                "time_horizon": f"{format_week(node.lo)} to {format_week(node.hi)}".replace(
                    " week to", " to"),
                "verdict": node.verdict,
                "log_bayes_factor": node.log_bf,
                "log_ml_change": node.log_ml_change,
                "log_ml_nochange": node.log_ml_nochange,
                "log_ml_mcse": node.log_ml_mcse,
                "notes": node.notes,
                "dropped_covariates": node.dropped_covariates,
                "error": node.error,
            }
            if node.changepoint_week is not None:
                row["changepoint_week"] = node.changepoint_week
                row["changepoint"] = format_week(node.changepoint_week)
                if node.changepoint_interval is not None:
                    row["changepoint_interval"] = list(node.changepoint_interval)
                if self.origin_date is not None:
                    row["date"] = week_to_date(node.changepoint_week, self.origin_date).isoformat()
            rows.append(row)
        return {
            "segments": rows,
            "changepoints": self.accepted_changepoints(),
            "final_regimes": [list(r) for r in self.final_regimes()],
        }


def _gibbs_segment_fitter(sub_panel: OrdinalPanel, sub_cov: CovariatePanel,
                          cfg: FitConfig, path: tuple[int, ...]) -> SegmentFit:
    """Default fitter: full Gibbs runs of both models with path-derived
    streams, harmonic-mean marginal likelihoods, and the pooled t0 mode."""
    design = assemble_design(sub_panel.grid, sub_cov)
    cfg_change = replace(cfg, stream_path=cfg.stream_path + path + (0,),
                         no_changepoint=False)
    cfg_nochange = replace(cfg, stream_path=cfg.stream_path + path + (1,),
                           no_changepoint=True)
    ts1 = run_chains(sub_panel, design, cfg_change)
    ts2 = run_chains(sub_panel, design, cfg_nochange)
    t0_draws = ts1.pooled("t0").astype(int)
    return SegmentFit(
        t0_mode=int(np.bincount(t0_draws).argmax()),
        t0_q2_5=int(np.quantile(t0_draws, 0.025)),
        t0_q97_5=int(np.quantile(t0_draws, 0.975)),
        log_ml_change=harmonic_mean_marginal(ts1.loglik),
        log_ml_nochange=harmonic_mean_marginal(ts2.loglik),
        log_ml_mcse=harmonic_mean_mcse(ts1.loglik),
        converged=bool(ts1.meta.get("converged")) and bool(ts2.meta.get("converged")),
    )


def binary_segment(panel: OrdinalPanel, covariates: CovariatePanel, cfg: FitConfig,
                   fitter=None, origin_date: _dt.date | None = None) -> SegmentationReport:
    """Recursive changepoint search.

    Each segment longer than RECURSE_FLOOR_WEEKS weeks gets both model fits;
    a split happens only when the Bayes factor is decisive and the fitted
    changepoint keeps both sides at least MIN_SEGMENT_WEEKS long. The BF test
    is evaluated first; when the endpoint guard would also have fired, both
    reasons are recorded.
    """
    if panel.grid.T <= RECURSE_FLOOR_WEEKS:
        raise InputError(
            f"segmentation needs more than {RECURSE_FLOOR_WEEKS} weeks, got {panel.grid.T}"
        )
    if not covariates.standardized:
        raise InputError("covariates must be standardized before segmentation")
    fit_fn = fitter if fitter is not None else _gibbs_segment_fitter

    def visit(lo: int, hi: int, stage: int, path: tuple[int, ...]) -> SegmentNode:
        node = SegmentNode(lo=lo, hi=hi, stage=stage)
        if node.weeks <= RECURSE_FLOOR_WEEKS:
            node.verdict = "insufficient-data"
            return node
        try:
            sub_panel, sub_cov, dropped, _ = slice_weeks(panel, covariates, lo, hi)
            node.dropped_covariates = dropped
            fit = fit_fn(sub_panel, sub_cov, cfg, path)
        except StocpError as exc:
            node.verdict = "failed"
            node.error = str(exc)
            logger.warning("segment %d..%d failed: %s", lo, hi, exc)
            return node
        bf = bayes_factor(fit.log_ml_change, fit.log_ml_nochange)
        node.log_bf = bf.log_bf
        node.log_ml_change = fit.log_ml_change
        node.log_ml_nochange = fit.log_ml_nochange
        node.log_ml_mcse = fit.log_ml_mcse
        if fit.converged is False:
            node.notes.append("convergence flagged (R-hat above threshold)")
        t0 = fit.t0_mode
        guard_ok = (t0 >= MIN_SEGMENT_WEEKS) and (node.weeks - t0 >= MIN_SEGMENT_WEEKS)
        if 1 <= t0 <= node.weeks:
            node.changepoint_week = lo + t0 - 1
            node.changepoint_interval = (
                lo + fit.t0_q2_5 - 1, lo + fit.t0_q97_5 - 1)
        if not bf.decisive:
            node.verdict = "rejected"
            if not guard_ok:
                node.notes.append("changepoint also too close to an endpoint")
            return node
        if not guard_ok:
            node.verdict = "too-close-to-endpoint"
            return node
        node.verdict = "accepted"
        split = lo + t0 - 1
        node.children.append(visit(lo, split, stage + 1, path + (0,)))
        node.children.append(visit(split + 1, hi, stage + 1, path + (1,)))
        return node

    root = visit(1, panel.grid.T, 1, ())
    return SegmentationReport(root=root, origin_date=origin_date)
