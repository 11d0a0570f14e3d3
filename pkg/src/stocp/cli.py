"""Command-line surface: ingest, fit, segment, simulate, diagnose, bf, and
corr-surface subcommands.

Exit codes: 0 success, 1 usage, 2 input validation, 3 numerical failure.
Errors print one machine-parsable line on stderr: `error: <kind>: <message>`.
All outputs are byte-reproducible given identical inputs and seed;
wall-clock timestamps live only in run_manifest.json.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import click
import numpy as np

from . import __version__, covkernel, panel as panel_mod, selection, simulate as sim_mod
from .errors import InputError, NumericalError
from .gibbs import FitConfig, run_chains
from .panel import assemble_design, standardize
from .selection import (
    bayes_factor,
    binary_segment,
    fit_nochange,
    format_week,
    harmonic_mean_marginal,
    harmonic_mean_mcse,
    week_to_date,
)

logger = logging.getLogger("stocp")

_FIT_INT_KEYS = {"n_chains", "n_iterations", "burn_in", "thin", "seed",
                 "max_stepouts", "snapshot_every", "workers"}
_FIT_FLOAT_KEYS = {"kappa", "cut_width", "decay_width", "rhat_threshold"}
_PATH_KEYS = {"locations", "cases", "deaths", "vaccinations", "panel"}
_OTHER_KEYS = {"m", "fixed_covariates", "varying_covariates", "origin_date",
               "out", "t0_min", "t0_max"}
_ALL_KEYS = _FIT_INT_KEYS | _FIT_FLOAT_KEYS | _PATH_KEYS | _OTHER_KEYS


@dataclass
class RunConfig:
    """Parsed flat key-value run configuration."""

    locations: Path | None = None
    cases: Path | None = None
    deaths: Path | None = None
    vaccinations: Path | None = None
    panel: Path | None = None
    m: int = 4
    fixed_covariates: tuple[str, ...] = ("death",)
    varying_covariates: tuple[str, ...] = ("vaccination",)
    origin_date: _dt.date | None = None
    out: Path = Path("out")
    fit: FitConfig = field(default_factory=FitConfig)
    source: Path | None = None


def load_config(path) -> RunConfig:
    """Parse a flat `key = value` config file; unknown keys are errors and
    every FitConfig default is overridable."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: config file not found")
    raw: dict[str, str] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise InputError(f"{path}:{line_no}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _ALL_KEYS:
                raise InputError(f"{path}:{line_no}: unknown key {key!r}")
            if key in raw:
                raise InputError(f"{path}:{line_no}: duplicate key {key!r}")
            raw[key] = value

    def _int(key: str) -> int:
        try:
            return int(raw[key])
        except ValueError:
            raise InputError(f"{path}: key {key!r}: not an integer: {raw[key]!r}") from None

    def _float(key: str) -> float:
        try:
            return float(raw[key])
        except ValueError:
            raise InputError(f"{path}: key {key!r}: not a number: {raw[key]!r}") from None

    fit_kwargs = {}
    for key in _FIT_INT_KEYS & raw.keys():
        fit_kwargs[key] = _int(key)
    for key in _FIT_FLOAT_KEYS & raw.keys():
        fit_kwargs[key] = _float(key)
    if "t0_min" in raw or "t0_max" in raw:
        if not ("t0_min" in raw and "t0_max" in raw):
            raise InputError(f"{path}: t0_min and t0_max must be given together")
        fit_kwargs["t0_support"] = (_int("t0_min"), _int("t0_max"))
    try:
        fit = FitConfig(**fit_kwargs)
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from None

    cfg = RunConfig(fit=fit, source=path)
    for key in _PATH_KEYS & raw.keys():
        p = (path.parent / raw[key]).resolve() if not Path(raw[key]).is_absolute() else Path(raw[key])
        if not p.exists():
            raise InputError(f"{path}: key {key!r}: referenced file {p} does not exist")
        setattr(cfg, key, p)
    if "m" in raw:
        cfg.m = _int("m")
    for key, attr in (("fixed_covariates", "fixed_covariates"),
                      ("varying_covariates", "varying_covariates")):
        if key in raw:
            names = tuple(s.strip() for s in raw[key].split(",") if s.strip())
            setattr(cfg, attr, names)
    if "origin_date" in raw:
        try:
            cfg.origin_date = _dt.date.fromisoformat(raw["origin_date"])
        except ValueError:
            raise InputError(f"{path}: key 'origin_date': not an ISO date: "
                             f"{raw['origin_date']!r}") from None
    if "out" in raw:
        cfg.out = Path(raw["out"])
    return cfg


def _load_dataset(cfg: RunConfig):
    """Panel + standardized covariates from either the .npz artifact or the
    CSV quartet."""
    if cfg.panel is not None:
        pnl, cov = panel_mod.load_panel_npz(cfg.panel)
        if cov is None:
            raise InputError(f"{cfg.panel}: artifact has no covariates; re-run ingest")
        if not cov.standardized:
            cov = standardize(cov)
        return pnl, cov
    if cfg.locations is None or cfg.cases is None:
        raise InputError("config must give either 'panel' or 'locations' + 'cases'")
    pnl = panel_mod.build_panel(cfg.locations, cfg.cases, m=cfg.m)
    cov = panel_mod.build_covariates(
        pnl.grid,
        deaths_path=cfg.deaths,
        vaccinations_path=cfg.vaccinations,
        fixed=cfg.fixed_covariates,
        varying=cfg.varying_covariates,
    )
    return pnl, standardize(cov)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, cfg: RunConfig | None, extra: dict | None = None) -> None:
    manifest = {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "versions": {
            "stocp": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    import scipy
    manifest["versions"]["scipy"] = scipy.__version__
    if cfg is not None:
        inputs = {}
        for key in ("locations", "cases", "deaths", "vaccinations", "panel"):
            p = getattr(cfg, key)
            if p is not None:
                inputs[key] = {"path": str(p), "sha256": _sha256(p)}
        manifest["inputs"] = inputs
        manifest["seed"] = cfg.fit.seed
        manifest["config"] = {
            "m": cfg.m,
            "fixed_covariates": list(cfg.fixed_covariates),
            "varying_covariates": list(cfg.varying_covariates),
            "origin_date": cfg.origin_date.isoformat() if cfg.origin_date else None,
            "fit": {f.name: _jsonable(getattr(cfg.fit, f.name)) for f in fields(FitConfig)},
        }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _apply_overrides(cfg: RunConfig, seed, chains, iters, burnin, thin, workers, out) -> RunConfig:
    fit_over = {}
    if seed is not None:
        fit_over["seed"] = seed
    if chains is not None:
        fit_over["n_chains"] = chains
    if iters is not None:
        fit_over["n_iterations"] = iters
    if burnin is not None:
        fit_over["burn_in"] = burnin
    if thin is not None:
        fit_over["thin"] = thin
    if workers is not None:
        fit_over["workers"] = workers
    if fit_over:
        cfg.fit = replace(cfg.fit, **fit_over)
    if out is not None:
        cfg.out = Path(out)
    return cfg


_shared_options = [
    click.option("--config", "config_path", required=True, type=click.Path(), help="run config file"),
    click.option("--seed", type=int, default=None),
    click.option("--chains", type=int, default=None),
    click.option("--iters", type=int, default=None),
    click.option("--burnin", type=int, default=None),
    click.option("--thin", type=int, default=None),
    click.option("--workers", type=int, default=None),
    click.option("--out", type=click.Path(), default=None),
]


def _with_shared(fn):
    for opt in reversed(_shared_options):
        fn = opt(fn)
    return fn


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="log progress to stderr")
def cli(verbose):
    """Changepoint detection for spatio-temporal ordered-categorical panels."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@_with_shared
def ingest(config_path, seed, chains, iters, burnin, thin, workers, out):
    """Build and validate the panel; write the columnar panel artifact."""
    cfg = _apply_overrides(load_config(config_path), seed, chains, iters, burnin, thin, workers, out)
    pnl, cov = _load_dataset(cfg)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    panel_mod.save_panel_npz(out_dir / "panel.npz", pnl, cov)
    _write_manifest(out_dir, cfg)
    click.echo(f"panel: {pnl.grid.n} locations x {pnl.grid.T} weeks, m={pnl.m}, "
               f"covariates fixed={list(cov.fixed_names)} varying={list(cov.varying_names)}")
    click.echo(f"wrote {out_dir / 'panel.npz'}")


def _summarize_fit(store, cfg: RunConfig, no_changepoint: bool) -> dict:
    summary = store.summary()
    pooled_ll = store.loglik.reshape(-1)
    summary["log_marginal_likelihood"] = harmonic_mean_marginal(pooled_ll)
    summary["log_marginal_likelihood_mcse"] = harmonic_mean_mcse(pooled_ll)
    summary["no_changepoint"] = no_changepoint
    if not no_changepoint:
        draws = store.pooled("t0").astype(int)
        mode = int(np.bincount(draws).argmax())
        t0_info = {
            "mode": mode,
            "mode_label": format_week(mode) if mode >= 1 else "no changepoint",
            "q2.5": int(np.quantile(draws, 0.025)),
            "q97.5": int(np.quantile(draws, 0.975)),
        }
        if cfg.origin_date is not None and mode >= 1:
            t0_info["date"] = week_to_date(mode, cfg.origin_date).isoformat()
        summary["changepoint"] = t0_info
    return summary


@cli.command()
@_with_shared
@click.option("--no-changepoint", is_flag=True, help="fit the no-changepoint model")
def fit(config_path, seed, chains, iters, burnin, thin, workers, out, no_changepoint):
    """Posterior sampling: traces per chain plus a JSON summary."""
    cfg = _apply_overrides(load_config(config_path), seed, chains, iters, burnin, thin, workers, out)
    pnl, cov = _load_dataset(cfg)
    design = assemble_design(pnl.grid, cov)
    out_dir = Path(cfg.out)
    if no_changepoint:
        store = fit_nochange(pnl, design, cfg.fit)
    else:
        store = run_chains(pnl, design, cfg.fit)
    store.write_traces(out_dir)
    summary = _summarize_fit(store, cfg, no_changepoint)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, cfg)
    if not summary["converged"]:
        click.echo("warning: convergence flagged (some R-hat above threshold)", err=True)
    click.echo(f"wrote {out_dir / 'summary.json'}")


@cli.command()
@_with_shared
def segment(config_path, seed, chains, iters, burnin, thin, workers, out):
    """Recursive multiple-changepoint search; writes segmentation.json."""
    cfg = _apply_overrides(load_config(config_path), seed, chains, iters, burnin, thin, workers, out)
    pnl, cov = _load_dataset(cfg)
    report = binary_segment(pnl, cov, cfg.fit, origin_date=cfg.origin_date)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "segmentation.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, cfg)
    cps = report.accepted_changepoints()
    if cps:
        click.echo("changepoints: " + ", ".join(format_week(w) for w in cps))
    else:
        click.echo("changepoints: none")
    click.echo(f"wrote {out_dir / 'segmentation.json'}")


@cli.command()
@click.option("--true-params", "tp_path", required=True, type=click.Path(),
              help="JSON file of generative parameters")
@click.option("--n", type=int, default=10, show_default=True, help="locations")
@click.option("--t", "n_weeks", type=int, default=60, show_default=True, help="weeks")
@click.option("--span-km", type=float, default=500.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def simulate(tp_path, n, n_weeks, span_km, seed, out):
    """Draw a synthetic panel; writes ingestible CSVs plus the truth bundle."""
    tp = sim_mod.load_true_params(tp_path)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    grid = sim_mod.make_jittered_grid(n, n_weeks, span_km, rng)
    pnl, truth = sim_mod.simulate_panel(tp, grid, rng)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    panel_mod.write_panel_csvs(out_dir, pnl)
    panel_mod.save_panel_npz(out_dir / "panel.npz", pnl, truth.covariates)
    np.savez(
        out_dir / "truth.npz",
        pi=truth.pi, U=truth.U, V=truth.V,
        theta=tp.theta, theta_star=tp.theta_star, cuts=tp.cuts, t0=tp.t0,
        phi_us=tp.decay.phi_us, phi_ut=tp.decay.phi_ut,
        phi_vs=tp.decay.phi_vs, phi_vt=tp.decay.phi_vt,
        omega_s=tp.decay.omega_s, omega_star_s=tp.decay.omega_star_s,
    )
    _write_manifest(out_dir, None, extra={"seed": seed, "true_params": str(tp_path)})
    click.echo(f"simulated {grid.n} locations x {grid.T} weeks -> {out_dir}")


@cli.command()
@click.option("--traces", "traces_dir", required=True, type=click.Path(),
              help="directory with traces_chain*.csv")
@click.option("--out", type=click.Path(), default=None, help="optional JSON output")
def diagnose(traces_dir, out):
    """Gelman-Rubin table from stored traces."""
    from .gibbs import gelman_rubin

    traces_dir = Path(traces_dir)
    paths = sorted(traces_dir.glob("traces_chain*.csv"))
    if len(paths) < 2:
        raise InputError(f"{traces_dir}: need at least two trace files, found {len(paths)}")
    header = None
    chains = []
    for p in paths:
        with open(p, newline="") as fh:
            reader = csv.reader(fh)
            head = next(reader)
            if header is None:
                header = head
            elif head != header:
                raise InputError(f"{p}: trace header differs from {paths[0]}")
            chains.append(np.array([[float(v) for v in row] for row in reader]))
    lengths = {c.shape[0] for c in chains}
    if len(lengths) != 1:
        raise InputError("trace files have differing lengths")
    stacked = np.stack(chains)[:, :, 1:]  # drop the draw-index column
    labels = header[1:]
    values = gelman_rubin(stacked)
    rows = []
    width = max(len(lab) for lab in labels)
    for lab, v in zip(labels, values):
        shown = "undefined" if np.isnan(v) else f"{v:.4f}"
        click.echo(f"{lab.ljust(width)}  {shown}")
        rows.append({"parameter": lab, "rhat": None if np.isnan(v) else float(v)})
    if out is not None:
        with open(out, "w") as fh:
            json.dump({"rhat": rows}, fh, indent=2, sort_keys=True)
            fh.write("\n")


@cli.command()
@click.option("--summary1", required=True, type=click.Path(),
              help="summary.json of the changepoint model")
@click.option("--summary2", required=True, type=click.Path(),
              help="summary.json of the no-changepoint model")
def bf(summary1, summary2):
    """Log Bayes factor from two fit summaries."""
    logmls = []
    for p in (summary1, summary2):
        try:
            with open(p) as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise InputError(f"{p}: file not found") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{p}: invalid JSON ({exc})") from None
        if "log_marginal_likelihood" not in obj:
            raise InputError(f"{p}: no log_marginal_likelihood field")
        logmls.append(float(obj["log_marginal_likelihood"]))
    result = bayes_factor(logmls[0], logmls[1])
    click.echo(result.describe())


@cli.command("corr-surface")
@click.option("--phi-s", type=float, default=None, help="spatial decay per km")
@click.option("--phi-t", type=float, default=None, help="temporal decay per week")
@click.option("--summary", "summary_path", type=click.Path(), default=None,
              help="read posterior-mean decays from a fit summary")
@click.option("--process", type=click.Choice(["u", "v"]), default="u", show_default=True)
@click.option("--max-km", type=float, default=500.0, show_default=True)
@click.option("--max-lag", type=int, default=12, show_default=True)
@click.option("--km-step", type=float, default=10.0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def corr_surface(phi_s, phi_t, summary_path, process, max_km, max_lag, km_step, out):
    """Correlation of the latent process over a distance x lag grid."""
    if summary_path is not None:
        with open(summary_path) as fh:
            obj = json.load(fh)
        params = obj.get("parameters", {})
        s_key, t_key = (f"phi_{process}s", f"phi_{process}t")
        if s_key not in params or t_key not in params:
            raise InputError(f"{summary_path}: no {s_key}/{t_key} in parameters")
        phi_s = params[s_key]["mean"]
        phi_t = params[t_key]["mean"]
    if phi_s is None or phi_t is None:
        raise InputError("give --phi-s and --phi-t, or --summary")
    if phi_s <= 0 or phi_t <= 0:
        raise InputError("decay parameters must be positive")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "corr_surface.csv"
    distances = np.arange(0.0, max_km + 0.5 * km_step, km_step)
    lags = np.arange(0, max_lag + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_km", "lag_weeks", "correlation"])
        for d in distances:
            for lag in lags:
                corr = covkernel.separable_correlation(phi_s, phi_t, float(d), float(lag))
                w.writerow([repr(float(d)), int(lag), repr(corr)])
    click.echo(f"wrote {path}")


def main(argv=None) -> int:
    """Console entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("error: usage: aborted", err=True)
        return 1
    except click.ClickException as exc:
        click.echo(f"error: usage: {exc.format_message()}", err=True)
        return 1
    except InputError as exc:
        click.echo(f"error: input: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"error: numerical: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
