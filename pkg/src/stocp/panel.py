"""Data model for spatio-temporal ordered-categorical panels.

A panel holds observations y(s_i, t) in {1..m} for n locations and T weekly
time points. Vectors of length M = n*T are arranged time-major: the entry for
(location i, time t), both 1-based, sits at index m = (t-1)*n + i. Within a
time block, locations appear in grid order.

This module owns ingestion from the CSV interfaces, category construction
from weekly case rates, covariate transforms, standardization, and assembly
of the regression design matrix (intercept, fixed-effect columns, and one
n-column block per spatially varying covariate).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError

# CDC-style transmission levels: weekly new cases per 100,000 persons.
# Left-closed/right-open bands: [0,10) -> 1, [10,50) -> 2, [50,100) -> 3,
# [100, inf) -> 4.
RATE_BAND_EDGES = (10.0, 50.0, 100.0)

# Representative rate written back out for each category when exporting a
# panel to cases.csv (band midpoints; 150 for the unbounded top band).
RATE_BAND_REPRESENTATIVES = (5.0, 30.0, 75.0, 150.0)


def categorize_weekly_rate(rate: float) -> int:
    """Map a weekly new-case rate per 100k persons to a category in {1..4}."""
    if not math.isfinite(rate) or rate < 0:
        raise InputError(f"case rate must be a finite nonnegative number, got {rate!r}")
    for cat, edge in enumerate(RATE_BAND_EDGES, start=1):
        if rate < edge:
            return cat
    return 4


def vaccination_prevalence(cumulative_first_doses: float, population: float) -> float:
    """Proportion of the population having received a first dose."""
    if population <= 0:
        raise InputError(f"population must be positive, got {population!r}")
    if cumulative_first_doses < 0:
        raise InputError(f"dose count must be nonnegative, got {cumulative_first_doses!r}")
    return cumulative_first_doses / population


def death_covariate(prev_week_new_deaths: float) -> float:
    """Shifted log of the previous week's new deaths: log(1 + d), so 0 -> 0."""
    if prev_week_new_deaths < 0:
        raise InputError(f"death count must be nonnegative, got {prev_week_new_deaths!r}")
    return math.log1p(prev_week_new_deaths)


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Locations plus a 1-based contiguous weekly time axis.

    ids, lat, lon are aligned; the position of a location in `ids` is its
    vector index within each time block.
    """

    ids: tuple[str, ...]
    lat: np.ndarray
    lon: np.ndarray
    T: int

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=float)
        lon = np.asarray(self.lon, dtype=float)
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        if len(self.ids) == 0:
            raise InputError("grid needs at least one location")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("location ids must be unique")
        if lat.shape != (len(self.ids),) or lon.shape != (len(self.ids),):
            raise InputError("lat/lon must align with location ids")
        if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
            raise InputError("latitudes must be in [-90, 90] and longitudes in [-180, 180]")
        if self.T < 1:
            raise InputError(f"time axis needs T >= 1, got {self.T}")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def M(self) -> int:
        return self.n * self.T

    def vector_index(self, i: int, t: int) -> int:
        """Flat index of (location i, week t), both 1-based."""
        if not (1 <= i <= self.n and 1 <= t <= self.T):
            raise InputError(f"(i={i}, t={t}) outside grid ({self.n} locations, {self.T} weeks)")
        return (t - 1) * self.n + (i - 1)


def to_vector(mat: np.ndarray) -> np.ndarray:
    """Flatten an (n, T) field to the M-vector (time-major, locations fastest)."""
    return np.asarray(mat).ravel(order="F")


def to_matrix(vec: np.ndarray, n: int, T: int) -> np.ndarray:
    """Inverse of to_vector: reshape an M-vector to the (n, T) field."""
    vec = np.asarray(vec)
    if vec.shape != (n * T,):
        raise InputError(f"expected vector of length {n * T}, got shape {vec.shape}")
    return vec.reshape((n, T), order="F")


@dataclass(frozen=True)
class OrdinalPanel:
    """Observed categories on a grid: y is the M-vector in {1..m}."""

    grid: SpaceTimeGrid
    y: np.ndarray
    m: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64)
        object.__setattr__(self, "y", y)
        if self.m < 2:
            raise InputError(f"need at least two categories, got m={self.m}")
        if y.shape != (self.grid.M,):
            raise InputError(f"y must have length M={self.grid.M}, got shape {y.shape}")
        if y.min() < 1 or y.max() > self.m:
            raise InputError(f"categories must lie in 1..{self.m}")
        if np.unique(y).size < 2:
            raise InputError("panel is degenerate: fewer than two distinct categories observed")

    @property
    def y_matrix(self) -> np.ndarray:
        return to_matrix(self.y, self.grid.n, self.grid.T)


@dataclass(frozen=True)
class CovariatePanel:
    """Covariate columns over the panel, split into fixed-effect and
    spatially-varying-effect groups. All columns are M-vectors."""

    fixed_names: tuple[str, ...]
    fixed: np.ndarray  # (M, G)
    varying_names: tuple[str, ...]
    varying: np.ndarray  # (M, H)
    standardized: bool = False
    # population mean/sd of each column before standardization, for reporting
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        fixed = np.asarray(self.fixed, dtype=float)
        varying = np.asarray(self.varying, dtype=float)
        if fixed.ndim != 2 or varying.ndim != 2:
            raise InputError("covariate blocks must be 2-D (M, count) arrays")
        if fixed.shape[1] != len(self.fixed_names):
            raise InputError("fixed column count does not match names")
        if varying.shape[1] != len(self.varying_names):
            raise InputError("varying column count does not match names")
        if fixed.shape[1] and varying.shape[1] and fixed.shape[0] != varying.shape[0]:
            raise InputError("fixed and varying blocks disagree on M")
        names = self.fixed_names + self.varying_names
        if len(set(names)) != len(names):
            raise InputError("covariate names must be unique")
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "varying", varying)

    @property
    def G(self) -> int:
        return self.fixed.shape[1]

    @property
    def H(self) -> int:
        return self.varying.shape[1]

    @property
    def M(self) -> int:
        if self.G:
            return self.fixed.shape[0]
        return self.varying.shape[0]

    def column(self, name: str) -> np.ndarray:
        if name in self.fixed_names:
            return self.fixed[:, self.fixed_names.index(name)]
        if name in self.varying_names:
            return self.varying[:, self.varying_names.index(name)]
        raise InputError(f"no covariate named {name!r}")


def standardize(panel: CovariatePanel) -> CovariatePanel:
    """Z-score every covariate column over all M entries (sample sd, ddof=1).

    The original means/sds are kept in `.stats` for reporting. A constant
    column cannot be scaled and is an input error naming the column.
    """
    stats = {}

    def _scale(block: np.ndarray, names: tuple[str, ...]) -> np.ndarray:
        out = np.empty_like(block)
        for j, name in enumerate(names):
            col = block[:, j]
            mu = float(np.mean(col))
            sd = float(np.std(col, ddof=1)) if col.size > 1 else 0.0
            if sd <= 0 or not math.isfinite(sd):
                raise InputError(f"covariate {name!r} is constant; cannot standardize")
            out[:, j] = (col - mu) / sd
            stats[name] = {"mean": mu, "sd": sd}
        return out

    return replace(
        panel,
        fixed=_scale(panel.fixed, panel.fixed_names),
        varying=_scale(panel.varying, panel.varying_names),
        standardized=True,
        stats=stats,
    )


@dataclass(frozen=True)
class DesignMatrix:
    """Dense M x k regression design with columns
    [1 | fixed_1..fixed_G | block_1 .. block_H], where block h is M x n and
    row (i, t) carries the varying covariate value in column i of the block.
    """

    X: np.ndarray
    n: int
    G: int
    H: int
    labels: tuple[str, ...]

    @property
    def k(self) -> int:
        return 1 + self.G + self.H * self.n

    def varying_block(self, h: int) -> slice:
        """Column slice of the h-th (0-based) varying block."""
        start = 1 + self.G + h * self.n
        return slice(start, start + self.n)


def assemble_design(grid: SpaceTimeGrid, covariates: CovariatePanel) -> DesignMatrix:
    """Build the design matrix for a standardized covariate panel."""
    if not covariates.standardized:
        raise InputError("covariates must be standardized before design assembly")
    M = grid.M
    if covariates.G and covariates.fixed.shape[0] != M:
        raise InputError(f"fixed covariates have {covariates.fixed.shape[0]} rows, grid has M={M}")
    if covariates.H and covariates.varying.shape[0] != M:
        raise InputError(f"varying covariates have {covariates.varying.shape[0]} rows, grid has M={M}")
    n, G, H = grid.n, covariates.G, covariates.H
    k = 1 + G + H * n
    X = np.zeros((M, k))
    X[:, 0] = 1.0
    if G:
        X[:, 1 : 1 + G] = covariates.fixed
    loc_of_row = np.tile(np.arange(n), grid.T)
    rows = np.arange(M)
    for h in range(H):
        X[rows, 1 + G + h * n + loc_of_row] = covariates.varying[:, h]
    labels = ["beta0"]
    labels += [f"beta_{name}" for name in covariates.fixed_names]
    for h, name in enumerate(covariates.varying_names):
        labels += [f"gamma_{name}[{loc}]" for loc in grid.ids]
    return DesignMatrix(X=X, n=n, G=G, H=H, labels=tuple(labels))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _read_rows(path, expected_headers: tuple[tuple[str, ...], ...]):
    """Read a CSV and return (header, rows). The header must equal one of the
    expected layouts exactly."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(h.strip() for h in next(reader))
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if header not in expected_headers:
            options = " or ".join(",".join(h) for h in expected_headers)
            raise InputError(f"{path}: header {','.join(header)!r} (expected {options})")
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    return header, rows


def _parse_number(path, line_no: int, name: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise InputError(f"{path}:{line_no}: bad value for {name}: {raw!r}") from None


def load_locations(path) -> list[tuple[str, float, float]]:
    """Read locations.csv (header id,lat,lon) preserving row order."""
    _, rows = _read_rows(path, (("id", "lat", "lon"),))
    out = []
    for line_no, row in enumerate(rows, start=2):
        if len(row) != 3:
            raise InputError(f"{path}:{line_no}: expected 3 fields, got {len(row)}")
        out.append((row[0].strip(),
                    _parse_number(path, line_no, "lat", row[1]),
                    _parse_number(path, line_no, "lon", row[2])))
    if not out:
        raise InputError(f"{path}: no locations")
    return out


def _load_weekly_table(path, headers, value_builder):
    """Shared loader for id/week tables. Returns dict[(id, week)] -> value and
    the set of weeks seen."""
    header, rows = _read_rows(path, headers)
    values: dict[tuple[str, int], float] = {}
    weeks: set[int] = set()
    for line_no, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
        loc = row[0].strip()
        week_f = _parse_number(path, line_no, "week", row[1])
        week = int(week_f)
        if week != week_f or week < 0:
            raise InputError(f"{path}:{line_no}: week must be a nonnegative integer, got {row[1]!r}")
        key = (loc, week)
        if key in values:
            raise InputError(f"{path}:{line_no}: duplicate entry for id={loc!r}, week={week}")
        numbers = [_parse_number(path, line_no, name, raw)
                   for name, raw in zip(header[2:], row[2:])]
        try:
            values[key] = value_builder(header, numbers)
        except InputError as exc:
            raise InputError(f"{path}:{line_no}: {exc}") from None
        weeks.add(week)
    return values, weeks


def load_cases(path):
    """Read cases.csv. Accepts either raw counts plus population or
    precomputed rates; returns dict[(id, week)] -> rate per 100k."""
    def build(header, nums):
        if header[2] == "rate_per_100k":
            return nums[0]
        cases, pop = nums
        if pop <= 0:
            raise InputError(f"population must be positive, got {pop}")
        if cases < 0:
            raise InputError(f"new_cases must be nonnegative, got {cases}")
        return 1e5 * cases / pop

    return _load_weekly_table(
        path,
        (("id", "week", "new_cases", "population"), ("id", "week", "rate_per_100k")),
        build,
    )


def load_deaths(path):
    return _load_weekly_table(path, (("id", "week", "new_deaths"),), lambda h, nums: nums[0])


def load_vaccinations(path):
    """Read vaccinations.csv; returns dict[(id, week)] -> prevalence."""
    def build(header, nums):
        return vaccination_prevalence(nums[0], nums[1])

    return _load_weekly_table(
        path, (("id", "week", "cumulative_first_doses", "population"),), build
    )


def _require_complete(table: dict, name: str, ids, T: int) -> None:
    missing = [(loc, t) for t in range(1, T + 1) for loc in ids if (loc, t) not in table]
    if missing:
        loc, t = missing[0]
        raise InputError(
            f"{name}: missing (id, week) pairs, e.g. id={loc!r} week={t} "
            f"({len(missing)} missing in total)"
        )


def _panel_column(table: dict, ids, T: int) -> np.ndarray:
    n = len(ids)
    out = np.empty(n * T)
    for t in range(1, T + 1):
        for i, loc in enumerate(ids):
            out[(t - 1) * n + i] = table[(loc, t)]
    return out


def build_panel(locations_path, cases_path, m: int = 4) -> OrdinalPanel:
    """Assemble the ordinal panel from the locations and cases tables."""
    locs = load_locations(locations_path)
    cases, weeks = load_cases(cases_path)
    pos_weeks = sorted(w for w in weeks if w >= 1)
    if not pos_weeks:
        raise InputError(f"{cases_path}: no weeks >= 1")
    T = pos_weeks[-1]
    if pos_weeks != list(range(1, T + 1)):
        raise InputError(f"{cases_path}: weeks must be contiguous 1..{T}")
    ids = tuple(loc for loc, _, _ in locs)
    grid = SpaceTimeGrid(
        ids=ids,
        lat=np.array([la for _, la, _ in locs]),
        lon=np.array([lo for _, _, lo in locs]),
        T=T,
    )
    _require_complete(cases, str(cases_path), ids, T)
    rates = _panel_column(cases, ids, T)
    y = np.array([categorize_weekly_rate(r) for r in rates], dtype=np.int64)
    if m != 4:
        raise InputError("the rate categorization rule defines m=4 categories; "
                         "use a panel artifact for other m")
    return OrdinalPanel(grid=grid, y=y, m=m)


def build_covariates(
    grid: SpaceTimeGrid,
    deaths_path=None,
    vaccinations_path=None,
    fixed: tuple[str, ...] = ("death",),
    varying: tuple[str, ...] = ("vaccination",),
) -> CovariatePanel:
    """Construct the raw (unstandardized) covariate panel.

    'death' is log(1 + previous week's new deaths); the lag at week 1 uses a
    week-0 row of deaths.csv when present, otherwise 0 deaths. 'vaccination'
    is the first-dose prevalence.
    """
    known = {"death", "vaccination"}
    for name in tuple(fixed) + tuple(varying):
        if name not in known:
            raise InputError(f"unknown covariate {name!r} (known: death, vaccination)")
    columns: dict[str, np.ndarray] = {}
    wanted = set(fixed) | set(varying)
    if "death" in wanted:
        if deaths_path is None:
            raise InputError("deaths table required for the 'death' covariate")
        deaths, _ = load_deaths(deaths_path)
        lagged = {}
        for t in range(1, grid.T + 1):
            for loc in grid.ids:
                if t == 1:
                    d = deaths.get((loc, 0), 0.0)
                else:
                    if (loc, t - 1) not in deaths:
                        raise InputError(
                            f"{deaths_path}: missing (id, week) pairs, e.g. id={loc!r} week={t - 1}"
                        )
                    d = deaths[(loc, t - 1)]
                lagged[(loc, t)] = death_covariate(d)
        columns["death"] = _panel_column(lagged, grid.ids, grid.T)
    if "vaccination" in wanted:
        if vaccinations_path is None:
            raise InputError("vaccinations table required for the 'vaccination' covariate")
        vax, _ = load_vaccinations(vaccinations_path)
        _require_complete(vax, str(vaccinations_path), grid.ids, grid.T)
        columns["vaccination"] = _panel_column(vax, grid.ids, grid.T)
    return CovariatePanel(
        fixed_names=tuple(fixed),
        fixed=np.column_stack([columns[name] for name in fixed]) if fixed
        else np.empty((grid.M, 0)),
        varying_names=tuple(varying),
        varying=np.column_stack([columns[name] for name in varying]) if varying
        else np.empty((grid.M, 0)),
    )


# ---------------------------------------------------------------------------
# Panel artifact (.npz) and CSV export
# ---------------------------------------------------------------------------

def save_panel_npz(path, panel: OrdinalPanel, covariates: CovariatePanel | None = None) -> None:
    """Write the columnar panel artifact produced by `ingest`."""
    arrays = {
        "ids": np.array(panel.grid.ids),
        "lat": panel.grid.lat,
        "lon": panel.grid.lon,
        "T": np.array(panel.grid.T),
        "y": panel.y,
        "m": np.array(panel.m),
    }
    if covariates is not None:
        arrays["fixed_names"] = np.array(covariates.fixed_names)
        arrays["fixed"] = covariates.fixed
        arrays["varying_names"] = np.array(covariates.varying_names)
        arrays["varying"] = covariates.varying
        arrays["standardized"] = np.array(covariates.standardized)
    np.savez(path, **arrays)


def load_panel_npz(path):
    """Read a panel artifact; returns (OrdinalPanel, CovariatePanel | None)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: file not found")
    with np.load(path, allow_pickle=False) as data:
        grid = SpaceTimeGrid(
            ids=tuple(str(s) for s in data["ids"]),
            lat=data["lat"],
            lon=data["lon"],
            T=int(data["T"]),
        )
        panel = OrdinalPanel(grid=grid, y=data["y"], m=int(data["m"]))
        cov = None
        if "fixed_names" in data.files:
            cov = CovariatePanel(
                fixed_names=tuple(str(s) for s in data["fixed_names"]),
                fixed=data["fixed"],
                varying_names=tuple(str(s) for s in data["varying_names"]),
                varying=data["varying"],
                standardized=bool(data["standardized"]),
            )
    return panel, cov


def write_panel_csvs(out_dir, panel: OrdinalPanel) -> None:
    """Export a panel as locations.csv + cases.csv (rate form).

    Categories are encoded as representative rates so that re-ingestion
    reproduces the panel exactly (valid for the 4-level rule).
    """
    if panel.m != len(RATE_BAND_REPRESENTATIVES):
        raise InputError("CSV export encodes categories as rates only for m=4; "
                         "use the .npz artifact instead")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = panel.grid
    with open(out_dir / "locations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lat", "lon"])
        for loc, la, lo in zip(grid.ids, grid.lat, grid.lon):
            w.writerow([loc, repr(float(la)), repr(float(lo))])
    with open(out_dir / "cases.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "week", "rate_per_100k"])
        for t in range(1, grid.T + 1):
            for i, loc in enumerate(grid.ids):
                cat = int(panel.y[(t - 1) * grid.n + i])
                w.writerow([loc, t, repr(RATE_BAND_REPRESENTATIVES[cat - 1])])
