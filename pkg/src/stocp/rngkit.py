"""Seeded random streams, truncated-normal sampling, and a single-variable
slice sampler.

Reproducibility contract: every chain's output is a pure function of
(data, config, seed). Streams are derived from a 64-bit seed plus an integer
path (chain index, and segment path for recursive fits), so distinct chains
never share state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as sp

from .errors import InputError, NumericalError

# Truncation regions lying this many standard deviations into a tail are
# sampled by exponential-proposal rejection instead of CDF inversion.
TAIL_SWITCH_SD = 5.0


def stream_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for (seed, path). Same arguments, same stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path)))


def log_ndtr_diff(a, b):
    """log(Phi(b) - Phi(a)) elementwise for a <= b, stable in far tails.

    Intervals in the right half-line are reflected into the left tail so the
    difference is always evaluated where the CDF is small (complementary
    form); the subtraction happens in log space.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    # reflect where the interval midpoint is positive; with infinities the
    # comparison still picks a representable side
    mid = np.where(np.isinf(a) & np.isinf(b), 0.0, 0.5 * (np.clip(a, -1e300, 1e300) + np.clip(b, -1e300, 1e300)))
    flip = mid > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    log_hi = sp.log_ndtr(hi)
    log_lo = sp.log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = log_hi + np.log1p(-np.exp(np.minimum(log_lo - log_hi, 0.0)))
    out = np.where(lo == hi, -np.inf, out)
    if out.ndim == 0:
        return float(out)
    return out


def _tail_rejection(lo, hi, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal draws restricted to [lo, hi] with lo >= TAIL_SWITCH_SD,
    via the shifted-exponential proposal of the classic tail algorithm."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = np.empty_like(lo)
    pending = np.arange(lo.size)
    alpha = 0.5 * (lo + np.sqrt(lo * lo + 4.0))
    for _ in range(10000):
        m = pending.size
        if m == 0:
            return out
        a = alpha[pending]
        z = lo[pending] + rng.exponential(size=m) / a
        accept = (z <= hi[pending]) & (np.log(rng.random(m)) <= -0.5 * (z - a) ** 2)
        out[pending[accept]] = z[accept]
        pending = pending[~accept]
    # extremely narrow far-tail windows: fall back to CDF inversion, which
    # stays accurate in log space
    out[pending] = _inverse_cdf_draw(lo[pending], hi[pending], rng)
    return out


def _inverse_cdf_draw(lo, hi, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal draws on (lo, hi] by inverting the CDF on the truncated
    uniform, with all CDF arithmetic in log space."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    mid = np.where(np.isinf(lo) & np.isinf(hi), 0.0, 0.5 * (np.clip(lo, -1e300, 1e300) + np.clip(hi, -1e300, 1e300)))
    flip = mid > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    log_cdf_a = sp.log_ndtr(a)
    log_width = log_ndtr_diff(a, b)
    u = rng.random(a.shape)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    # log(Phi(a) + u * (Phi(b) - Phi(a))) via logaddexp
    log_p = np.logaddexp(log_cdf_a, np.log(u) + log_width)
    z = sp.ndtri_exp(np.minimum(log_p, 0.0))
    return np.where(flip, -z, z)


def sample_truncated_normal(mean, var, lower, upper, rng: np.random.Generator):
    """Draw from N(mean, var) restricted to (lower, upper]. Broadcasts over
    array arguments; scalar inputs give a float.

    Central and moderately-truncated regions use inverse-CDF sampling on the
    truncated uniform with log-space CDF evaluation; regions more than
    TAIL_SWITCH_SD standard deviations into a tail use exponential-proposal
    rejection.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    scalar = mean.ndim == 0 and var.ndim == 0 and lower.ndim == 0 and upper.ndim == 0
    mean, var, lower, upper = np.broadcast_arrays(mean, var, lower, upper)
    if np.any(var <= 0):
        raise InputError("variance must be positive")
    if np.any(~(lower < upper)):
        raise InputError("empty truncation interval: need lower < upper")
    sd = np.sqrt(var)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    a1 = np.atleast_1d(a).ravel()
    b1 = np.atleast_1d(b).ravel()
    z = np.empty_like(a1)
    right_tail = a1 >= TAIL_SWITCH_SD
    left_tail = b1 <= -TAIL_SWITCH_SD
    central = ~(right_tail | left_tail)
    if np.any(central):
        z[central] = _inverse_cdf_draw(a1[central], b1[central], rng)
    if np.any(right_tail):
        z[right_tail] = _tail_rejection(a1[right_tail], b1[right_tail], rng)
    if np.any(left_tail):
        z[left_tail] = -_tail_rejection(-b1[left_tail], -a1[left_tail], rng)
    z = z.reshape(a.shape)
    x = mean + sd * z
    # keep draws inside (lower, upper] even under floating-point rounding
    open_lo = np.where(np.isfinite(lower), np.nextafter(lower, np.inf), lower)
    x = np.minimum(np.maximum(x, open_lo), upper)
    if scalar:
        return float(x)
    return x


@dataclass(frozen=True)
class SliceConfig:
    """Tuning for the single-variable slice sampler."""

    width: float = 1.0
    max_stepouts: int = 50
    bounds: tuple[float, float] = (-math.inf, math.inf)

    def __post_init__(self):
        if self.width <= 0:
            raise InputError(f"slice width must be positive, got {self.width}")
        if self.max_stepouts < 1:
            raise InputError("max_stepouts must be a positive integer")
        if not self.bounds[0] < self.bounds[1]:
            raise InputError(f"bounds must satisfy lower < upper, got {self.bounds}")


def slice_sample_1d(log_density, current: float, cfg: SliceConfig, rng: np.random.Generator) -> float:
    """One stepping-out + shrinkage slice-sampling transition.

    A level is drawn under log_density(current), an interval of width
    cfg.width is randomly positioned around the current point, expanded until
    both ends fall below the level (at most cfg.max_stepouts steps per side,
    clipped at cfg.bounds), and the new point is sampled by shrinkage.
    """
    lo, hi = cfg.bounds
    logf0 = log_density(current)
    if not np.isfinite(logf0):
        raise NumericalError(f"log density not finite at the current point {current!r}")
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    level = logf0 + math.log(u)
    w = cfg.width
    r = rng.random()
    left = max(current - r * w, lo)
    right = min(current + (1.0 - r) * w, hi)
    steps = cfg.max_stepouts
    while steps > 0 and left > lo and log_density(left) > level:
        left = max(left - w, lo)
        steps -= 1
    steps = cfg.max_stepouts
    while steps > 0 and right < hi and log_density(right) > level:
        right = min(right + w, hi)
        steps -= 1
    for _ in range(1000):
        x = left + rng.random() * (right - left)
        if log_density(x) >= level:
            return x
        if x < current:
            left = x
        elif x > current:
            right = x
        else:
            break
    raise NumericalError("slice shrinkage failed to find an acceptable point in 1000 tries")
