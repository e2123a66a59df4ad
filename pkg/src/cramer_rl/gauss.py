"""Gaussian return distributions and the squared-Cramer (energy) distance.

The critic in this package models each return distribution by its first two
moments, i.e. a Gaussian N(mean, std^2), with std = 0 standing for a Dirac
mass (terminal targets).  The distance between two such distributions is the
integral of the squared CDF gap,

    d_e(U, V) = int (F_U(x) - F_V(x))^2 dx,

which for one-dimensional laws equals

    d_e(U, V) = E|U - V| - 0.5 E|U - U'| - 0.5 E|V - V'|

with U', V' independent copies.  For Gaussians every term has an elementary
closed form through the standard normal pdf/cdf, so `energy_distance_closed_form`
is exact and serves as the oracle for the trapezoid discretization
(`energy_distance_quadrature`) that is kept for finite mixtures.

Gradients of the distance with respect to the current mean and std are also
closed-form; see `grad_mean` and `grad_std_closed_form`.  The mean gradient
shrinks as the modeled std grows (roughly sqrt(2/pi) * mean_gap / std once the
std dominates), which is what damps value updates at low-confidence entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)

#: Grid-scale guard used when every distribution on the grid is a Dirac.
_EPS_GRID = 1e-6
#: Half-width of the node pair inserted around a step discontinuity.
_EPS_STEP = 1e-9


class DegenerateStdError(ValueError):
    """Raised when an operation requires std > 0 but got a Dirac."""


@dataclass(frozen=True)
class GaussianReturn:
    """A return distribution N(mean, std^2); std = 0 is a Dirac at `mean`."""

    mean: float
    std: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise ValueError(f"non-finite Gaussian parameters ({self.mean}, {self.std})")
        if self.std < 0.0:
            raise ValueError(f"negative std {self.std}")


@dataclass(frozen=True)
class QuadratureSpec:
    """Uniform trapezoid grid: `node_count` nodes spanning the two means
    extended by `bound_multiplier` times the largest std on either side."""

    node_count: int = 31
    bound_multiplier: float = 15.0

    def __post_init__(self):
        if self.node_count < 3:
            raise ValueError(f"node_count must be >= 3, got {self.node_count}")
        if not self.bound_multiplier > 0.0:
            raise ValueError(f"bound_multiplier must be > 0, got {self.bound_multiplier}")


DEFAULT_QUADRATURE = QuadratureSpec()


@dataclass(frozen=True)
class MixtureCdf:
    """Finite weighted mixture of Gaussian/Dirac components.

    `components` is a sequence of (weight, GaussianReturn) pairs; weights must
    lie in [0, 1] and sum to 1 within 1e-12.
    """

    components: tuple

    def __post_init__(self):
        comps = tuple((float(w), g) for w, g in self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("mixture needs at least one component")
        total = 0.0
        for w, g in comps:
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"mixture weight {w} outside [0, 1]")
            if not isinstance(g, GaussianReturn):
                raise TypeError("mixture components must be GaussianReturn")
            total += w
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {total}, expected 1")

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x, dtype=np.float64)
        for w, g in self.components:
            if g.std > 0.0:
                out += w * ndtr((x - g.mean) / g.std)
            else:
                out += w * (x >= g.mean)
        return out

    def mean_bounds(self):
        means = [g.mean for _, g in self.components]
        return min(means), max(means)

    def max_std(self):
        return max(g.std for _, g in self.components)

    def dirac_locations(self):
        return [g.mean for _, g in self.components if g.std == 0.0]


def pdf(g: GaussianReturn, x):
    """Density of `g` at `x`.  Requires std > 0."""
    if g.std == 0.0:
        raise DegenerateStdError("pdf undefined for a Dirac return distribution")
    z = (np.asarray(x, dtype=np.float64) - g.mean) / g.std
    return np.exp(-0.5 * z * z) / (g.std * _SQRT_2PI)


def cdf(g: GaussianReturn, x):
    """CDF of `g` at `x`; the Dirac case is the right-continuous unit step."""
    x = np.asarray(x, dtype=np.float64)
    if g.std == 0.0:
        return (x >= g.mean).astype(np.float64)
    return ndtr((x - g.mean) / g.std)


def sample(g: GaussianReturn, rng: np.random.Generator) -> float:
    """Draw mean + std * xi with xi standard normal from `rng`."""
    return g.mean + g.std * rng.standard_normal()


def _std_normal_pdf(z):
    return np.exp(-0.5 * np.square(z)) / _SQRT_2PI


def _abs_moment(delta, scale):
    """E|X| for X ~ N(delta, scale^2), valid for scale = 0 as well."""
    delta = np.asarray(delta, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    out = np.abs(delta)
    pos = scale > 0.0
    if np.any(pos):
        d = delta[pos] if delta.shape else delta
        s = scale[pos] if scale.shape else scale
        z = d / s
        val = 2.0 * s * _std_normal_pdf(z) + d * (2.0 * ndtr(z) - 1.0)
        if out.shape:
            out[pos] = val
        else:
            out = val
    return out


def energy_distance_arrays(mean1, std1, mean2, std2):
    """Vectorized closed-form d_e between N(mean1, std1^2) and N(mean2, std2^2)."""
    mean1, std1, mean2, std2 = np.broadcast_arrays(
        np.asarray(mean1, dtype=np.float64),
        np.asarray(std1, dtype=np.float64),
        np.asarray(mean2, dtype=np.float64),
        np.asarray(std2, dtype=np.float64),
    )
    cross = _abs_moment(mean1 - mean2, np.hypot(std1, std2))
    # E|X - X'| for iid N(m, s^2) is 2s/sqrt(pi).
    self1 = std1 * _INV_SQRT_PI
    self2 = std2 * _INV_SQRT_PI
    out = np.maximum(cross - self1 - self2, 0.0)
    # exact zero for identical parameters, immune to 1-ulp rounding residue
    return np.where((mean1 == mean2) & (std1 == std2), 0.0, out)


def energy_distance_closed_form(g1: GaussianReturn, g2: GaussianReturn) -> float:
    """Exact integral of the squared CDF gap between two Gaussian/Dirac laws."""
    return float(energy_distance_arrays(g1.mean, g1.std, g2.mean, g2.std))


def _quad_grid(lo_mean, hi_mean, max_std, spec: QuadratureSpec, step_locations=()):
    """Trapezoid nodes spanning [lo_mean - m*s, hi_mean + m*s].

    Step discontinuities (Dirac locations) get a node pair straddling the jump
    so both one-sided CDF values are sampled.  Returns (x, uniform) where
    `uniform` is True when no extra nodes were inserted.
    """
    scale = max(max_std, _EPS_GRID)
    lo = lo_mean - spec.bound_multiplier * scale
    hi = hi_mean + spec.bound_multiplier * scale
    x = np.linspace(lo, hi, spec.node_count)
    if step_locations:
        eps = _EPS_STEP * max(1.0, max(abs(l) for l in step_locations))
        extra = []
        for loc in step_locations:
            extra.extend((loc - eps, loc + eps))
        extra = np.asarray(extra, dtype=np.float64)
        extra = extra[(extra > lo) & (extra < hi)]
        if extra.size:
            return np.union1d(x, extra), False
    return x, True


def _trapezoid(y, x, uniform):
    if uniform:
        h = (x[-1] - x[0]) / (x.size - 1)
        return h * (float(y.sum()) - 0.5 * (y[0] + y[-1]))
    return float(np.trapezoid(y, x))


#: beyond this many stds the normal CDF saturates to 0/1 within ~1e-19
_CDF_SATURATION_Z = 9.0


def _cdf_uniform_grid(g: GaussianReturn, x: np.ndarray) -> np.ndarray:
    """CDF sampled on an ascending uniform grid, skipping the saturated tails.

    The saturated regions are contiguous prefix/suffix slices of the grid, so
    only the live window pays for the CDF evaluation.  Only used on large
    grids where the saving matters.
    """
    n = x.size
    if g.std == 0.0 or n < 4096:
        return cdf(g, x)
    h = (x[-1] - x[0]) / (n - 1)
    lo = int(np.ceil((g.mean - _CDF_SATURATION_Z * g.std - x[0]) / h))
    hi = int(np.floor((g.mean + _CDF_SATURATION_Z * g.std - x[0]) / h)) + 1
    lo, hi = max(lo, 0), min(hi, n)
    out = np.empty(n)
    out[:lo] = 0.0
    out[hi:] = 1.0
    if hi > lo:
        out[lo:hi] = ndtr((x[lo:hi] - g.mean) / g.std)
    return out


def energy_distance_quadrature(
    g1: GaussianReturn, g2: GaussianReturn, spec: QuadratureSpec = DEFAULT_QUADRATURE
) -> float:
    """Trapezoid approximation of d_e(g1, g2) on the spec's uniform grid."""
    steps = [g.mean for g in (g1, g2) if g.std == 0.0]
    x, uniform = _quad_grid(
        min(g1.mean, g2.mean), max(g1.mean, g2.mean), max(g1.std, g2.std), spec, steps
    )
    if uniform:
        gap = _cdf_uniform_grid(g1, x) - _cdf_uniform_grid(g2, x)
    else:
        gap = cdf(g1, x) - cdf(g2, x)
    return float(_trapezoid(gap * gap, x, uniform))


def energy_distance_mixture(
    mix: MixtureCdf, g: GaussianReturn, spec: QuadratureSpec = DEFAULT_QUADRATURE
) -> float:
    """Trapezoid approximation of d_e between a finite mixture and a Gaussian."""
    lo_m, hi_m = mix.mean_bounds()
    steps = mix.dirac_locations()
    if g.std == 0.0:
        steps = steps + [g.mean]
    x, uniform = _quad_grid(
        min(lo_m, g.mean), max(hi_m, g.mean), max(mix.max_std(), g.std), spec, steps
    )
    gap = mix.cdf(x) - cdf(g, x)
    return float(_trapezoid(gap * gap, x, uniform))


def expected_cdf_gap(current: GaussianReturn, target: GaussianReturn) -> float:
    """int (F_current - F_target) * pdf_current dx, in closed form.

    Equals 1/2 - Phi((mean - target_mean) / hypot(std, target_std)); the
    reduction is verified against direct quadrature of the defining integral
    in the test suite.
    """
    if current.std == 0.0:
        raise DegenerateStdError("expected_cdf_gap requires current.std > 0")
    return 0.5 - float(
        ndtr((current.mean - target.mean) / math.hypot(current.std, target.std))
    )


def grad_mean_arrays(mean, std, target_mean, target_std):
    """Vectorized d/d(mean) of the closed-form distance to the target."""
    z = (np.asarray(mean, dtype=np.float64) - target_mean) / np.hypot(std, target_std)
    return 2.0 * ndtr(z) - 1.0


def distance_and_grads_arrays(mean, std, target_mean, target_std):
    """(d_e, d/dmean, d/dstd) in one pass, sharing the pdf/cdf evaluations.

    Requires std > 0 elementwise (the target may be Dirac).  This is the
    training hot path; each piece individually matches the reference
    functions above.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    gap = mean - target_mean
    scale = np.hypot(std, target_std)
    z = gap / scale
    density = _std_normal_pdf(z)
    two_cdf_m1 = 2.0 * ndtr(z) - 1.0
    dist = 2.0 * scale * density + gap * two_cdf_m1 - (std + target_std) * _INV_SQRT_PI
    d_std = 2.0 * density * std / scale - _INV_SQRT_PI
    return np.maximum(dist, 0.0), two_cdf_m1, d_std


def grad_mean(current: GaussianReturn, target: GaussianReturn) -> float:
    """Derivative of d_e(current, target) in the current mean.

    This is -2 * expected_cdf_gap(current, target): differentiating the CDF in
    its mean already yields the (negative) density, so no additional 1/std
    factor appears.  The value is bounded by 1 in magnitude and decays to 0 as
    the current std grows, matching central finite differences of
    `energy_distance_closed_form`.
    """
    if current.std == 0.0:
        raise DegenerateStdError("grad_mean requires current.std > 0")
    return float(grad_mean_arrays(current.mean, current.std, target.mean, target.std))


def grad_std_arrays(mean, std, target_mean, target_std):
    """Vectorized d/d(std) of the closed-form distance to the target."""
    std = np.asarray(std, dtype=np.float64)
    s_tot = np.hypot(std, target_std)
    z = (np.asarray(mean, dtype=np.float64) - target_mean) / s_tot
    return 2.0 * _std_normal_pdf(z) * std / s_tot - _INV_SQRT_PI


def grad_std_closed_form(current: GaussianReturn, target: GaussianReturn) -> float:
    """Analytic d/d(std) of d_e(current, target); dual of `grad_std`."""
    if current.std == 0.0:
        raise DegenerateStdError("grad_std requires current.std > 0")
    return float(grad_std_arrays(current.mean, current.std, target.mean, target.std))


def grad_std(
    current: GaussianReturn,
    target: GaussianReturn,
    spec: QuadratureSpec = DEFAULT_QUADRATURE,
) -> float:
    """d/d(std) of the distance, via quadrature of 2*(F_cur - F_tgt)*dF/d(std).

    dF/d(std) = -((x - mean)/std) * pdf(x).  Matches central finite differences
    of the closed-form distance once the grid is fine enough.
    """
    if current.std == 0.0:
        raise DegenerateStdError("grad_std requires current.std > 0")
    steps = [target.mean] if target.std == 0.0 else []
    x, uniform = _quad_grid(
        min(current.mean, target.mean),
        max(current.mean, target.mean),
        max(current.std, target.std),
        spec,
        steps,
    )
    gap = cdf(current, x) - cdf(target, x)
    dF_dstd = -((x - current.mean) / current.std) * pdf(current, x)
    return float(_trapezoid(2.0 * gap * dF_dstd, x, uniform))


def grad_mean_mixture(
    current: GaussianReturn, mix: MixtureCdf, spec: QuadratureSpec = DEFAULT_QUADRATURE
) -> float:
    """Mean gradient against a mixture target, by quadrature of the gap integral.

    Kept as an independent route: the closed-form gradient is linear in the
    target CDF, so this must agree with the probability-weighted average of
    per-component closed-form gradients.
    """
    if current.std == 0.0:
        raise DegenerateStdError("grad_mean_mixture requires current.std > 0")
    lo_m, hi_m = mix.mean_bounds()
    x, uniform = _quad_grid(
        min(lo_m, current.mean),
        max(hi_m, current.mean),
        max(mix.max_std(), current.std),
        spec,
        mix.dirac_locations(),
    )
    gap = cdf(current, x) - mix.cdf(x)
    return float(-2.0 * _trapezoid(gap * pdf(current, x), x, uniform))


def gradient_weight_error(
    current: GaussianReturn, noisy_target: GaussianReturn, exact_target: GaussianReturn
) -> float:
    """|grad_mean under a noisy target - grad_mean under the exact target|.

    For bounded target-mean gaps this decays like 1/std of the current
    distribution, so noisy targets barely move low-confidence entries.
    """
    return abs(grad_mean(current, noisy_target) - grad_mean(current, exact_target))
