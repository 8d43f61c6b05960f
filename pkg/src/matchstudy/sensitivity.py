"""Worst-case inference under bounded unmeasured confounding.

Gamma bounds the odds ratio of treatment between any two members of a
matched set. For each value of gamma the module reports an upper bound on
the p-value over every within-set assignment distribution consistent with
that bound, via the separable per-set worst-case construction for residual
tests and the extreme Bernoulli model for event counts. gamma_threshold
walks a grid to find where significance is lost.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .inference import MH_EXACT_LIMIT, _binary_set_margins, event_tail_probabilities

#: Default Gamma grid: 1.0 through 3.0 in steps of 0.05.
DEFAULT_GAMMA_GRID = np.linspace(1.0, 3.0, 41)


@dataclass(frozen=True)
class SensitivityBound:
    """Worst-case p-value bound at one gamma."""

    gamma: float
    p_one_sided: float
    p_two_sided: float
    direction: str
    statistic: float
    method: str
    detail: dict = field(default_factory=dict)


def _worst_case_moments(values: np.ndarray, gamma: float) -> tuple[float, float]:
    """Worst-case (mean, variance) of one set's treated draw.

    The bias-maximizing assignment puts probability gamma/(gamma*a + n - a)
    on each of the a largest values and 1/(gamma*a + n - a) on the rest, for
    some cut a. The cut maximizing the mean is chosen, breaking exact ties
    toward the larger variance.
    """
    v = np.sort(np.asarray(values, dtype=float))[::-1]
    n = v.size
    if n == 1:
        return float(v[0]), 0.0
    a = np.arange(1, n)
    denom = gamma * a + (n - a)
    top = np.cumsum(v)[:-1]
    top2 = np.cumsum(v * v)[:-1]
    total = float(v.sum())
    total2 = float((v * v).sum())
    mu = (gamma * top + (total - top)) / denom
    ex2 = (gamma * top2 + (total2 - top2)) / denom
    nu = ex2 - mu * mu
    best = np.flatnonzero(mu == mu.max())
    pick = best[np.argmax(nu[best])]
    return float(mu[pick]), float(nu[pick])


def _resolve_direction(direction: str, t_obs: float, center: float) -> str:
    if direction in ("greater", "less"):
        return direction
    if direction == "auto":
        return "greater" if t_obs >= center else "less"
    raise ValueError(f"unknown direction {direction!r}")


def sensitivity_residual(
    resid: np.ndarray,
    z: np.ndarray,
    sets: tuple[np.ndarray, ...],
    gamma: float,
    direction: str = "auto",
) -> SensitivityBound:
    """Separable worst-case bound for the treated-residual-sum test.

    The one-sided bound targets the observed direction (``auto``): the
    biased assignment inflates the null mean toward the statistic and the
    reported p is the upper normal tail of the worst-case deviate. At
    gamma = 1 this is the uniform-assignment normal approximation.
    """
    if gamma < 1.0:
        raise ValueError("gamma must be at least 1")
    resid = np.asarray(resid, dtype=float)
    t_obs = float(sum(resid[s][z[s] == 1][0] for s in sets))
    center = float(sum(resid[s].mean() for s in sets))
    side = _resolve_direction(direction, t_obs, center)
    sign = 1.0 if side == "greater" else -1.0

    mu_total = 0.0
    nu_total = 0.0
    for s in sets:
        mu, nu = _worst_case_moments(sign * resid[s], gamma)
        mu_total += mu
        nu_total += nu
    if nu_total <= 0.0:
        p_one = 1.0
        deviate = 0.0
    else:
        deviate = (sign * t_obs - mu_total) / math.sqrt(nu_total)
        p_one = float(norm.sf(deviate))
    return SensitivityBound(
        gamma=gamma,
        p_one_sided=p_one,
        p_two_sided=min(1.0, 2.0 * p_one),
        direction=side,
        statistic=t_obs,
        method="separable-normal",
        detail={"worst_mean": sign * mu_total, "worst_var": nu_total, "deviate": deviate},
    )


def sensitivity_mh(
    y: np.ndarray,
    z: np.ndarray,
    sets: tuple[np.ndarray, ...],
    gamma: float,
    direction: str = "auto",
    mode: str = "auto",
) -> SensitivityBound:
    """Worst-case Mantel-Haenszel bound.

    With one treated draw per set, the treated-event indicator under the
    most biased admissible assignment is Bernoulli with probability
    gamma*d/(gamma*d + n - d) (or the deflated mirror for the lower tail).
    The total-count tail comes from exact convolution up to 200 sets, then
    the continuity-corrected normal.
    """
    if gamma < 1.0:
        raise ValueError("gamma must be at least 1")
    t, d, n = _binary_set_margins(y, z, sets)
    t_obs = int(round(float(t.sum())))
    side = _resolve_direction(direction, float(t_obs), float(np.sum(d / n)))
    if mode == "auto":
        mode = "exact" if len(sets) <= MH_EXACT_LIMIT else "normal"
    if side == "greater":
        probs = gamma * d / (gamma * d + (n - d))
        p_one = event_tail_probabilities(probs, t_obs, mode)[0]
    else:
        probs = d / (d + gamma * (n - d))
        p_one = event_tail_probabilities(probs, t_obs, mode)[1]
    return SensitivityBound(
        gamma=gamma,
        p_one_sided=min(p_one, 1.0),
        p_two_sided=min(1.0, 2.0 * p_one),
        direction=side,
        statistic=float(t_obs),
        method=f"extreme-bernoulli-{mode}",
        detail={"worst_mean": float(probs.sum()), "worst_var": float((probs * (1 - probs)).sum())},
    )


@dataclass(frozen=True)
class GammaCurve:
    """Bound p-values along a gamma grid with the sensitivity threshold.

    ``threshold`` is the smallest grid gamma whose bound reaches alpha, NaN
    when the result stays significant through the whole grid
    (``beyond_grid``). ``insignificant_at_one`` marks results that fail even
    without any hidden bias.
    """

    gammas: np.ndarray
    p_values: np.ndarray
    alpha: float
    threshold: float
    insignificant_at_one: bool
    beyond_grid: bool


def gamma_threshold(compute_p, alpha: float = 0.05, gammas: np.ndarray | None = None) -> GammaCurve:
    """Locate the gamma at which ``compute_p`` first reaches alpha."""
    if gammas is None:
        gammas = DEFAULT_GAMMA_GRID
    gammas = np.asarray(gammas, dtype=float)
    if gammas.size == 0 or gammas[0] != 1.0 or np.any(np.diff(gammas) <= 0):
        raise ValueError("gamma grid must start at 1 and increase")
    p_values = np.array([float(compute_p(g)) for g in gammas])
    hit = np.flatnonzero(p_values >= alpha)
    if hit.size == 0:
        return GammaCurve(gammas, p_values, alpha, math.nan, False, True)
    first = int(hit[0])
    return GammaCurve(gammas, p_values, alpha, float(gammas[first]), first == 0, False)
