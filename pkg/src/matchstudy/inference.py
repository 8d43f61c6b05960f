"""Randomization inference on matched sets.

The test statistic is the sum of treated members' aligned (set-mean-centered)
adjusted responses. Under the sharp null with an additive shift tau0, the
treated position is uniform within each set, which fixes the statistic's null
distribution without any model for the outcomes. Exact enumeration, Monte
Carlo, and a normal approximation are provided, plus confidence regions by
test inversion, a conditional-logistic analysis for binary outcomes, and the
Mantel-Haenszel test.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln
from scipy.stats import norm

from .dataset import SubjectTable
from .matching import MatchResult

#: Largest number of equiprobable assignments enumerated exactly.
EXACT_LIMIT = 10**6

ADJUST_NONE = "none"
ADJUST_OLS = "ols"
ADJUST_BART = "bart"


@dataclass(frozen=True)
class InferenceData:
    """Matched outcomes in compact arrays.

    ``sets`` holds row-index arrays into the compact vectors; each set lists
    its treated row first. ``excluded_sets`` names treated ids of sets dropped
    for missing outcomes.
    """

    r: np.ndarray
    z: np.ndarray
    x: np.ndarray
    sets: tuple[np.ndarray, ...]
    ids: tuple[str, ...]
    excluded_sets: tuple[str, ...]


def matched_arrays(table: SubjectTable, result: MatchResult, outcome: str) -> InferenceData:
    """Extract outcome/covariate arrays for the matched sets.

    Sets containing any member with a missing outcome are excluded and
    logged. Raises if nothing remains.
    """
    j = table.outcome_index(outcome)
    rows: list[int] = []
    sets: list[np.ndarray] = []
    ids: list[str] = []
    excluded: list[str] = []
    for s in result.sets:
        members = [table.row_of(s.treated_id)] + [table.row_of(c) for c in s.control_ids]
        if any(table.outcome_missing[m, j] for m in members):
            excluded.append(s.treated_id)
            continue
        start = len(rows)
        rows.extend(members)
        sets.append(np.arange(start, start + len(members)))
        ids.append(s.treated_id)
        ids.extend(s.control_ids)
    if not sets:
        raise ValueError(f"no matched sets with observed outcome {outcome!r}")
    idx = np.array(rows, dtype=int)
    return InferenceData(
        r=table.outcomes[idx, j].copy(),
        z=table.z[idx].copy(),
        x=table.covariates[idx].copy(),
        sets=tuple(sets),
        ids=tuple(ids),
        excluded_sets=tuple(excluded),
    )


def align_responses(
    r: np.ndarray,
    z: np.ndarray,
    sets: tuple[np.ndarray, ...],
    tau0: float,
    x: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Remove the hypothesized effect and the set means.

    Responses become (r - tau0*z) minus the set mean of that quantity;
    covariate columns are centered the same way. Both come back with set
    means that are exactly zero up to rounding.
    """
    adjusted = r - tau0 * z
    aligned = np.empty_like(adjusted)
    aligned_x = np.empty_like(x) if x is not None else None
    for s in sets:
        aligned[s] = adjusted[s] - adjusted[s].mean()
        if x is not None:
            aligned_x[s] = x[s] - x[s].mean(axis=0)
    return aligned, aligned_x


def covariance_adjust(
    aligned_r: np.ndarray,
    aligned_x: np.ndarray | None,
    method: str = ADJUST_NONE,
    seed: int = 0,
    bart_params=None,
) -> tuple[np.ndarray, dict]:
    """Residualize aligned responses on aligned covariates.

    ``ols`` fits no-intercept least squares (minimum-norm under rank
    deficiency, flagged); ``bart`` subtracts the posterior-mean sum-of-trees
    fit; ``none`` passes responses through.
    """
    if method == ADJUST_NONE:
        return aligned_r.copy(), {"method": method}
    if aligned_x is None:
        raise ValueError(f"adjustment {method!r} needs covariates")
    if method == ADJUST_OLS:
        beta, _, rank, _ = np.linalg.lstsq(aligned_x, aligned_r, rcond=None)
        info = {"method": method, "rank": int(rank), "rank_deficient": rank < aligned_x.shape[1]}
        return aligned_r - aligned_x @ beta, info
    if method == ADJUST_BART:
        from . import bart

        fit = bart.fit_bart_regression(aligned_x, aligned_r, params=bart_params, seed=seed)
        return aligned_r - fit.in_sample.mean(axis=0), {"method": method, "seed": seed}
    raise ValueError(f"unknown adjustment {method!r}")


@dataclass(frozen=True)
class TestResult:
    """Permutation (or approximation) test outcome."""

    statistic: float
    p_two_sided: float
    p_upper: float
    p_lower: float
    method: str
    n_sets: int
    tau0: float = math.nan
    adjustment: str = ADJUST_NONE
    detail: dict = field(default_factory=dict)


def _comparison_tolerance(values: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(np.max(np.abs(values), initial=0.0)))


def permutational_t_test(
    resid: np.ndarray,
    z: np.ndarray,
    sets: tuple[np.ndarray, ...],
    mode: str = "auto",
    n_draws: int = 100_000,
    seed: int = 0,
) -> TestResult:
    """Test the sharp null via the treated-sum statistic.

    Modes: ``exact`` enumerates every equiprobable assignment (product of set
    sizes at most 1e6); ``monte-carlo`` samples assignments with an add-one
    estimate; ``normal-approx`` uses the exact null mean and variance.
    ``auto`` picks exact when feasible, otherwise Monte Carlo. Two-sided p is
    twice the smaller tail, capped at 1.
    """
    if not sets:
        raise ValueError("need at least one matched set")
    resid = np.asarray(resid, dtype=float)
    t_obs = float(sum(resid[s][z[s] == 1][0] for s in sets))
    n_assign = 1
    for s in sets:
        n_assign *= len(s)
        if n_assign > EXACT_LIMIT:
            break
    if mode == "auto":
        mode = "exact" if n_assign <= EXACT_LIMIT else "monte-carlo"
    detail: dict = {}

    if mode == "exact":
        if n_assign > EXACT_LIMIT:
            raise ValueError(f"exact enumeration needs at most {EXACT_LIMIT} assignments, have > {EXACT_LIMIT}")
        sums = np.zeros(1)
        for s in sets:
            sums = (sums[:, None] + resid[s][None, :]).ravel()
        tol = _comparison_tolerance(sums)
        p_upper = float(np.count_nonzero(sums >= t_obs - tol)) / sums.size
        p_lower = float(np.count_nonzero(sums <= t_obs + tol)) / sums.size
        detail["n_assignments"] = sums.size
    elif mode == "monte-carlo":
        rng = np.random.default_rng(seed)
        acc = np.zeros(n_draws)
        for s in sets:
            acc += resid[s][rng.integers(0, len(s), n_draws)]
        tol = _comparison_tolerance(acc)
        p_upper = (1.0 + np.count_nonzero(acc >= t_obs - tol)) / (n_draws + 1.0)
        p_lower = (1.0 + np.count_nonzero(acc <= t_obs + tol)) / (n_draws + 1.0)
        detail.update(n_draws=n_draws, seed=seed)
    elif mode == "normal-approx":
        mean = float(sum(resid[s].mean() for s in sets))
        var = float(sum(np.var(resid[s]) for s in sets))  # population variance per set
        detail.update(null_mean=mean, null_var=var)
        if var <= 0.0:
            p_upper = p_lower = 1.0
        else:
            deviate = (t_obs - mean) / math.sqrt(var)
            p_upper = float(norm.sf(deviate))
            p_lower = float(norm.cdf(deviate))
    else:
        raise ValueError(f"unknown mode {mode!r}")

    return TestResult(
        statistic=t_obs,
        p_two_sided=min(1.0, 2.0 * min(p_upper, p_lower)),
        p_upper=min(p_upper, 1.0),
        p_lower=min(p_lower, 1.0),
        method=mode,
        n_sets=len(sets),
        detail=detail,
    )


@dataclass(frozen=True)
class ConfidenceRegion:
    """Accepted shift values from inverting the permutation test."""

    grid: np.ndarray
    p_values: np.ndarray
    accepted: np.ndarray
    alpha: float
    adjustment: str
    hull: tuple[float, float] | None
    non_monotone: bool
    excluded_sets: tuple[str, ...] = ()

    @property
    def point_estimate(self) -> float | None:
        # Grid value with the largest p: the center of the inverted test.
        if self.p_values.size == 0:
            return None
        return float(self.grid[int(np.argmax(self.p_values))])


def cohen_grid(outcome_sd: float, n_fill: int = 50) -> np.ndarray:
    """Default shift grid: conventional small/medium/large multiples of the
    outcome sd plus uniform fill-in points across the same span."""
    anchors = np.array([-0.8, -0.5, -0.2, 0.0, 0.2, 0.5, 0.8]) * outcome_sd
    fill = np.linspace(-0.8 * outcome_sd, 0.8 * outcome_sd, n_fill)
    return np.unique(np.concatenate([anchors, fill]))


def invert_tests(
    table: SubjectTable,
    result: MatchResult,
    outcome: str,
    grid: np.ndarray | None = None,
    alpha: float = 0.05,
    adjustment: str = ADJUST_NONE,
    mode: str = "auto",
    seed: int = 0,
    n_draws: int = 100_000,
    bart_params=None,
) -> ConfidenceRegion:
    """Confidence region for an additive effect by inverting the test.

    Each grid value is retested from scratch (alignment and covariance
    adjustment depend on tau0). The accepted hull is [min, max] of accepted
    grid values; a non-contiguous accepted set raises the non-monotone flag.
    """
    data = matched_arrays(table, result, outcome)
    if grid is None:
        grid = cohen_grid(float(np.std(data.r, ddof=1)))
    grid = np.sort(np.asarray(grid, dtype=float))
    p_values = np.empty(grid.size)
    for i, tau0 in enumerate(grid):
        aligned_r, aligned_x = align_responses(data.r, data.z, data.sets, tau0, data.x)
        resid, _ = covariance_adjust(aligned_r, aligned_x, adjustment, seed=seed, bart_params=bart_params)
        test = permutational_t_test(resid, data.z, data.sets, mode=mode, n_draws=n_draws, seed=seed)
        p_values[i] = test.p_two_sided
    accepted = p_values > alpha
    hull = None
    non_monotone = False
    if accepted.any():
        idx = np.flatnonzero(accepted)
        hull = (float(grid[idx[0]]), float(grid[idx[-1]]))
        non_monotone = bool(np.any(~accepted[idx[0] : idx[-1] + 1]))
    return ConfidenceRegion(
        grid=grid,
        p_values=p_values,
        accepted=accepted,
        alpha=alpha,
        adjustment=adjustment,
        hull=hull,
        non_monotone=non_monotone,
        excluded_sets=data.excluded_sets,
    )


# ---------------------------------------------------------------------------
# Binary outcomes
# ---------------------------------------------------------------------------


def _binary_set_margins(
    y: np.ndarray, z: np.ndarray, sets: tuple[np.ndarray, ...]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(treated event, events d_i, size n_i) per set; validates one treated."""
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("binary outcome must be 0/1")
    t = np.empty(len(sets))
    d = np.empty(len(sets))
    n = np.empty(len(sets))
    for i, s in enumerate(sets):
        zs = z[s]
        if zs.sum() != 1:
            raise ValueError("each matched set must contain exactly one treated subject")
        t[i] = float(y[s][zs == 1][0])
        d[i] = float(y[s].sum())
        n[i] = float(len(s))
    return t, d, n


@dataclass(frozen=True)
class ConditionalLogitResult:
    theta: float
    se: float
    p: float
    statistic: float
    identified: bool
    n_informative: int


def conditional_logistic(y: np.ndarray, z: np.ndarray, sets: tuple[np.ndarray, ...]) -> ConditionalLogitResult:
    """Conditional logistic regression of a binary outcome on treatment.

    Conditioning on each set's event count leaves a one-parameter likelihood;
    with one treated per set the set contribution is Bernoulli with odds
    multiplied by C(n-1, d-1)/C(n-1, d). Reports the max-conditional-likelihood
    estimate and the score test at theta = 0 (which reduces to McNemar on
    pairs). Sets with no event-count information (d = 0 or d = n) drop out;
    with none left theta is unidentified.
    """
    t, d, n = _binary_set_margins(y, z, sets)
    informative = (d > 0) & (d < n)
    t, d, n = t[informative], d[informative], n[informative]
    if t.size == 0:
        return ConditionalLogitResult(
            theta=math.nan, se=math.nan, p=1.0, statistic=0.0, identified=False, n_informative=0
        )
    mean0 = d / n
    u = float(np.sum(t - mean0))
    v = float(np.sum(mean0 * (1.0 - mean0)))
    statistic = u / math.sqrt(v)
    p = 2.0 * float(norm.sf(abs(statistic)))

    # Newton on the conditional log-likelihood; log C(n-1, d-1) - log C(n-1, d)
    # gives each set's baseline log-odds shift.
    log_shift = (
        gammaln(n) - gammaln(d) - gammaln(n - d + 1.0) - (gammaln(n) - gammaln(d + 1.0) - gammaln(n - d))
    )
    theta = 0.0
    converged = True
    for _ in range(100):
        q = 1.0 / (1.0 + np.exp(-(theta + log_shift)))
        grad = float(np.sum(t - q))
        hess = float(np.sum(q * (1.0 - q)))
        if hess <= 0.0:
            converged = False
            break
        step = grad / hess
        theta += step
        if abs(theta) > 30.0:
            converged = False
            break
        if abs(step) < 1e-12:
            break
    if not converged:
        return ConditionalLogitResult(
            theta=math.nan, se=math.nan, p=min(p, 1.0), statistic=statistic, identified=False, n_informative=t.size
        )
    q = 1.0 / (1.0 + np.exp(-(theta + log_shift)))
    se = 1.0 / math.sqrt(float(np.sum(q * (1.0 - q))))
    return ConditionalLogitResult(
        theta=theta, se=se, p=min(p, 1.0), statistic=statistic, identified=True, n_informative=t.size
    )


def bernoulli_convolution(probs: np.ndarray) -> np.ndarray:
    """Exact pmf of a sum of independent Bernoulli variables."""
    pmf = np.array([1.0])
    for p in probs:
        nxt = np.zeros(pmf.size + 1)
        nxt[: pmf.size] += pmf * (1.0 - p)
        nxt[1:] += pmf * p
        pmf = nxt
    return pmf


def event_tail_probabilities(probs: np.ndarray, t_obs: int, mode: str) -> tuple[float, float]:
    """(upper, lower) tail p for T = sum of Bernoulli(probs) at the observed
    integer count; ``exact`` convolves, ``normal`` applies a 0.5 continuity
    correction."""
    mean = float(np.sum(probs))
    var = float(np.sum(probs * (1.0 - probs)))
    if mode == "exact":
        pmf = bernoulli_convolution(probs)
        upper = float(pmf[t_obs:].sum())
        lower = float(pmf[: t_obs + 1].sum())
        return min(upper, 1.0), min(lower, 1.0)
    if mode == "normal":
        if var <= 0.0:
            return 1.0, 1.0
        sd = math.sqrt(var)
        upper = float(norm.sf((t_obs - 0.5 - mean) / sd))
        lower = float(norm.cdf((t_obs + 0.5 - mean) / sd))
        return upper, lower
    raise ValueError(f"unknown mode {mode!r}")


#: Set count above which the Mantel-Haenszel paths switch to the normal tail.
MH_EXACT_LIMIT = 200


def mantel_haenszel(
    y: np.ndarray, z: np.ndarray, sets: tuple[np.ndarray, ...], mode: str = "auto"
) -> TestResult:
    """Mantel-Haenszel test of treated event counts across matched sets.

    Conditioning on each set's margins makes the treated-event indicator
    hypergeometric: Bernoulli(d_i/n_i) with one treated draw. ``exact``
    convolves the set contributions; ``normal`` uses the continuity-corrected
    deviate. ``auto`` is exact up to 200 sets.
    """
    t, d, n = _binary_set_margins(y, z, sets)
    t_obs = int(round(float(t.sum())))
    probs = d / n
    if mode == "auto":
        mode = "exact" if len(sets) <= MH_EXACT_LIMIT else "normal"
    p_upper, p_lower = event_tail_probabilities(probs, t_obs, mode)
    return TestResult(
        statistic=float(t_obs),
        p_two_sided=min(1.0, 2.0 * min(p_upper, p_lower)),
        p_upper=p_upper,
        p_lower=p_lower,
        method=f"mantel-haenszel-{mode}",
        n_sets=len(sets),
        detail={"null_mean": float(probs.sum()), "null_var": float((probs * (1 - probs)).sum())},
    )
