"""Variable-ratio optimal matching within strata and propensity buckets.

Treated subjects are matched to controls inside cells formed by crossing the
design strata with propensity-score intervals; the interval index k doubles as
the number of controls sought per treated subject (capped at 15). Distances
are rank-based Mahalanobis with a soft propensity caliper. Each cell is solved
to exact optimality by reduction to rectangular linear assignment.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logit
from scipy.stats import rankdata

from .dataset import SubjectTable, drop_missingness_determined
from .propensity import PropensityFit

#: Largest number of controls a single treated subject can receive.
MAX_CONTROLS = 15

REASON_MISSINGNESS = "missingness-determined"
REASON_COMMON_SUPPORT = "common-support"
REASON_OPTIMAL_DISCARD = "optimal-discard"
REASON_UNMATCHED = "unmatched-leftover"

#: Distances are scaled to integers (1e-6 resolution) before assignment so the
#: solver's optimum is exact in double precision.
_COST_SCALE = 1e6


class MatchingError(ValueError):
    """Matching is impossible for the given comparison."""


@dataclass(frozen=True)
class MatchedSet:
    """One treated subject with its matched controls."""

    treated_id: str
    control_ids: tuple[str, ...]
    stratum: str
    interval: int

    @property
    def size(self) -> int:
        return 1 + len(self.control_ids)


@dataclass(frozen=True)
class MatchCounts:
    """Treated/control breakdowns of the pipeline's subject accounting."""

    n_miss_treated: int
    n_miss_control: int
    n_cs_treated: int
    n_cs_control: int
    n_matched_treated: int
    n_matched_control: int

    @property
    def n_miss(self) -> int:
        return self.n_miss_treated + self.n_miss_control

    @property
    def n_cs(self) -> int:
        return self.n_cs_treated + self.n_cs_control

    @property
    def n_matched(self) -> int:
        return self.n_matched_treated + self.n_matched_control


@dataclass(frozen=True)
class MatchResult:
    """Complete output of one comparison x method matching run."""

    comparison: str
    method: str
    sets: tuple[MatchedSet, ...]
    dropped: tuple[tuple[str, str], ...]  # (subject id, reason)
    counts: MatchCounts

    @property
    def n_dropped(self) -> int:
        return len(self.dropped)


@dataclass(frozen=True)
class MatchConfig:
    """Knobs for build_match."""

    comparison: str = "comparison"
    method: str = ""
    max_controls: int = MAX_CONTROLS
    caliper_width_sd: float = 0.2
    caliper_penalty: float | None = None
    distance_covariates: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.max_controls <= MAX_CONTROLS:
            raise ValueError(f"max_controls must be in [1, {MAX_CONTROLS}]")


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def rank_mahalanobis(x_treated: np.ndarray, x_control: np.ndarray) -> np.ndarray:
    """Rank-based Mahalanobis distances, shape (n_treated, n_control).

    Columns are converted to average ranks over the pooled sample; the rank
    covariance (ddof=1) is regularized by adding 1e-8 * trace/p to the
    diagonal. Covariates that are constant in the pooled sample carry no rank
    information and are dropped with a warning.
    """
    x_treated = np.atleast_2d(np.asarray(x_treated, dtype=float))
    x_control = np.atleast_2d(np.asarray(x_control, dtype=float))
    n_t, n_c = x_treated.shape[0], x_control.shape[0]
    pooled = np.vstack([x_treated, x_control])
    ranks = rankdata(pooled, axis=0, method="average")
    spread = ranks.max(axis=0) - ranks.min(axis=0)
    keep = spread > 0
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} constant covariate(s) dropped from the distance", stacklevel=2)
    ranks = ranks[:, keep]
    if ranks.shape[1] == 0 or pooled.shape[0] < 2:
        return np.zeros((n_t, n_c))
    cov = np.atleast_2d(np.cov(ranks, rowvar=False))
    p = cov.shape[0]
    cov = cov + np.eye(p) * (np.trace(cov) / p * 1e-8)
    inv = np.linalg.inv(cov)
    rt, rc = ranks[:n_t], ranks[n_t:]
    cross = rt @ inv @ rc.T
    qt = np.einsum("ij,jk,ik->i", rt, inv, rt)
    qc = np.einsum("ij,jk,ik->i", rc, inv, rc)
    dist = qt[:, None] + qc[None, :] - 2.0 * cross
    return np.maximum(dist, 0.0)


def apply_caliper(
    dist: np.ndarray,
    scores_treated: np.ndarray,
    scores_control: np.ndarray,
    width_sd: float = 0.2,
    penalty: float | None = None,
    scale_scores: np.ndarray | None = None,
) -> np.ndarray:
    """Add a soft propensity caliper on the logit scale.

    Pairs whose logit-score gap exceeds ``width_sd`` standard deviations of
    the logit scores pay ``penalty`` per unit of excess; matches are penalized
    rather than forbidden, so feasibility is preserved. The sd is taken over
    ``scale_scores`` when provided (e.g. the whole comparison) and otherwise
    over the pooled scores given here. Default penalty: 1000 x mean distance.
    """
    lt = logit(np.asarray(scores_treated, dtype=float))
    lc = logit(np.asarray(scores_control, dtype=float))
    pool = logit(np.asarray(scale_scores, dtype=float)) if scale_scores is not None else np.concatenate([lt, lc])
    sd = float(np.std(pool, ddof=1)) if pool.size > 1 else 0.0
    width = width_sd * sd
    if penalty is None:
        penalty = 1000.0 * float(dist.mean()) if dist.size else 0.0
    gap = np.abs(lt[:, None] - lc[None, :])
    return dist + penalty * np.maximum(gap - width, 0.0)


def trim_common_support(scores: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Row indices falling outside the arms' overlapping score range.

    Treated subjects scoring below every control and controls scoring above
    every treated subject are dropped. Raises when the trim would empty an
    arm.
    """
    scores = np.asarray(scores, dtype=float)
    z = np.asarray(z)
    treated = z == 1
    if not treated.any() or treated.all():
        raise MatchingError("both arms are required for common-support trimming")
    min_control = scores[~treated].min()
    max_treated = scores[treated].max()
    drop = (treated & (scores < min_control)) | (~treated & (scores > max_treated))
    if (treated & ~drop).sum() == 0 or (~treated & ~drop).sum() == 0:
        raise MatchingError("common-support trim emptied an arm")
    return np.flatnonzero(drop)


# Interval boundaries 1/16 < 1/15 < ... < 1/3; index k counts strictly smaller
# boundaries, and the bucket is 15 - k.
_INTERVAL_BOUNDS = np.array([1.0 / n for n in range(16, 2, -1)])


def propensity_interval(scores):
    """Propensity bucket: 1 for scores above 1/3, then (1/(k+2), 1/(k+1)]
    maps to k up to the closed bottom bucket [0, 1/16] -> 15.

    Accepts a scalar or an array; the bucket index is also the number of
    controls sought for a treated subject with that score.
    """
    s = np.asarray(scores, dtype=float)
    if np.any((s < 0.0) | (s > 1.0)):
        raise ValueError("scores must lie in [0, 1]")
    k = 15 - np.searchsorted(_INTERVAL_BOUNDS, s, side="left")
    return int(k) if np.isscalar(scores) or s.ndim == 0 else k.astype(int)


# ---------------------------------------------------------------------------
# Per-cell optimal assignment
# ---------------------------------------------------------------------------


def match_bucket(
    dist: np.ndarray,
    treated_ids: tuple[str, ...],
    control_ids: tuple[str, ...],
    k: int,
) -> tuple[list[tuple[str, tuple[str, ...]]], list[tuple[str, str]]]:
    """Optimally match one cell at ratio up to 1:k.

    Three regimes, each solved exactly as a rectangular assignment on
    integer-scaled costs:

    * surplus controls (n_c >= k*n_t): every treated subject gets exactly k
      controls, leftover controls are discarded optimally;
    * intermediate (n_t <= n_c < k*n_t): every treated subject gets between
      1 and k controls and every control is used;
    * scarce controls (n_c < n_t): optimal pairs, surplus treated discarded.

    Returns (sets, dropped) where sets pair each matched treated id with its
    control ids and dropped lists (id, reason) rows.
    """
    dist = np.asarray(dist, dtype=float)
    n_t, n_c = len(treated_ids), len(control_ids)
    if dist.shape != (n_t, n_c):
        raise ValueError("distance matrix shape must be (n_treated, n_control)")
    if n_t == 0 or n_c == 0:
        dropped = [(s, REASON_UNMATCHED) for s in treated_ids] + [(s, REASON_UNMATCHED) for s in control_ids]
        return [], dropped
    if not np.isfinite(dist).all() or (dist < 0).any():
        raise ValueError("distances must be finite and non-negative")
    cost = np.round(dist * _COST_SCALE)

    assigned: dict[int, list[int]] = {i: [] for i in range(n_t)}
    dropped: list[tuple[str, str]] = []
    if n_c < n_t:
        # Scarce controls: controls on the small side, pairs only.
        rows, cols = linear_sum_assignment(cost.T)
        matched_treated = set()
        for c, t in zip(rows, cols):
            assigned[int(t)].append(int(c))
            matched_treated.add(int(t))
        for t in range(n_t):
            if t not in matched_treated:
                dropped.append((treated_ids[t], REASON_OPTIMAL_DISCARD))
    elif n_c >= k * n_t:
        # Surplus controls: k exact copies of each treated row.
        rep = np.repeat(cost, k, axis=0)
        rows, cols = linear_sum_assignment(rep)
        used = set()
        for r, c in zip(rows, cols):
            assigned[int(r) // k].append(int(c))
            used.add(int(c))
        for c in range(n_c):
            if c not in used:
                dropped.append((control_ids[c], REASON_OPTIMAL_DISCARD))
    else:
        # Intermediate: replicate up to `copies` per treated and pad with
        # dummy columns. First copies may only take real controls, so every
        # treated subject receives at least one; the square assignment uses
        # every real control. The finite forbidden cost exceeds any feasible
        # real total, so it is never paid.
        copies = min(k, n_c - n_t + 1)
        rep = np.repeat(cost, copies, axis=0)
        n_rows = n_t * copies
        n_dummy = n_rows - n_c
        forbidden = float(np.sort(cost, axis=None)[-n_c:].sum()) + 1.0
        dummy = np.zeros((n_rows, n_dummy))
        first_copy = (np.arange(n_rows) % copies) == 0
        dummy[first_copy, :] = forbidden
        rows, cols = linear_sum_assignment(np.hstack([rep, dummy]))
        for r, c in zip(rows, cols):
            if int(c) < n_c:
                assigned[int(r) // copies].append(int(c))

    sets = []
    for t in range(n_t):
        if assigned[t]:
            controls = tuple(sorted(control_ids[c] for c in assigned[t]))
            sets.append((treated_ids[t], controls))
    return sets, dropped


# ---------------------------------------------------------------------------
# Full pipeline for one comparison x method
# ---------------------------------------------------------------------------


def build_match(table: SubjectTable, fit: PropensityFit, config: MatchConfig | None = None) -> MatchResult:
    """Run the matching pipeline: missingness-determined drop, common-support
    trim, stratum x interval cells, per-cell optimal assignment.

    ``fit.scores`` must align with ``table`` rows. Every input subject lands
    either in a matched set or in the dropped ledger with a reason.
    """
    config = config or MatchConfig()
    scores = np.asarray(fit.scores, dtype=float)
    if scores.shape != (table.n,):
        raise ValueError("fit.scores must align with the table rows")

    dropped: list[tuple[str, str]] = []
    kept_table, miss_ledger = drop_missingness_determined(table)
    miss_t = miss_c = 0
    for subject_id, _ in _dedupe_ledger(miss_ledger):
        # A subject can trip several indicators; drop it once.
        dropped.append((subject_id, REASON_MISSINGNESS))
        if table.z[table.row_of(subject_id)] == 1:
            miss_t += 1
        else:
            miss_c += 1
    kept_rows = np.array([table.row_of(s) for s in kept_table.ids], dtype=int)
    scores = scores[kept_rows]

    try:
        trim = trim_common_support(scores, kept_table.z)
    except MatchingError as err:
        raise MatchingError(f"{config.comparison}: {err}") from None
    cs_t = int(np.count_nonzero(kept_table.z[trim] == 1))
    cs_c = len(trim) - cs_t
    for i in trim:
        dropped.append((kept_table.ids[i], REASON_COMMON_SUPPORT))
    keep_mask = np.ones(kept_table.n, dtype=bool)
    keep_mask[trim] = False
    work = kept_table.subset(keep_mask)
    scores = scores[keep_mask]

    if config.distance_covariates is None:
        dist_cols = np.arange(len(work.covariate_names))
    else:
        dist_cols = np.array([work.covariate_index(c) for c in config.distance_covariates], dtype=int)
    x_dist = work.covariates[:, dist_cols]

    intervals = propensity_interval(scores)
    intervals = np.minimum(intervals, config.max_controls)
    cells: dict[tuple[str, int], list[int]] = {}
    for i in range(work.n):
        cells.setdefault((work.stratum[i], int(intervals[i])), []).append(i)

    all_sets: list[MatchedSet] = []
    matched_t = matched_c = 0
    for stratum, k in sorted(cells):
        rows = np.array(cells[(stratum, k)], dtype=int)
        is_treated = work.z[rows] == 1
        t_rows = rows[is_treated]
        c_rows = rows[~is_treated]
        # Deterministic id order inside the cell.
        t_rows = t_rows[np.argsort([work.ids[i] for i in t_rows])]
        c_rows = c_rows[np.argsort([work.ids[i] for i in c_rows])]
        t_ids = tuple(work.ids[i] for i in t_rows)
        c_ids = tuple(work.ids[i] for i in c_rows)
        if len(t_rows) == 0 or len(c_rows) == 0:
            for s in t_ids + c_ids:
                dropped.append((s, REASON_UNMATCHED))
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # constant-column drops are routine in small cells
            dist = rank_mahalanobis(x_dist[t_rows], x_dist[c_rows])
        dist = apply_caliper(
            dist,
            scores[t_rows],
            scores[c_rows],
            width_sd=config.caliper_width_sd,
            penalty=config.caliper_penalty,
            scale_scores=scores,
        )
        cell_sets, cell_dropped = match_bucket(dist, t_ids, c_ids, k)
        dropped.extend(cell_dropped)
        for treated_id, control_ids in cell_sets:
            all_sets.append(MatchedSet(treated_id=treated_id, control_ids=control_ids, stratum=stratum, interval=k))
            matched_t += 1
            matched_c += len(control_ids)

    all_sets.sort(key=lambda s: (s.stratum, s.interval, s.treated_id))
    counts = MatchCounts(
        n_miss_treated=miss_t,
        n_miss_control=miss_c,
        n_cs_treated=cs_t,
        n_cs_control=cs_c,
        n_matched_treated=matched_t,
        n_matched_control=matched_c,
    )
    result = MatchResult(
        comparison=config.comparison,
        method=config.method or fit.method,
        sets=tuple(all_sets),
        dropped=tuple(dropped),
        counts=counts,
    )
    if counts.n_matched + len(result.dropped) != table.n:
        raise AssertionError("subject accounting failed: sets + dropped != input")
    return result


def composition(result: MatchResult) -> dict[int, int]:
    """Count matched sets by number of controls, 1 through 15."""
    out = {k: 0 for k in range(1, MAX_CONTROLS + 1)}
    for s in result.sets:
        out[len(s.control_ids)] += 1
    return out


def _dedupe_ledger(ledger: tuple[tuple[str, str], ...]) -> list[tuple[str, str]]:
    seen = set()
    out = []
    for subject_id, cov in ledger:
        if subject_id not in seen:
            seen.add(subject_id)
            out.append((subject_id, cov))
    return out
