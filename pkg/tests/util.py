"""Shared builders for the test suite."""
from __future__ import annotations

import numpy as np

from matchstudy.dataset import SubjectTable


def make_table(
    z,
    covariates,
    covariate_names=None,
    stratum=None,
    ids=None,
    covariate_missing=None,
    outcomes=None,
    outcome_names=(),
    outcome_missing=None,
    aux=None,
) -> SubjectTable:
    z = np.asarray(z, dtype=np.int64)
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    n, p = covariates.shape
    if covariate_names is None:
        covariate_names = tuple(f"x{j + 1}" for j in range(p))
    if ids is None:
        ids = tuple(f"s{i:03d}" for i in range(n))
    if stratum is None:
        stratum = ("a",) * n
    if covariate_missing is None:
        covariate_missing = np.isnan(covariates)
    if outcomes is None:
        outcomes = np.empty((0, 0)) if not outcome_names else np.zeros((n, len(outcome_names)))
    else:
        outcomes = np.asarray(outcomes, dtype=float)
        if outcomes.ndim == 1:
            outcomes = outcomes[:, None]
    if outcome_missing is None:
        outcome_missing = (
            np.empty((0, 0), dtype=bool) if not outcome_names else np.isnan(outcomes)
        )
    return SubjectTable(
        ids=tuple(ids),
        z=z,
        stratum=tuple(stratum),
        covariate_names=tuple(covariate_names),
        covariates=covariates,
        covariate_missing=np.asarray(covariate_missing, dtype=bool),
        outcome_names=tuple(outcome_names),
        outcomes=outcomes,
        outcome_missing=np.asarray(outcome_missing, dtype=bool),
        aux=aux or {},
    )


def random_matched_instance(rng, n_sets, max_controls=3, values=None):
    """Residuals, treatment indicator, and set index arrays for testing.

    Each set lists its treated row first, matching the compact layout used by
    the inference module.
    """
    resid = []
    z = []
    sets = []
    pos = 0
    for _ in range(n_sets):
        size = int(rng.integers(2, max_controls + 2))
        if values is None:
            vals = rng.normal(size=size)
        else:
            vals = rng.choice(values, size=size)
        resid.extend(vals.tolist())
        z.extend([1] + [0] * (size - 1))
        sets.append(np.arange(pos, pos + size))
        pos += size
    return np.asarray(resid), np.asarray(z, dtype=np.int64), tuple(sets)
