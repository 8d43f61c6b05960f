"""Propensity-score estimators: logistic MLE, L1-penalized logistic with
cross-validated penalty, Bayesian logistic via adaptive random-walk
Metropolis, and a sum-of-trees probit fit.

All fitters take a covariate matrix ``x`` of shape (n, p) WITHOUT an
intercept column; the intercept is handled internally and is never penalized.
Fitted scores are clipped to the open interval (0, 1).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import expit

_SCORE_EPS = 1e-12

MLE = "mle"
L1 = "l1"
BAYES = "bayes"
BART = "bart"

#: Deterministic method ordering used for tie-breaks in match selection.
METHOD_ORDER = (MLE, L1, BAYES, BART)


@dataclass
class PropensityFit:
    """Fitted propensity model.

    Attributes:
        method: One of ``mle``, ``l1``, ``bayes``, ``bart``.
        scores: Fitted score per training row, strictly inside (0, 1).
        beta: Coefficients (intercept first) for the point-estimate methods;
            posterior mean for ``bayes``; None for ``bart``.
        converged: False under detected separation / non-convergence.
        beta_draws: Retained posterior draws (bayes only), intercept first.
        forest: Fitted sum-of-trees model (bart only).
        diagnostics: Method-specific extras (penalty chosen, acceptance
            rate, CV table, ...).
    """

    method: str
    scores: np.ndarray
    beta: np.ndarray | None = None
    converged: bool = True
    beta_draws: np.ndarray | None = None
    forest: Any = None
    diagnostics: dict = field(default_factory=dict)


def _clip_scores(s: np.ndarray) -> np.ndarray:
    return np.clip(s, _SCORE_EPS, 1.0 - _SCORE_EPS)


def _check_inputs(x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    z = np.asarray(z)
    if x.ndim != 2:
        raise ValueError("x must be a 2-d matrix")
    if z.shape != (x.shape[0],):
        raise ValueError("z length must match x rows")
    if not np.isin(z, (0, 1)).all():
        raise ValueError("z must be binary 0/1")
    if not (z.any() and (1 - z).any()):
        raise ValueError("both arms must be non-empty")
    return x, z.astype(float)


def _loglik(design: np.ndarray, z: np.ndarray, beta: np.ndarray) -> float:
    eta = design @ beta
    # log(1 + exp(eta)) computed stably.
    return float(z @ eta - np.logaddexp(0.0, eta).sum())


def fit_mle(x: np.ndarray, z: np.ndarray) -> PropensityFit:
    """Maximum-likelihood logistic fit by Newton/IRLS.

    Iterates until the gradient max-norm falls below 1e-8 or 100 iterations.
    Separation is flagged (converged=False, warning) when the coefficient
    norm exceeds 1e3 or the likelihood stalls with a non-small gradient.
    """
    x, z = _check_inputs(x, z)
    n, p = x.shape
    design = np.column_stack([np.ones(n), x])
    beta = np.zeros(p + 1)
    converged = False
    separated = False
    last_ll = _loglik(design, z, beta)
    for _ in range(100):
        prob = expit(design @ beta)
        grad = design.T @ (z - prob)
        if np.max(np.abs(grad)) < 1e-8:
            converged = True
            break
        w = prob * (1.0 - prob)
        info = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            info = info + 1e-10 * np.eye(p + 1)
            step = np.linalg.solve(info, grad)
        beta = beta + step
        if not np.isfinite(beta).all():
            separated = True
            break
        ll = _loglik(design, z, beta)
        if np.linalg.norm(beta) > 1e3:
            separated = True
            break
        if abs(ll - last_ll) < 1e-12 and np.max(np.abs(grad)) > 1e-4:
            separated = True
            break
        last_ll = ll
    if not separated and beta[1:].any():
        # expit saturation can zero the gradient at finite beta even though the
        # true MLE is at infinity; perfect in-sample ranking reveals that case
        idx = design @ beta
        if idx[z == 1].min() >= idx[z == 0].max():
            separated = True
    if separated:
        warnings.warn("possible separation in logistic MLE; coefficients unreliable", stacklevel=2)
        converged = False
    scores = _clip_scores(expit(design @ beta))
    return PropensityFit(method=MLE, scores=scores, beta=beta, converged=converged)


# ---------------------------------------------------------------------------
# L1-penalized logistic regression
# ---------------------------------------------------------------------------

# Weights in the IRLS quadratic approximation are clipped away from zero so a
# saturated fit cannot freeze the working response.
_PROB_CLIP = 1e-5


def _l1_coordinate_descent(
    design: np.ndarray, z: np.ndarray, lam: float, beta: np.ndarray, tol: float = 1e-7, max_outer: int = 100
) -> np.ndarray:
    """Cyclic coordinate descent on the IRLS quadratic approximation.

    The intercept (column 0) is never thresholded. The penalty uses the sum
    form: NLL(beta) + lam * sum_j |beta_j|.
    """
    n, d = design.shape
    beta = beta.copy()
    sq = design**2
    for _ in range(max_outer):
        eta = design @ beta
        prob = np.clip(expit(eta), _PROB_CLIP, 1.0 - _PROB_CLIP)
        w = prob * (1.0 - prob)
        # Working response for the quadratic expansion at the current beta.
        work = eta + (z - prob) / w
        denom = sq.T @ w
        resid = work - eta
        outer_start = beta.copy()
        for _ in range(1000):
            max_delta = 0.0
            for j in range(d):
                if denom[j] == 0.0:
                    # w is clipped positive, so this means the column is all
                    # zero; it carries nothing and its coefficient stays 0
                    beta[j] = 0.0
                    continue
                old = beta[j]
                rho = float(design[:, j] @ (w * resid)) + denom[j] * old
                if j == 0:
                    new = rho / denom[j]
                else:
                    new = _soft_threshold(rho, lam) / denom[j]
                if new != old:
                    resid = resid - design[:, j] * (new - old)
                    beta[j] = new
                    max_delta = max(max_delta, abs(new - old))
            if max_delta < tol:
                break
        if np.max(np.abs(beta - outer_start)) < tol:
            break
    return beta


def _soft_threshold(value: float, lam: float) -> float:
    if value > lam:
        return value - lam
    if value < -lam:
        return value + lam
    return 0.0


def _binomial_deviance(design: np.ndarray, z: np.ndarray, beta: np.ndarray) -> float:
    return -2.0 * _loglik(design, z, beta)


def l1_lambda_grid(x: np.ndarray, z: np.ndarray, num: int = 50, ratio: float = 1e-3) -> np.ndarray:
    """Log-spaced penalty grid from the smallest all-zero penalty downward."""
    x, z = _check_inputs(x, z)
    zbar = z.mean()
    lam_max = float(np.max(np.abs(x.T @ (z - zbar))))
    lam_max = max(lam_max, 1e-10)
    return np.geomspace(lam_max, lam_max * ratio, num)


def fit_l1(
    x: np.ndarray,
    z: np.ndarray,
    penalties: np.ndarray | None = None,
    folds: int = 10,
    seed: int = 0,
) -> PropensityFit:
    """L1-penalized logistic fit with the penalty chosen by cross-validation.

    The path is computed from the largest penalty down with warm starts; CV
    loss is mean held-out binomial deviance, fold assignment is a seeded
    permutation, and ties prefer the larger (sparser) penalty. The final
    model is refit on the full data at the chosen penalty.
    """
    x, z = _check_inputs(x, z)
    n, p = x.shape
    if penalties is None:
        penalties = l1_lambda_grid(x, z)
    penalties = np.asarray(penalties, dtype=float)
    if (penalties < 0).any():
        raise ValueError("penalties must be nonnegative")
    order = np.argsort(penalties)[::-1]  # descending for warm starts
    penalties = penalties[order]
    design = np.column_stack([np.ones(n), x])

    folds = min(folds, n)
    perm = np.random.default_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[perm] = np.arange(n) % folds

    cv_loss = np.zeros(len(penalties))
    for f in range(folds):
        train = fold_of != f
        test = ~train
        if not (z[train].any() and (1 - z[train]).any()):
            raise ValueError("a CV fold lost one arm entirely; use fewer folds")
        beta = np.zeros(p + 1)
        for i, lam in enumerate(penalties):
            beta = _l1_coordinate_descent(design[train], z[train], lam, beta)
            cv_loss[i] += _binomial_deviance(design[test], z[test], beta) / test.sum()
    cv_loss /= folds
    best = int(np.flatnonzero(cv_loss == cv_loss.min())[0])  # first index = largest penalty

    beta = np.zeros(p + 1)
    path_nonzero = []
    for i, lam in enumerate(penalties):
        beta = _l1_coordinate_descent(design, z, lam, beta)
        path_nonzero.append(int(np.count_nonzero(beta[1:])))
        if i == best:
            chosen = beta.copy()
    scores = _clip_scores(expit(design @ chosen))
    return PropensityFit(
        method=L1,
        scores=scores,
        beta=chosen,
        diagnostics={
            "penalty": float(penalties[best]),
            "penalties": penalties,
            "cv_loss": cv_loss,
            "path_nonzero": tuple(path_nonzero),
            "nonzero": int(np.count_nonzero(chosen[1:])),
            "folds": folds,
            "seed": seed,
        },
    )


# ---------------------------------------------------------------------------
# Bayesian logistic regression
# ---------------------------------------------------------------------------

#: Prior sd for the intercept; covariate coefficients get a standard normal.
_INTERCEPT_PRIOR_SD = 10.0


def _log_posterior(design: np.ndarray, z: np.ndarray, beta: np.ndarray, prior_prec: np.ndarray) -> float:
    return _loglik(design, z, beta) - 0.5 * float(beta @ (prior_prec * beta))


def fit_bayes(
    x: np.ndarray,
    z: np.ndarray,
    draws: int = 4000,
    burn_in: int = 1000,
    seed: int = 0,
    target_acceptance: float = 0.3,
) -> PropensityFit:
    """Bayesian logistic regression under a standard-normal coefficient prior.

    Random-walk Metropolis preconditioned by the Laplace approximation at the
    posterior mode; the step scale adapts toward the target acceptance rate
    during burn-in only, so the retained chain is a valid fixed kernel.
    Fitted scores are posterior means of expit(x'beta) over retained draws.
    """
    x, z = _check_inputs(x, z)
    n, p = x.shape
    design = np.column_stack([np.ones(n), x])
    prior_prec = np.ones(p + 1)
    prior_prec[0] = 1.0 / _INTERCEPT_PRIOR_SD**2

    # Posterior mode by damped Newton; always exists thanks to the prior.
    beta = np.zeros(p + 1)
    for _ in range(50):
        prob = expit(design @ beta)
        grad = design.T @ (z - prob) - prior_prec * beta
        w = prob * (1.0 - prob)
        hess = design.T @ (design * w[:, None]) + np.diag(prior_prec)
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    prob = expit(design @ beta)
    w = prob * (1.0 - prob)
    hess = design.T @ (design * w[:, None]) + np.diag(prior_prec)
    chol = np.linalg.cholesky(np.linalg.inv(hess))

    rng = np.random.default_rng(seed)
    log_scale = math.log(2.38 / math.sqrt(p + 1))
    current = beta.copy()
    current_lp = _log_posterior(design, z, current, prior_prec)
    kept = np.empty((draws, p + 1))
    accepts_total = 0
    batch_accepts = 0
    for it in range(burn_in + draws):
        proposal = current + math.exp(log_scale) * (chol @ rng.standard_normal(p + 1))
        lp = _log_posterior(design, z, proposal, prior_prec)
        if math.log(rng.random()) < lp - current_lp:
            current, current_lp = proposal, lp
            batch_accepts += 1
            if it >= burn_in:
                accepts_total += 1
        if it < burn_in and (it + 1) % 50 == 0:
            rate = batch_accepts / 50.0
            log_scale += 0.5 * (rate - target_acceptance)
            batch_accepts = 0
        if it >= burn_in:
            kept[it - burn_in] = current

    acceptance = accepts_total / draws
    if not 0.05 <= acceptance <= 0.95:
        warnings.warn(f"Metropolis acceptance rate {acceptance:.3f} outside [0.05, 0.95]", stacklevel=2)
    scores = _clip_scores(expit(kept @ design.T).mean(axis=0))
    return PropensityFit(
        method=BAYES,
        scores=scores,
        beta=kept.mean(axis=0),
        beta_draws=kept,
        diagnostics={"acceptance": acceptance, "draws": draws, "burn_in": burn_in, "seed": seed},
    )


def fit_bart_propensity(x: np.ndarray, z: np.ndarray, params=None, seed: int = 0) -> PropensityFit:
    """Sum-of-trees probit propensity fit; scores are posterior means."""
    from . import bart

    x, z = _check_inputs(x, z)
    fit = bart.fit_bart_binary(x, z.astype(int), params=params, seed=seed)
    scores = _clip_scores(fit.in_sample_probs.mean(axis=0))
    return PropensityFit(method=BART, scores=scores, forest=fit, diagnostics={"seed": seed})


def predict(fit: PropensityFit, x: np.ndarray) -> np.ndarray:
    """Score new subjects with a fitted model (method-consistent).

    For point-estimate methods this is expit(x'beta); for bayes the mean of
    expit over retained draws; for bart the posterior-mean probit probability.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if fit.method in (MLE, L1):
        scores = expit(fit.beta[0] + x @ fit.beta[1:])
    elif fit.method == BAYES:
        eta = fit.beta_draws[:, 0][:, None] + fit.beta_draws[:, 1:] @ x.T
        scores = expit(eta).mean(axis=0)
    elif fit.method == BART:
        from . import bart

        scores = bart.bart_predict_proba(fit.forest, x).mean(axis=0)
    else:
        raise ValueError(f"unknown method {fit.method!r}")
    scores = _clip_scores(scores)
    return scores[0] if single else scores
