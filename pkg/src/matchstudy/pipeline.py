"""Pipeline stages and report rendering.

Each stage reads its inputs from disk and writes text intermediates, so a
single ``run`` and a chain of stage subcommands produce identical bytes.
``stage_report`` only renders: every table it writes is derived from
intermediates, never recomputed from models.

Artifacts, all under the configured output directory:

* intermediates: ``cohort.csv``, ``propensity_<comp>_<method>.json``,
  ``match_<comp>_<method>.sets.txt`` / ``.ledger.csv``,
  ``balance_<comp>.json``, ``inference_<comp>.json``,
  ``sensitivity_<comp>.json``;
* reports: ``match_summary.csv``, ``composition.csv``,
  ``balance_<comp>.csv`` / ``.md``, ``inference.csv``, ``sensitivity.csv``,
  ``propensity_quantiles.csv``, ``decisions.txt``, ``manifest.txt``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import balance as balance_mod
from . import inference as inference_mod
from . import matching as matching_mod
from . import multiplicity as multiplicity_mod
from . import propensity as propensity_mod
from . import sensitivity as sensitivity_mod
from .config import ComparisonSpec, StudyConfig
from .dataset import (
    BINARY,
    SubjectTable,
    ValidationError,
    attrition_check,
    augment_missingness,
    generate_synthetic,
    load_subjects,
    save_subjects,
    scale_covariates,
)

METHOD_DISPLAY = {"mle": "MLE", "l1": "L1", "bayes": "Bayes", "bart": "BART"}

STAGES = ("simulate", "propensity", "match", "balance", "inference", "sensitivity", "report")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class MissingIntermediateError(FileNotFoundError):
    def __init__(self, path: str, producer: str):
        super().__init__(f"{path} not found; run the {producer} subcommand first")
        self.producer = producer


def derive_seed(base: int, *parts) -> int:
    """Stable per-task seed: hash of the base seed and the task labels."""
    text = "|".join([str(base), *map(str, parts)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Paths and low-level io
# ---------------------------------------------------------------------------


def _path(cfg: StudyConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


def _data_path(cfg: StudyConfig) -> str:
    # Relative data paths live inside the output directory.
    if os.path.isabs(cfg.data):
        return cfg.data
    return os.path.join(cfg.output_dir, cfg.data)


def _write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path: str, obj) -> None:
    _write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _read_json(path: str, producer: str) -> dict:
    if not os.path.exists(path):
        raise MissingIntermediateError(path, producer)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Cohort preparation and comparison arms
# ---------------------------------------------------------------------------


def load_cohort(cfg: StudyConfig) -> SubjectTable:
    path = _data_path(cfg)
    if not os.path.exists(path):
        raise MissingIntermediateError(path, "simulate")
    return load_subjects(path, cfg.schema, cfg.load_options)


def prepare(cfg: StudyConfig, table: SubjectTable) -> SubjectTable:
    """Impute missing covariates in raw units, then recenter/rescale.

    Imputation runs first so fill values are natural-unit means and the
    appended indicators stay binary. Runs on the full cohort once so every
    comparison sees the same prepared values.
    """
    augmented = augment_missingness(table)
    scaled, _ = scale_covariates(augmented, cfg.schema)
    return scaled


def comparison_table(cfg: StudyConfig, table: SubjectTable, comp: ComparisonSpec) -> SubjectTable:
    """Select this comparison's subjects and define its treatment indicator."""
    groups = np.asarray(table.aux.get(cfg.group_column, ("",) * table.n))
    if comp.treated_groups is None:
        treated_mask = table.z == 1
    else:
        treated_mask = (table.z == 0) & np.isin(groups, comp.treated_groups)
    if comp.control_groups is None:
        control_mask = (table.z == 0) & ~treated_mask
    else:
        control_mask = (table.z == 0) & np.isin(groups, comp.control_groups) & ~treated_mask
    if not treated_mask.any():
        raise ValidationError(f"{comp.name}: empty treated arm")
    if not control_mask.any():
        raise ValidationError(f"{comp.name}: empty control arm")
    keep = treated_mask | control_mask
    sub = table.subset(keep)
    new_z = treated_mask[keep].astype(np.int64)
    return dataclasses.replace(sub, z=new_z)


def _comparison_tables(cfg: StudyConfig) -> dict[str, SubjectTable]:
    full = prepare(cfg, load_cohort(cfg))
    return {comp.name: comparison_table(cfg, full, comp) for comp in cfg.comparisons}


# ---------------------------------------------------------------------------
# Stage: simulate
# ---------------------------------------------------------------------------


def stage_simulate(cfg: StudyConfig, seed: int | None = None) -> str:
    if cfg.simulate is None:
        raise ValidationError("config has no simulate block")
    cohort = generate_synthetic(cfg.simulate, seed=cfg.seed if seed is None else seed)
    path = _data_path(cfg)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_subjects(cohort.table, path, cfg.load_options)
    return path


# ---------------------------------------------------------------------------
# Stage: propensity
# ---------------------------------------------------------------------------


def _fit_one(cfg: StudyConfig, name: str, ct: SubjectTable, method: str):
    seed = derive_seed(cfg.seed, name, "propensity", method)
    x, z = ct.covariates, ct.z
    if method == "mle":
        fit = propensity_mod.fit_mle(x, z)
    elif method == "l1":
        fit = propensity_mod.fit_l1(x, z, seed=seed)
    elif method == "bayes":
        fit = propensity_mod.fit_bayes(x, z, seed=seed)
    elif method == "bart":
        fit = propensity_mod.fit_bart_propensity(x, z, seed=seed)
    else:
        raise ValidationError(f"unknown propensity method {method!r}")
    return fit, seed


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def stage_propensity(cfg: StudyConfig, threads: int = 1) -> None:
    tables = _comparison_tables(cfg)
    jobs = [(comp.name, method) for comp in cfg.comparisons for method in cfg.propensity_methods]

    def run(job):
        name, method = job
        return _fit_one(cfg, name, tables[name], method)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(run, jobs))
    else:
        fits = [run(job) for job in jobs]
    for (name, method), (fit, seed) in zip(jobs, fits):
        ct = tables[name]
        _write_json(
            _path(cfg, f"propensity_{name}_{method}.json"),
            {
                "comparison": name,
                "method": method,
                "seed": seed,
                "converged": bool(fit.converged),
                "beta": _jsonable(fit.beta) if fit.beta is not None else None,
                "diagnostics": _jsonable(fit.diagnostics),
                "ids": list(ct.ids),
                "scores": _jsonable(fit.scores),
            },
        )


def _load_scores(cfg: StudyConfig, name: str, method: str, ct: SubjectTable) -> tuple[np.ndarray, dict]:
    obj = _read_json(_path(cfg, f"propensity_{name}_{method}.json"), "propensity")
    if tuple(obj["ids"]) != ct.ids:
        raise ValidationError(f"propensity file for {name}/{method} does not align with the cohort")
    return np.asarray(obj["scores"], dtype=float), obj


# ---------------------------------------------------------------------------
# Stage: match
# ---------------------------------------------------------------------------


def stage_match(cfg: StudyConfig) -> None:
    tables = _comparison_tables(cfg)
    for comp in cfg.comparisons:
        ct = tables[comp.name]
        for method in cfg.propensity_methods:
            scores, _ = _load_scores(cfg, comp.name, method, ct)
            fit = propensity_mod.PropensityFit(method=method, scores=scores)
            result = matching_mod.build_match(ct, fit, _match_config(cfg, comp.name, method))
            base = f"match_{comp.name}_{method}"
            _write_text(
                _path(cfg, base + ".sets.txt"),
                "".join(f"{s.treated_id}: {','.join(s.control_ids)}\n" for s in result.sets),
            )
            _write_text(
                _path(cfg, base + ".ledger.csv"),
                "id,reason\n" + "".join(f"{sid},{reason}\n" for sid, reason in result.dropped),
            )


def _match_config(cfg: StudyConfig, name: str, method: str) -> matching_mod.MatchConfig:
    return matching_mod.MatchConfig(
        comparison=name,
        method=method,
        max_controls=cfg.matching.max_controls,
        caliper_width_sd=cfg.matching.caliper_width_sd,
        caliper_penalty=cfg.matching.caliper_penalty,
    )


def load_match(cfg: StudyConfig, name: str, method: str, ct: SubjectTable) -> matching_mod.MatchResult:
    """Rebuild a MatchResult from the two match files.

    The set line format carries only ids; stratum comes from the table and
    the interval is re-derived from the stored propensity scores, which is
    exactly how the matcher assigned it.
    """
    base = f"match_{name}_{method}"
    sets_path = _path(cfg, base + ".sets.txt")
    ledger_path = _path(cfg, base + ".ledger.csv")
    for p in (sets_path, ledger_path):
        if not os.path.exists(p):
            raise MissingIntermediateError(p, "match")
    scores, _ = _load_scores(cfg, name, method, ct)
    intervals = np.minimum(matching_mod.propensity_interval(scores), cfg.matching.max_controls)
    sets = []
    with open(sets_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            treated_id, _, rest = line.partition(": ")
            row = ct.row_of(treated_id)
            sets.append(
                matching_mod.MatchedSet(
                    treated_id=treated_id,
                    control_ids=tuple(rest.split(",")),
                    stratum=ct.stratum[row],
                    interval=int(intervals[row]),
                )
            )
    dropped = []
    with open(ledger_path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            line = line.strip()
            if line:
                sid, _, reason = line.partition(",")
                dropped.append((sid, reason))
    tallies = {
        matching_mod.REASON_MISSINGNESS: [0, 0],
        matching_mod.REASON_COMMON_SUPPORT: [0, 0],
    }
    for sid, reason in dropped:
        if reason in tallies:
            tallies[reason][0 if ct.z[ct.row_of(sid)] == 1 else 1] += 1
    counts = matching_mod.MatchCounts(
        n_miss_treated=tallies[matching_mod.REASON_MISSINGNESS][0],
        n_miss_control=tallies[matching_mod.REASON_MISSINGNESS][1],
        n_cs_treated=tallies[matching_mod.REASON_COMMON_SUPPORT][0],
        n_cs_control=tallies[matching_mod.REASON_COMMON_SUPPORT][1],
        n_matched_treated=len(sets),
        n_matched_control=sum(len(s.control_ids) for s in sets),
    )
    return matching_mod.MatchResult(
        comparison=name, method=method, sets=tuple(sets), dropped=tuple(dropped), counts=counts
    )


# ---------------------------------------------------------------------------
# Stage: balance
# ---------------------------------------------------------------------------


def stage_balance(cfg: StudyConfig) -> None:
    tables = _comparison_tables(cfg)
    for comp in cfg.comparisons:
        ct = tables[comp.name]
        per_method = {}
        candidates = []
        for method in cfg.propensity_methods:
            result = load_match(cfg, comp.name, method, ct)
            rows = balance_mod.balance_table(ct, result, schema=cfg.schema, expand_ordinal=True)
            n_imbalanced = balance_mod.count_imbalanced(rows)
            per_method[method] = {
                "rows": [dataclasses.asdict(r) for r in rows],
                "imbalanced": n_imbalanced,
                "dropped": result.n_dropped,
                "counts": dataclasses.asdict(result.counts),
                "n_sets": len(result.sets),
                "composition": {str(k): v for k, v in matching_mod.composition(result).items()},
            }
            candidates.append((n_imbalanced, result.n_dropped))
        chosen = balance_mod.select_match(candidates)
        _write_json(
            _path(cfg, f"balance_{comp.name}.json"),
            {
                "comparison": comp.name,
                "methods": list(cfg.propensity_methods),
                "per_method": per_method,
                "selected": cfg.propensity_methods[chosen.index],
                "meets_bar": bool(chosen.meets_bar),
            },
        )


def load_balance(cfg: StudyConfig, name: str) -> dict:
    return _read_json(_path(cfg, f"balance_{name}.json"), "balance")


# ---------------------------------------------------------------------------
# Stage: inference
# ---------------------------------------------------------------------------


def _outcomes_for(cfg: StudyConfig, comp_index: int):
    if comp_index == 0:
        return cfg.outcome_specs
    return (cfg.primary_outcome,)


def _test_suite(cfg: StudyConfig, ct: SubjectTable, result, outcome, seed: int) -> dict:
    """All inference artifacts for one comparison x outcome."""
    adjustment = cfg.inference.adjustment if outcome.kind != BINARY else "none"
    region = inference_mod.invert_tests(
        ct,
        result,
        outcome.name,
        grid=None if cfg.inference.grid is None else np.asarray(cfg.inference.grid),
        alpha=cfg.inference.alpha,
        adjustment=adjustment,
        mode=cfg.inference.mode,
        seed=seed,
        n_draws=cfg.inference.n_draws,
    )
    data = inference_mod.matched_arrays(ct, result, outcome.name)
    aligned_r, aligned_x = inference_mod.align_responses(data.r, data.z, data.sets, 0.0, data.x)
    resid, _ = inference_mod.covariance_adjust(aligned_r, aligned_x, adjustment, seed=seed)
    point = inference_mod.permutational_t_test(
        resid, data.z, data.sets, mode=cfg.inference.mode, n_draws=cfg.inference.n_draws, seed=seed
    )
    out = {
        "kind": outcome.kind,
        "adjustment": adjustment,
        "seed": seed,
        "outcome_sd": float(np.std(data.r, ddof=1)),
        "n_sets": len(data.sets),
        "excluded_sets": list(data.excluded_sets),
        "grid": _jsonable(region.grid),
        "grid_p": _jsonable(region.p_values),
        "accepted": _jsonable(region.accepted),
        "hull": None if region.hull is None else [region.hull[0], region.hull[1]],
        "non_monotone": bool(region.non_monotone),
        "point": {
            "statistic": point.statistic,
            "p_two_sided": point.p_two_sided,
            "p_upper": point.p_upper,
            "p_lower": point.p_lower,
            "method": point.method,
        },
    }
    if outcome.kind == BINARY:
        mh = inference_mod.mantel_haenszel(data.r, data.z, data.sets)
        clog = inference_mod.conditional_logistic(data.r, data.z, data.sets)
        out["mantel_haenszel"] = {
            "statistic": mh.statistic,
            "p_two_sided": mh.p_two_sided,
            "p_upper": mh.p_upper,
            "method": mh.method,
        }
        out["conditional_logistic"] = {
            "theta": clog.theta,
            "se": clog.se,
            "p": clog.p,
            "statistic": clog.statistic,
            "identified": clog.identified,
            "n_informative": clog.n_informative,
        }
        out["p_primary"] = mh.p_two_sided
    else:
        out["p_primary"] = point.p_two_sided
    return out


def stage_infer(cfg: StudyConfig) -> None:
    tables = _comparison_tables(cfg)
    for idx, comp in enumerate(cfg.comparisons):
        ct = tables[comp.name]
        selected = load_balance(cfg, comp.name)["selected"]
        result = load_match(cfg, comp.name, selected, ct)
        outcomes = {}
        for outcome in _outcomes_for(cfg, idx):
            seed = derive_seed(cfg.seed, comp.name, "inference", outcome.name)
            outcomes[outcome.name] = _test_suite(cfg, ct, result, outcome, seed)
        attrition = {}
        for outcome in _outcomes_for(cfg, idx):
            j = ct.outcome_index(outcome.name)
            if ct.outcome_missing[:, j].any():
                res = attrition_check(ct, outcome.name)
                attrition[outcome.name] = {
                    "coef": res.coef,
                    "p": res.p,
                    "separation": bool(res.separation),
                }
        _write_json(
            _path(cfg, f"inference_{comp.name}.json"),
            {"comparison": comp.name, "selected": selected, "outcomes": outcomes, "attrition": attrition},
        )


def load_inference(cfg: StudyConfig, name: str) -> dict:
    return _read_json(_path(cfg, f"inference_{name}.json"), "infer")


# ---------------------------------------------------------------------------
# Stage: sensitivity
# ---------------------------------------------------------------------------


def stage_sensitivity(cfg: StudyConfig) -> None:
    tables = _comparison_tables(cfg)
    grid = cfg.sensitivity.grid()
    for idx, comp in enumerate(cfg.comparisons):
        ct = tables[comp.name]
        selected = load_balance(cfg, comp.name)["selected"]
        result = load_match(cfg, comp.name, selected, ct)
        outcomes = {}
        for outcome in _outcomes_for(cfg, idx):
            data = inference_mod.matched_arrays(ct, result, outcome.name)
            if outcome.kind == BINARY:
                test = "mantel-haenszel"

                def p_of(g, _d=data):
                    return sensitivity_mod.sensitivity_mh(_d.r, _d.z, _d.sets, g).p_one_sided

            else:
                test = "residual"
                seed = derive_seed(cfg.seed, comp.name, "sensitivity", outcome.name)
                aligned_r, aligned_x = inference_mod.align_responses(data.r, data.z, data.sets, 0.0, data.x)
                resid, _ = inference_mod.covariance_adjust(
                    aligned_r, aligned_x, cfg.inference.adjustment, seed=seed
                )

                def p_of(g, _r=resid, _d=data):
                    return sensitivity_mod.sensitivity_residual(_r, _d.z, _d.sets, g).p_one_sided

            curve = sensitivity_mod.gamma_threshold(p_of, alpha=cfg.inference.alpha, gammas=grid)
            outcomes[outcome.name] = {
                "test": test,
                "gammas": _jsonable(curve.gammas),
                "p_upper": _jsonable(curve.p_values),
                "threshold": None if math.isnan(curve.threshold) else curve.threshold,
                "insignificant_at_one": bool(curve.insignificant_at_one),
                "beyond_grid": bool(curve.beyond_grid),
            }
        _write_json(
            _path(cfg, f"sensitivity_{comp.name}.json"),
            {"comparison": comp.name, "selected": selected, "outcomes": outcomes},
        )


def load_sensitivity(cfg: StudyConfig, name: str) -> dict:
    return _read_json(_path(cfg, f"sensitivity_{name}.json"), "sensitivity")


# ---------------------------------------------------------------------------
# Stage: report
# ---------------------------------------------------------------------------


def comparison_display(name: str) -> str:
    m = re.fullmatch(r"comparison-(\d+)", name)
    return f"Comparison {m.group(1)}" if m else name


def format_match_row(comparison: str, method: str, counts: matching_mod.MatchCounts, imbalanced: int) -> str:
    """One match-summary line in the published table's row format."""
    return (
        f"{comparison}, {method}: "
        f"n_miss {counts.n_miss} ({counts.n_miss_treated}/{counts.n_miss_control}), "
        f"n_cs {counts.n_cs} ({counts.n_cs_treated}/{counts.n_cs_control}), "
        f"n_total {counts.n_matched} ({counts.n_matched_treated}/{counts.n_matched_control}), "
        f"imbalanced {imbalanced}"
    )


def _fmt(x: float, digits: int = 4) -> str:
    return f"{x:.{digits}f}"


def _match_summary_csv(cfg: StudyConfig, balances: dict) -> str:
    header = (
        "comparison,method,selected,n_miss,n_miss_treated,n_miss_control,"
        "n_cs,n_cs_treated,n_cs_control,n_matched,n_matched_treated,n_matched_control,"
        "n_sets,imbalanced\n"
    )
    lines = [header]
    for comp in cfg.comparisons:
        info = balances[comp.name]
        for method in cfg.propensity_methods:
            entry = info["per_method"][method]
            c = entry["counts"]
            lines.append(
                ",".join(
                    str(v)
                    for v in (
                        comp.name,
                        method,
                        1 if method == info["selected"] else 0,
                        c["n_miss_treated"] + c["n_miss_control"],
                        c["n_miss_treated"],
                        c["n_miss_control"],
                        c["n_cs_treated"] + c["n_cs_control"],
                        c["n_cs_treated"],
                        c["n_cs_control"],
                        c["n_matched_treated"] + c["n_matched_control"],
                        c["n_matched_treated"],
                        c["n_matched_control"],
                        entry["n_sets"],
                        entry["imbalanced"],
                    )
                )
                + "\n"
            )
    return "".join(lines)


def _composition_csv(cfg: StudyConfig, balances: dict) -> str:
    names = [comp.name for comp in cfg.comparisons]
    lines = ["ratio," + ",".join(names) + "\n"]
    totals = {name: 0 for name in names}
    for k in range(1, matching_mod.MAX_CONTROLS + 1):
        row = [f"1:{k}"]
        for name in names:
            info = balances[name]
            count = info["per_method"][info["selected"]]["composition"].get(str(k), 0)
            totals[name] += count
            row.append(str(count))
        lines.append(",".join(row) + "\n")
    lines.append("sets," + ",".join(str(totals[name]) for name in names) + "\n")
    return "".join(lines)


def _balance_csv(rows: list[dict]) -> str:
    lines = [
        "covariate,pre_treated_mean,pre_control_mean,pre_sd_diff,"
        "post_treated_mean,post_control_mean,post_sd_diff,imbalanced\n"
    ]
    for r in rows:
        lines.append(
            ",".join(
                (
                    r["name"],
                    _fmt(r["treated_mean_pre"]),
                    _fmt(r["control_mean_pre"]),
                    _fmt(r["sd_diff_pre"]),
                    _fmt(r["treated_mean_post"]),
                    _fmt(r["control_mean_post"]),
                    _fmt(r["sd_diff_post"]),
                    "1" if r["imbalanced"] else "0",
                )
            )
            + "\n"
        )
    return "".join(lines)


def _balance_md(name: str, method: str, rows: list[dict]) -> str:
    lines = [
        f"# Balance: {comparison_display(name)} ({METHOD_DISPLAY.get(method, method)})\n",
        "\n",
        "| covariate | pre treated | pre control | pre sd-diff | post treated | post control | post sd-diff |\n",
        "| --- | --- | --- | --- | --- | --- | --- |\n",
    ]
    for r in rows:
        star = " *" if r["imbalanced"] else ""
        lines.append(
            f"| {r['name']} | {_fmt(r['treated_mean_pre'])} | {_fmt(r['control_mean_pre'])} "
            f"| {_fmt(r['sd_diff_pre'])} | {_fmt(r['treated_mean_post'])} "
            f"| {_fmt(r['control_mean_post'])} | {_fmt(r['sd_diff_post'])}{star} |\n"
        )
    lines.append("\n`*` marks a post-match standardized difference above 0.2 in absolute value.\n")
    return "".join(lines)


def _inference_csv(cfg: StudyConfig, inferences: dict) -> str:
    lines = ["comparison,outcome,test,tau0,statistic,p_two_sided,method,adjustment,seed\n"]
    for idx, comp in enumerate(cfg.comparisons):
        info = inferences[comp.name]
        for outcome in _outcomes_for(cfg, idx):
            o = info["outcomes"][outcome.name]
            point = o["point"]
            lines.append(
                f"{comp.name},{outcome.name},point,0.0,{point['statistic']!r},"
                f"{point['p_two_sided']!r},{point['method']},{o['adjustment']},{o['seed']}\n"
            )
            for tau0, p in zip(o["grid"], o["grid_p"]):
                lines.append(
                    f"{comp.name},{outcome.name},shift-grid,{tau0!r},,{p!r},"
                    f"{cfg.inference.mode},{o['adjustment']},{o['seed']}\n"
                )
            if "mantel_haenszel" in o:
                mh = o["mantel_haenszel"]
                lines.append(
                    f"{comp.name},{outcome.name},mantel-haenszel,,{mh['statistic']!r},"
                    f"{mh['p_two_sided']!r},{mh['method']},none,\n"
                )
            if "conditional_logistic" in o:
                cl = o["conditional_logistic"]
                lines.append(
                    f"{comp.name},{outcome.name},conditional-logistic,,{cl['theta']!r},"
                    f"{cl['p']!r},score-test,none,\n"
                )
    return "".join(lines)


def _sensitivity_csv(cfg: StudyConfig, sensitivities: dict) -> str:
    lines = ["comparison,outcome,test,gamma,p_upper\n"]
    for idx, comp in enumerate(cfg.comparisons):
        info = sensitivities[comp.name]
        for outcome in _outcomes_for(cfg, idx):
            o = info["outcomes"][outcome.name]
            for g, p in zip(o["gammas"], o["p_upper"]):
                lines.append(f"{comp.name},{outcome.name},{o['test']},{g:.2f},{p!r}\n")
    return "".join(lines)


def _quantiles_csv(cfg: StudyConfig, tables: dict) -> str:
    lines = ["comparison,method,arm,n,min,q25,median,q75,max\n"]
    for comp in cfg.comparisons:
        ct = tables[comp.name]
        for method in cfg.propensity_methods:
            scores, _ = _load_scores(cfg, comp.name, method, ct)
            for arm, mask in (("treated", ct.z == 1), ("control", ct.z == 0)):
                qs = np.quantile(scores[mask], [0.0, 0.25, 0.5, 0.75, 1.0])
                lines.append(
                    f"{comp.name},{method},{arm},{int(mask.sum())},"
                    + ",".join(repr(float(q)) for q in qs)
                    + "\n"
                )
    return "".join(lines)


def _run_procedure(cfg: StudyConfig, inferences: dict):
    """Apply the ordered stopping rule to the primary-outcome p-values."""
    if len(cfg.comparisons) != 4:
        return None, None
    names = [comp.name for comp in cfg.comparisons]
    primary = cfg.primary_outcome.name
    p = [inferences[name]["outcomes"][primary]["p_primary"] for name in names]
    alpha = cfg.inference.alpha
    labels = tuple(comparison_display(n) for n in names)
    eq = None
    if p[0] <= alpha and p[1] <= alpha and p[2] <= alpha:
        o4 = inferences[names[3]]["outcomes"][primary]
        margin = cfg.equivalence_margin_sd * o4["outcome_sd"]
        hull = o4["hull"]
        region = inference_mod.ConfidenceRegion(
            grid=np.asarray(o4["grid"]),
            p_values=np.asarray(o4["grid_p"]),
            accepted=np.asarray(o4["accepted"], dtype=bool),
            alpha=alpha,
            adjustment=o4["adjustment"],
            hull=None if hull is None else (hull[0], hull[1]),
            non_monotone=o4["non_monotone"],
        )
        eq = multiplicity_mod.equivalence_test(region, margin)
        proc = multiplicity_mod.ordered_procedure(p[0], p[1], p[2], eq, alpha=alpha, labels=labels)
    elif p[0] <= alpha:
        proc = multiplicity_mod.ordered_procedure(p[0], p[1], p[2], alpha=alpha, labels=labels)
    else:
        proc = multiplicity_mod.ordered_procedure(p[0], alpha=alpha, labels=labels)
    return proc, eq


def _decisions_text(cfg: StudyConfig, balances, inferences, sensitivities) -> str:
    alpha = cfg.inference.alpha
    out = ["study decision report\n", "=====================\n", "\n"]

    out.append("selected matches\n")
    for comp in cfg.comparisons:
        info = balances[comp.name]
        method = info["selected"]
        entry = info["per_method"][method]
        counts = matching_mod.MatchCounts(**entry["counts"])
        row = format_match_row(
            comparison_display(comp.name), METHOD_DISPLAY.get(method, method), counts, entry["imbalanced"]
        )
        bar = "" if info["meets_bar"] else "  [balance bar not met]"
        out.append(f"  {row}{bar}\n")
    out.append("\n")

    proc, eq = _run_procedure(cfg, inferences)
    out.append(f"ordered testing procedure (alpha = {alpha})\n")
    if proc is None:
        out.append("  skipped: the procedure is defined for exactly four comparisons\n")
    else:
        for d in proc.decisions:
            if not d.performed:
                out.append(f"  stage {d.stage}  {d.label}: not reached\n")
            elif d.stage < 3:
                verdict = "reject" if d.reject else "do not reject -> stop"
                out.append(f"  stage {d.stage}  {d.label}: p = {d.p!r}  {verdict}\n")
            else:
                out.append(f"  stage {d.stage}  {d.label}: equivalence {d.note}\n")
        if eq is not None:
            out.append(
                f"  equivalence margin = {eq.margin!r} "
                f"({cfg.equivalence_margin_sd} x outcome sd; configured choice)\n"
            )
    out.append("\n")

    out.append(f"confidence hulls, primary outcome (alpha = {alpha})\n")
    primary = cfg.primary_outcome.name
    for comp in cfg.comparisons:
        o = inferences[comp.name]["outcomes"][primary]
        hull = o["hull"]
        hull_text = "empty" if hull is None else f"[{hull[0]!r}, {hull[1]!r}]"
        flag = "  [non-monotone acceptance]" if o["non_monotone"] else ""
        out.append(f"  {comp.name}  {primary}: {hull_text}{flag}\n")
    out.append("\n")

    out.append(f"sensitivity thresholds (one-sided bound, alpha = {alpha})\n")
    for idx, comp in enumerate(cfg.comparisons):
        info = sensitivities[comp.name]
        for outcome in _outcomes_for(cfg, idx):
            o = info["outcomes"][outcome.name]
            if o["beyond_grid"]:
                text = f"beyond grid (> {cfg.sensitivity.stop:.2f})"
            elif o["insignificant_at_one"]:
                text = "1.00 (insignificant without hidden bias)"
            else:
                text = f"{o['threshold']:.2f}"
            out.append(f"  {comp.name}  {outcome.name} ({o['test']}): gamma* = {text}\n")
    out.append("\n")

    if cfg.secondary_outcomes:
        first = cfg.comparisons[0].name
        inf0 = inferences[first]["outcomes"]
        sens0 = sensitivities[first]["outcomes"]
        raw = [inf0[o.name]["p_primary"] for o in cfg.secondary_outcomes]
        adjusted, applied = multiplicity_mod.secondary_adjustment(np.asarray(raw), threshold=alpha)
        out.append(f"secondary outcomes ({first}; confidence intervals are marginal)\n")
        for j, o in enumerate(cfg.secondary_outcomes):
            entry = inf0[o.name]
            hull = entry["hull"]
            hull_text = "empty" if hull is None else f"[{hull[0]!r}, {hull[1]!r}]"
            bh = f"{adjusted[j]!r}" if applied else "-"
            so = sens0[o.name]
            if so["beyond_grid"]:
                gtext = f"beyond grid (> {cfg.sensitivity.stop:.2f})"
            else:
                gtext = f"{so['threshold']:.2f}"
            out.append(f"  {o.name}: raw p = {raw[j]!r}, bh p = {bh}, ci {hull_text}, gamma* = {gtext}\n")
        out.append(f"  bh adjustment applied: {'yes' if applied else 'no'}\n")
        out.append("\n")

    out.append("attrition checks (outcome missingness on covariates and treatment)\n")
    any_attrition = False
    for comp in cfg.comparisons:
        for outcome, res in inferences[comp.name]["attrition"].items():
            any_attrition = True
            if res["separation"]:
                out.append(f"  {comp.name}  {outcome}: separation, p-value unavailable\n")
            else:
                out.append(f"  {comp.name}  {outcome}: treatment coef = {res['coef']!r}, p = {res['p']!r}\n")
    if not any_attrition:
        out.append("  no missing outcomes\n")
    out.append("\n")

    out.append("excluded matched sets (missing outcome)\n")
    any_excluded = False
    for idx, comp in enumerate(cfg.comparisons):
        for outcome in _outcomes_for(cfg, idx):
            excluded = inferences[comp.name]["outcomes"][outcome.name]["excluded_sets"]
            if excluded:
                any_excluded = True
                out.append(f"  {comp.name}  {outcome.name}: {len(excluded)} sets ({', '.join(excluded)})\n")
    if not any_excluded:
        out.append("  none\n")
    return "".join(out)


def _manifest_text(cfg: StudyConfig, files: list[str]) -> str:
    out = [f"base seed {cfg.seed}\n"]
    for comp in cfg.comparisons:
        for method in cfg.propensity_methods:
            out.append(
                f"seed {comp.name} propensity {method} {derive_seed(cfg.seed, comp.name, 'propensity', method)}\n"
            )
    for idx, comp in enumerate(cfg.comparisons):
        for outcome in _outcomes_for(cfg, idx):
            out.append(
                f"seed {comp.name} inference {outcome.name} "
                f"{derive_seed(cfg.seed, comp.name, 'inference', outcome.name)}\n"
            )
    for comp in cfg.comparisons:
        selected = load_balance(cfg, comp.name)["selected"]
        out.append(f"selected {comp.name} {selected}\n")
    for name in sorted(files):
        out.append(f"sha256 {_sha256(os.path.join(cfg.output_dir, name))}  {name}\n")
    return "".join(out)


def _artifact_names(cfg: StudyConfig) -> list[str]:
    names = []
    data = _data_path(cfg)
    if os.path.dirname(data) == cfg.output_dir.rstrip("/"):
        names.append(os.path.basename(data))
    for comp in cfg.comparisons:
        for method in cfg.propensity_methods:
            names.append(f"propensity_{comp.name}_{method}.json")
            names.append(f"match_{comp.name}_{method}.sets.txt")
            names.append(f"match_{comp.name}_{method}.ledger.csv")
        names += [
            f"balance_{comp.name}.json",
            f"inference_{comp.name}.json",
            f"sensitivity_{comp.name}.json",
            f"balance_{comp.name}.csv",
            f"balance_{comp.name}.md",
        ]
    names += [
        "match_summary.csv",
        "composition.csv",
        "inference.csv",
        "sensitivity.csv",
        "propensity_quantiles.csv",
        "decisions.txt",
    ]
    return names


def stage_report(cfg: StudyConfig) -> None:
    tables = _comparison_tables(cfg)
    balances = {comp.name: load_balance(cfg, comp.name) for comp in cfg.comparisons}
    inferences = {comp.name: load_inference(cfg, comp.name) for comp in cfg.comparisons}
    sensitivities = {comp.name: load_sensitivity(cfg, comp.name) for comp in cfg.comparisons}

    _write_text(_path(cfg, "match_summary.csv"), _match_summary_csv(cfg, balances))
    _write_text(_path(cfg, "composition.csv"), _composition_csv(cfg, balances))
    for comp in cfg.comparisons:
        info = balances[comp.name]
        rows = info["per_method"][info["selected"]]["rows"]
        _write_text(_path(cfg, f"balance_{comp.name}.csv"), _balance_csv(rows))
        _write_text(_path(cfg, f"balance_{comp.name}.md"), _balance_md(comp.name, info["selected"], rows))
    _write_text(_path(cfg, "inference.csv"), _inference_csv(cfg, inferences))
    _write_text(_path(cfg, "sensitivity.csv"), _sensitivity_csv(cfg, sensitivities))
    _write_text(_path(cfg, "propensity_quantiles.csv"), _quantiles_csv(cfg, tables))
    _write_text(_path(cfg, "decisions.txt"), _decisions_text(cfg, balances, inferences, sensitivities))

    present = [n for n in _artifact_names(cfg) if os.path.exists(_path(cfg, n))]
    _write_text(_path(cfg, "manifest.txt"), _manifest_text(cfg, present))


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def _write_failure_manifest(cfg: StudyConfig, stage: str, error: Exception) -> None:
    try:
        lines = [f"FAILED at stage {stage}\n", f"error: {error}\n", "files written so far:\n"]
        for name in _artifact_names(cfg):
            path = _path(cfg, name)
            if os.path.exists(path):
                lines.append(f"sha256 {_sha256(path)}  {name}\n")
        _write_text(_path(cfg, "failure_manifest.txt"), "".join(lines))
    except OSError:
        pass  # reporting the original failure matters more


def run_pipeline(cfg: StudyConfig, threads: int = 1) -> str:
    """Run every stage in order; returns the output directory.

    Synthesizes the cohort first when the config carries a simulate block
    and the data file does not exist yet. On any stage failure a partial
    manifest naming the stage is written before the error propagates.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    stage = "simulate"
    try:
        if not os.path.exists(_data_path(cfg)):
            if cfg.simulate is None:
                raise MissingIntermediateError(_data_path(cfg), "simulate")
            stage_simulate(cfg)
        stage = "propensity"
        stage_propensity(cfg, threads=threads)
        stage = "match"
        stage_match(cfg)
        stage = "balance"
        stage_balance(cfg)
        stage = "inference"
        stage_infer(cfg)
        stage = "sensitivity"
        stage_sensitivity(cfg)
        stage = "report"
        stage_report(cfg)
    except Exception as exc:
        _write_failure_manifest(cfg, stage, exc)
        raise PipelineError(stage, str(exc)) from exc
    return cfg.output_dir
