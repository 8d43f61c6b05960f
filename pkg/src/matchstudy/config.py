"""Declarative study configuration.

One JSON file drives the whole pipeline: data location and schema, the four
comparison definitions, estimator list, matching/inference/sensitivity
parameters, and (optionally) the synthetic-cohort recipe used by the
``simulate`` subcommand. Unknown keys are rejected so config typos surface
as validation errors instead of silently taking defaults.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import (
    BINARY,
    CONTINUOUS,
    Covariate,
    CovariateSchema,
    GeneratorConfig,
    LoadOptions,
    OutcomeModel,
    ValidationError,
)
from .propensity import METHOD_ORDER

MAX_CONTROLS = 15


@dataclass(frozen=True)
class OutcomeSpec:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, BINARY):
            raise ValidationError(f"outcome {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class ComparisonSpec:
    """One comparison's arm definitions.

    ``treated_groups`` None means the cohort's actual treated arm; a label
    list instead draws the pseudo-treated arm from those control subgroups
    (comparison 4). ``control_groups`` None means every remaining control.
    """

    name: str
    treated_groups: tuple[str, ...] | None = None
    control_groups: tuple[str, ...] | None = None


@dataclass(frozen=True)
class MatchingParams:
    max_controls: int = MAX_CONTROLS
    caliper_width_sd: float = 0.2
    caliper_penalty: float | None = None

    def __post_init__(self):
        if not 1 <= self.max_controls <= MAX_CONTROLS:
            raise ValidationError(f"max_controls must be in 1..{MAX_CONTROLS}")
        if self.caliper_width_sd <= 0:
            raise ValidationError("caliper_width_sd must be positive")


@dataclass(frozen=True)
class InferenceParams:
    alpha: float = 0.05
    adjustment: str = "ols"
    mode: str = "normal-approx"
    n_draws: int = 100_000
    grid: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must be in (0, 1)")
        if self.adjustment not in ("none", "ols", "bart"):
            raise ValidationError(f"unknown adjustment {self.adjustment!r}")
        if self.mode not in ("auto", "exact", "monte-carlo", "normal-approx"):
            raise ValidationError(f"unknown inference mode {self.mode!r}")


@dataclass(frozen=True)
class SensitivityParams:
    start: float = 1.0
    stop: float = 3.0
    step: float = 0.05

    def __post_init__(self):
        if self.start != 1.0 or self.stop <= self.start or self.step <= 0:
            raise ValidationError("sensitivity grid must start at 1 and increase")

    def grid(self) -> np.ndarray:
        count = int(round((self.stop - self.start) / self.step)) + 1
        return np.linspace(self.start, self.stop, count)


@dataclass(frozen=True)
class StudyConfig:
    data: str = "cohort.csv"
    output_dir: str = "out"
    seed: int = 0
    id_column: str = "id"
    treatment_column: str = "treated"
    stratum_column: str = "stratum"
    group_column: str = "group"
    missing_token: str = "NA"
    covariates: tuple[Covariate, ...] = ()
    primary_outcome: OutcomeSpec = field(default_factory=lambda: OutcomeSpec("y", CONTINUOUS))
    secondary_outcomes: tuple[OutcomeSpec, ...] = ()
    comparisons: tuple[ComparisonSpec, ...] = ()
    propensity_methods: tuple[str, ...] = METHOD_ORDER
    matching: MatchingParams = field(default_factory=MatchingParams)
    inference: InferenceParams = field(default_factory=InferenceParams)
    sensitivity: SensitivityParams = field(default_factory=SensitivityParams)
    equivalence_margin_sd: float = 0.2
    simulate: GeneratorConfig | None = None

    def __post_init__(self):
        if not self.covariates:
            raise ValidationError("config lists no covariates")
        if not self.comparisons:
            raise ValidationError("config lists no comparisons")
        names = [c.name for c in self.comparisons]
        if len(set(names)) != len(names):
            raise ValidationError("comparison names must be unique")
        for m in self.propensity_methods:
            if m not in METHOD_ORDER:
                raise ValidationError(f"unknown propensity method {m!r}")
        if not self.propensity_methods:
            raise ValidationError("config lists no propensity methods")
        if self.equivalence_margin_sd < 0:
            raise ValidationError("equivalence_margin_sd must be nonnegative")
        dup = {o.name for o in self.secondary_outcomes} & {self.primary_outcome.name}
        if dup:
            raise ValidationError(f"outcome listed as both primary and secondary: {sorted(dup)}")

    @property
    def schema(self) -> CovariateSchema:
        return CovariateSchema(self.covariates)

    @property
    def outcome_specs(self) -> tuple[OutcomeSpec, ...]:
        return (self.primary_outcome,) + self.secondary_outcomes

    @property
    def load_options(self) -> LoadOptions:
        return LoadOptions(
            treatment_column=self.treatment_column,
            stratum_column=self.stratum_column,
            id_column=self.id_column,
            missing_token=self.missing_token,
            outcome_columns=tuple(o.name for o in self.outcome_specs),
            aux_columns=(self.group_column,),
        )


# ---------------------------------------------------------------------------
# JSON (de)serialization
# ---------------------------------------------------------------------------


def _parse_covariate(obj: dict) -> Covariate:
    _expect_keys(obj, {"name", "kind"}, {"levels"}, "covariate")
    levels = tuple(obj["levels"]) if "levels" in obj else ()
    return Covariate(obj["name"], obj["kind"], levels)


def _parse_outcome(obj: dict) -> OutcomeSpec:
    _expect_keys(obj, {"name", "kind"}, set(), "outcome")
    return OutcomeSpec(obj["name"], obj["kind"])


def _parse_comparison(obj: dict) -> ComparisonSpec:
    _expect_keys(obj, {"name"}, {"treated_groups", "control_groups"}, "comparison")

    def groups(key):
        value = obj.get(key)
        return None if value is None else tuple(value)

    return ComparisonSpec(obj["name"], groups("treated_groups"), groups("control_groups"))


def _parse_outcome_model(obj: dict) -> OutcomeModel:
    allowed = {"name", "kind", "intercept", "coefs", "effect", "noise_sd", "missing_rate"}
    _expect_keys(obj, {"name"}, allowed - {"name"}, "simulate outcome")
    kwargs = dict(obj)
    if "coefs" in kwargs:
        kwargs["coefs"] = tuple(kwargs["coefs"])
    return OutcomeModel(**kwargs)


def _parse_simulate(obj: dict) -> GeneratorConfig:
    allowed = {
        "n",
        "n_continuous",
        "n_binary",
        "propensity_intercept",
        "propensity_coefs",
        "outcomes",
        "strata",
        "strata_probs",
        "covariate_missing_rate",
        "control_groups",
        "control_group_probs",
        "treated_group_label",
    }
    _expect_keys(obj, {"n"}, allowed - {"n"}, "simulate")
    kwargs = dict(obj)
    for key in ("propensity_coefs", "strata", "strata_probs", "control_groups", "control_group_probs"):
        if kwargs.get(key) is not None and key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if "outcomes" in kwargs:
        kwargs["outcomes"] = tuple(_parse_outcome_model(o) for o in kwargs["outcomes"])
    return GeneratorConfig(**kwargs)


def _expect_keys(obj: dict, required: set, optional: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: expected an object, got {type(obj).__name__}")
    missing = required - obj.keys()
    unknown = obj.keys() - required - optional
    if missing:
        raise ValidationError(f"{where}: missing keys {sorted(missing)}")
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")


_TOP_REQUIRED: set = set()
_TOP_OPTIONAL = {
    "data",
    "output_dir",
    "seed",
    "columns",
    "covariates",
    "primary_outcome",
    "secondary_outcomes",
    "comparisons",
    "propensity_methods",
    "matching",
    "inference",
    "sensitivity",
    "equivalence_margin_sd",
    "simulate",
}


def config_from_dict(obj: dict) -> StudyConfig:
    _expect_keys(obj, _TOP_REQUIRED, _TOP_OPTIONAL, "config")
    base = default_config_dict()
    columns = dict(base["columns"])
    columns.update(obj.get("columns", {}))
    _expect_keys(columns, set(), {"id", "treatment", "stratum", "group", "missing_token"}, "columns")

    def section(name, parser, default):
        if name not in obj:
            return default
        merged = dataclasses.asdict(default)
        merged.update(obj[name])
        return parser(**merged)

    matching = section("matching", MatchingParams, MatchingParams())
    inference = section("inference", _inference_params, InferenceParams())
    sensitivity = section("sensitivity", SensitivityParams, SensitivityParams())

    covs = obj.get("covariates", base["covariates"])
    outcomes = obj.get("primary_outcome", base["primary_outcome"])
    secondary = obj.get("secondary_outcomes", base["secondary_outcomes"])
    comparisons = obj.get("comparisons", base["comparisons"])
    simulate = obj.get("simulate", base["simulate"])
    return StudyConfig(
        data=obj.get("data", base["data"]),
        output_dir=obj.get("output_dir", base["output_dir"]),
        seed=int(obj.get("seed", base["seed"])),
        id_column=columns["id"],
        treatment_column=columns["treatment"],
        stratum_column=columns["stratum"],
        group_column=columns["group"],
        missing_token=columns["missing_token"],
        covariates=tuple(_parse_covariate(c) for c in covs),
        primary_outcome=_parse_outcome(outcomes),
        secondary_outcomes=tuple(_parse_outcome(o) for o in secondary),
        comparisons=tuple(_parse_comparison(c) for c in comparisons),
        propensity_methods=tuple(obj.get("propensity_methods", base["propensity_methods"])),
        matching=matching,
        inference=inference,
        sensitivity=sensitivity,
        equivalence_margin_sd=float(obj.get("equivalence_margin_sd", base["equivalence_margin_sd"])),
        simulate=None if simulate is None else _parse_simulate(simulate),
    )


def _inference_params(alpha=0.05, adjustment="ols", mode="normal-approx", n_draws=100_000, grid=None):
    return InferenceParams(
        alpha=alpha,
        adjustment=adjustment,
        mode=mode,
        n_draws=int(n_draws),
        grid=None if grid is None else tuple(float(g) for g in grid),
    )


def load_config(path: str) -> StudyConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path}: invalid JSON ({exc})") from exc
    return config_from_dict(obj)


def default_config_dict() -> dict:
    """The full default configuration, as written by --print-defaults.

    The simulate block and the study block agree, so the simulate and run
    subcommands compose without edits: four continuous plus two binary
    covariates, a continuous primary outcome with a true shift of 0.5, one
    binary and one continuous secondary outcome, two grade-band strata, and
    the two control subgroups that define comparisons 2 through 4.
    """
    return {
        "data": "cohort.csv",
        "output_dir": "out",
        "seed": 0,
        "columns": {
            "id": "id",
            "treatment": "treated",
            "stratum": "stratum",
            "group": "group",
            "missing_token": "NA",
        },
        "covariates": [
            {"name": "x1", "kind": CONTINUOUS},
            {"name": "x2", "kind": CONTINUOUS},
            {"name": "x3", "kind": CONTINUOUS},
            {"name": "x4", "kind": CONTINUOUS},
            {"name": "b1", "kind": BINARY},
            {"name": "b2", "kind": BINARY},
        ],
        "primary_outcome": {"name": "y", "kind": CONTINUOUS},
        "secondary_outcomes": [
            {"name": "y_bin", "kind": BINARY},
            {"name": "y_aux", "kind": CONTINUOUS},
        ],
        "comparisons": [
            {"name": "comparison-1", "treated_groups": None, "control_groups": None},
            {"name": "comparison-2", "treated_groups": None, "control_groups": ["sport"]},
            {"name": "comparison-3", "treated_groups": None, "control_groups": ["non-sport"]},
            {"name": "comparison-4", "treated_groups": ["sport"], "control_groups": ["non-sport"]},
        ],
        "propensity_methods": list(METHOD_ORDER),
        "matching": {"max_controls": 15, "caliper_width_sd": 0.2, "caliper_penalty": None},
        "inference": {
            "alpha": 0.05,
            "adjustment": "ols",
            "mode": "normal-approx",
            "n_draws": 100_000,
            "grid": None,
        },
        "sensitivity": {"start": 1.0, "stop": 3.0, "step": 0.05},
        "equivalence_margin_sd": 0.2,
        "simulate": {
            "n": 500,
            "n_continuous": 4,
            "n_binary": 2,
            "propensity_intercept": -0.6,
            "propensity_coefs": [0.5, -0.4, 0.3, 0.0, 0.4, -0.3],
            "outcomes": [
                {"name": "y", "kind": CONTINUOUS, "coefs": [0.4, 0.3, -0.2, 0.1, 0.2, 0.0], "effect": 0.5},
                {"name": "y_bin", "kind": BINARY, "coefs": [0.3, 0.0, 0.2, 0.0, 0.0, 0.1], "effect": 0.0},
                {
                    "name": "y_aux",
                    "kind": CONTINUOUS,
                    "coefs": [0.0, 0.2, 0.0, -0.3, 0.1, 0.0],
                    "effect": 0.2,
                    "missing_rate": 0.03,
                },
            ],
            "strata": ["band-1", "band-2"],
            "strata_probs": [0.55, 0.45],
            "covariate_missing_rate": 0.04,
            "control_groups": ["sport", "non-sport"],
            "control_group_probs": [0.45, 0.55],
            "treated_group_label": "football",
        },
    }


def default_config() -> StudyConfig:
    return config_from_dict(default_config_dict())

