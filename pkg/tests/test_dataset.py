import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchstudy.dataset import (
    BINARY,
    CONTINUOUS,
    Covariate,
    CovariateSchema,
    GeneratorConfig,
    LoadOptions,
    SchemaError,
    SubjectTable,
    ValidationError,
    attrition_check,
    augment_missingness,
    drop_missingness_determined,
    generate_synthetic,
    load_subjects,
    save_subjects,
    scale_covariates,
    tables_equal,
)
from matchstudy.propensity import fit_mle
from util import make_table

SCHEMA2 = CovariateSchema((Covariate("x1", CONTINUOUS), Covariate("x2", BINARY)))
OPTS = LoadOptions(treatment_column="treated", stratum_column="stratum")


def write_csv(path, text):
    path.write_text(text)
    return str(path)


class TestLoadSubjects:
    def test_parses_clean_file(self, tmp_path):
        path = write_csv(
            tmp_path / "t.csv",
            "id,treated,stratum,x1,x2\na,1,s1,0.5,1\nb,0,s1,-0.25,0\nc,0,s2,1.5,1\n",
        )
        table = load_subjects(path, SCHEMA2, OPTS)
        assert table.n == 3
        assert table.ids == ("a", "b", "c")
        assert not table.covariate_missing.any()
        np.testing.assert_array_equal(table.z, [1, 0, 0])
        assert table.covariates[1, 0] == -0.25

    def test_missing_token_sets_flag(self, tmp_path):
        path = write_csv(
            tmp_path / "t.csv",
            "id,treated,stratum,x1,x2\na,1,s1,NA,1\nb,0,s1,2.0,0\n",
        )
        table = load_subjects(path, SCHEMA2, OPTS)
        assert table.covariate_missing[0, 0]
        assert not table.covariate_missing[1, 0]
        assert np.isnan(table.covariates[0, 0])

    def test_absent_treatment_column_names_it(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", "id,stratum,x1,x2\na,s1,0.5,1\n")
        with pytest.raises(SchemaError, match="treated"):
            load_subjects(path, SCHEMA2, OPTS)

    def test_non_binary_treatment_reports_row(self, tmp_path):
        path = write_csv(
            tmp_path / "t.csv",
            "id,treated,stratum,x1,x2\na,1,s1,0.5,1\nb,2,s1,0.5,0\n",
        )
        with pytest.raises(ValidationError, match="row 1"):
            load_subjects(path, SCHEMA2, OPTS)

    def test_save_load_round_trip_is_bit_identical(self, tmp_path):
        rng = np.random.default_rng(5)
        table = make_table(
            z=rng.integers(0, 2, 20),
            covariates=rng.normal(size=(20, 2)),
            outcomes=rng.normal(size=(20, 1)),
            outcome_names=("y",),
            aux={"group": tuple("gh"[i % 2] for i in range(20))},
        )
        opts = dataclasses.replace(OPTS, outcome_columns=("y",), aux_columns=("group",))
        p1 = tmp_path / "a.csv"
        save_subjects(table, str(p1), opts)
        loaded = load_subjects(str(p1), SCHEMA2, opts)
        assert tables_equal(table, loaded)
        p2 = tmp_path / "b.csv"
        save_subjects(loaded, str(p2), opts)
        assert p1.read_bytes() == p2.read_bytes()


class TestScaleCovariates:
    def test_two_point_column(self):
        # sample sd of (1, 3) is sqrt(2), so the scaled pair is +-1/(2 sqrt 2)
        table = make_table(z=[0, 1], covariates=[[1.0], [3.0]])
        scaled, report = scale_covariates(table, CovariateSchema((Covariate("x1", CONTINUOUS),)))
        np.testing.assert_allclose(scaled.covariates[:, 0], [-0.5 / np.sqrt(2), 0.5 / np.sqrt(2)])
        assert abs(scaled.covariates[:, 0].std(ddof=1) - 0.5) < 1e-12
        assert report.columns[0].scaled

    def test_five_point_column_exact_values(self):
        # mean 2, sample sd sqrt(2.5): scaled values are (-2,-1,0,1,2)/sqrt(10)
        table = make_table(z=[0, 1, 0, 1, 0], covariates=[[0.0], [1.0], [2.0], [3.0], [4.0]])
        scaled, _ = scale_covariates(table, CovariateSchema((Covariate("x1", CONTINUOUS),)))
        expected = np.array([-2.0, -1.0, 0.0, 1.0, 2.0]) / np.sqrt(10.0)
        np.testing.assert_allclose(scaled.covariates[:, 0], expected, atol=1e-12)

    def test_constant_column_flagged_not_scaled(self):
        table = make_table(z=[0, 1, 0], covariates=[[2.0], [2.0], [2.0]])
        scaled, report = scale_covariates(table, CovariateSchema((Covariate("x1", CONTINUOUS),)))
        np.testing.assert_array_equal(scaled.covariates[:, 0], [2.0, 2.0, 2.0])
        assert report.zero_variance == ("x1",)

    def test_recomputed_moments_after_transform(self):
        # mean 2, sd sqrt(2.5) variants: verify the post-transform moments
        table = make_table(z=[0, 1, 0, 1, 0], covariates=[[0.0], [1.0], [2.0], [3.0], [4.0]])
        scaled, _ = scale_covariates(table, CovariateSchema((Covariate("x1", CONTINUOUS),)))
        col = scaled.covariates[:, 0]
        assert abs(col.mean()) < 1e-10
        assert abs(col.std(ddof=1) - 0.5) < 1e-10

    def test_binary_columns_untouched(self):
        table = make_table(z=[0, 1, 0], covariates=[[1.0, 1.0], [3.0, 0.0], [5.0, 1.0]])
        scaled, _ = scale_covariates(table, SCHEMA2)
        np.testing.assert_array_equal(scaled.covariates[:, 1], [1.0, 0.0, 1.0])

    @given(st.integers(0, 2**32 - 1), st.integers(3, 40))
    @settings(max_examples=40, deadline=None)
    def test_property_scaled_moments(self, seed, n):
        rng = np.random.default_rng(seed)
        values = rng.normal(loc=rng.normal() * 10, scale=rng.uniform(0.1, 9), size=n)
        table = make_table(z=[i % 2 for i in range(n)], covariates=values)
        scaled, _ = scale_covariates(table, CovariateSchema((Covariate("x1", CONTINUOUS),)))
        col = scaled.covariates[:, 0]
        assert abs(col.mean()) < 1e-10
        assert abs(col.std(ddof=1) - 0.5) < 1e-10


class TestAugmentMissingness:
    def test_mean_imputation_with_indicator(self):
        table = make_table(z=[0, 1, 0], covariates=[[1.0], [np.nan], [3.0]])
        out = augment_missingness(table)
        assert out.covariate_names == ("x1", "x1__missing")
        np.testing.assert_array_equal(out.covariates[:, 0], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(out.covariates[:, 1], [0.0, 1.0, 0.0])
        assert not out.covariate_missing.any()

    def test_no_missing_is_identity(self):
        table = make_table(z=[0, 1], covariates=[[1.0], [2.0]])
        assert augment_missingness(table) is table

    def test_binary_mode_imputation(self):
        table = make_table(z=[0, 1, 0, 1], covariates=[[1.0], [1.0], [0.0], [np.nan]])
        out = augment_missingness(table)
        np.testing.assert_array_equal(out.covariates[:, 0], [1.0, 1.0, 0.0, 1.0])
        np.testing.assert_array_equal(out.covariates[:, 1], [0.0, 0.0, 0.0, 1.0])

    def test_binary_mode_tie_goes_to_zero(self):
        table = make_table(z=[0, 1, 0], covariates=[[1.0], [0.0], [np.nan]])
        out = augment_missingness(table)
        assert out.covariates[2, 0] == 0.0

    def test_all_missing_column_errors(self):
        table = make_table(z=[0, 1], covariates=[[np.nan], [np.nan]])
        with pytest.raises(ValidationError, match="x1"):
            augment_missingness(table)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        covs = rng.normal(size=(12, 3))
        covs[rng.random(covs.shape) < 0.25] = np.nan
        if np.isnan(covs).all(axis=0).any():
            covs[0] = 0.0
        table = make_table(z=[i % 2 for i in range(12)], covariates=covs)
        once = augment_missingness(table)
        twice = augment_missingness(once)
        assert tables_equal(once, twice)


class TestDropMissingnessDetermined:
    def _table(self, z, indicator_cols, names):
        covs = np.column_stack([np.asarray(c, dtype=float) for c in indicator_cols])
        return make_table(
            z=z,
            covariates=covs,
            covariate_names=names,
            covariate_missing=np.zeros_like(covs, dtype=bool),
        )

    def test_all_control_indicator_drops_and_keeps_column(self):
        table = self._table([1, 0, 0, 0], [[0, 1, 1, 0]], ("x1__missing",))
        out, dropped = drop_missingness_determined(table)
        assert out.ids == ("s000", "s003")
        assert dropped == (("s001", "x1__missing"), ("s002", "x1__missing"))
        assert "x1__missing" in out.covariate_names
        assert not out.covariates[:, 0].any()

    def test_mixed_arms_drop_nobody(self):
        table = self._table([1, 0, 0, 1], [[0, 1, 0, 1]], ("x1__missing",))
        out, dropped = drop_missingness_determined(table)
        assert out.n == 4 and dropped == ()

    def test_overlapping_indicators_drop_union_with_pair_ledger(self):
        # 6 subjects; both indicators point only at controls; s2 is flagged by both
        table = self._table(
            [1, 1, 0, 0, 0, 0],
            [[0, 0, 1, 1, 0, 0], [0, 0, 1, 0, 1, 0]],
            ("a__missing", "b__missing"),
        )
        out, dropped = drop_missingness_determined(table)
        assert out.ids == ("s000", "s001", "s005")
        assert set(dropped) == {
            ("s002", "a__missing"),
            ("s003", "a__missing"),
            ("s002", "b__missing"),
            ("s004", "b__missing"),
        }
        assert len(dropped) == 4

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_never_drops_subject_without_missingness(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(15, 2))
        raw[rng.random(raw.shape) < 0.3] = np.nan
        raw[0] = 0.0  # keep both columns partially observed
        table = augment_missingness(make_table(z=rng.integers(0, 2, 15), covariates=raw))
        flagged = {
            table.ids[i]
            for j, name in enumerate(table.covariate_names)
            if name.endswith("__missing")
            for i in np.flatnonzero(table.covariates[:, j] == 1.0)
        }
        _, dropped = drop_missingness_determined(table)
        assert {sid for sid, _ in dropped} <= flagged


class TestAttritionCheck:
    def test_all_observed_is_an_error(self):
        table = make_table(
            z=[0, 1],
            covariates=[[0.0], [1.0]],
            outcomes=[[1.0], [2.0]],
            outcome_names=("y",),
        )
        with pytest.raises(ValidationError):
            attrition_check(table, "y")

    def test_availability_equal_to_treatment_flags_separation(self):
        n = 40
        rng = np.random.default_rng(0)
        z = np.array([0, 1] * (n // 2))
        y = rng.normal(size=(n, 1))
        y[z == 1] = np.nan
        table = make_table(z=z, covariates=rng.normal(size=(n, 2)), outcomes=y, outcome_names=("y",))
        res = attrition_check(table, "y")
        assert res.separation
        assert np.isnan(res.p)

    def test_null_missingness_gives_unremarkable_p(self):
        rng = np.random.default_rng(11)
        n = 2000
        z = rng.integers(0, 2, n)
        y = rng.normal(size=(n, 1))
        y[rng.random(n) < 0.1] = np.nan
        table = make_table(z=z, covariates=rng.normal(size=(n, 3)), outcomes=y, outcome_names=("y",))
        res = attrition_check(table, "y")
        assert not res.separation
        assert res.p > 0.001


class TestGenerateSynthetic:
    def test_same_seed_identical(self):
        cfg = GeneratorConfig(n=200)
        a = generate_synthetic(cfg, seed=3)
        b = generate_synthetic(cfg, seed=3)
        assert tables_equal(a.table, b.table)
        assert a.true_propensity.tolist() == b.true_propensity.tolist()

    def test_emits_truth(self):
        from matchstudy.dataset import OutcomeModel

        cfg = GeneratorConfig(n=100, outcomes=(OutcomeModel(name="y", effect=0.7),))
        cohort = generate_synthetic(cfg, seed=0)
        assert cohort.true_effects["y"] == 0.7
        assert cohort.true_propensity.shape == (100,)
        # additive-effect construction: observed treated outcome = baseline + effect
        table = cohort.table
        treated = table.z == 1
        np.testing.assert_allclose(
            table.outcomes[treated, 0], cohort.baseline["y"][treated] + 0.7
        )

    def test_logistic_model_recovered_at_scale(self):
        coefs = (0.5, -0.4, 0.3, 0.2, 0.4, -0.3)
        cfg = GeneratorConfig(n=10_000, propensity_intercept=-0.3, propensity_coefs=coefs)
        cohort = generate_synthetic(cfg, seed=7)
        table = cohort.table
        fit = fit_mle(table.covariates, table.z)
        # asymptotic covariance = inverse Fisher information at the fit
        design = np.column_stack([np.ones(table.n), table.covariates])
        probs = 1.0 / (1.0 + np.exp(-design @ fit.beta))
        info = design.T @ (design * (probs * (1 - probs))[:, None])
        se = np.sqrt(np.diag(np.linalg.inv(info)))
        truth = np.concatenate([[cfg.propensity_intercept], coefs])
        assert np.all(np.abs(fit.beta - truth) < 3 * se)


class TestSubjectTable:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValidationError, match="unique"):
            make_table(z=[0, 1], covariates=[[0.0], [1.0]], ids=("a", "a"))

    def test_subset_keeps_alignment(self):
        table = make_table(
            z=[0, 1, 0],
            covariates=[[1.0], [2.0], [3.0]],
            outcomes=[[5.0], [6.0], [7.0]],
            outcome_names=("y",),
            aux={"group": ("g", "h", "g")},
        )
        sub = table.subset(np.array([True, False, True]))
        assert sub.ids == ("s000", "s002")
        assert sub.aux["group"] == ("g", "g")
        np.testing.assert_array_equal(sub.outcomes[:, 0], [5.0, 7.0])
