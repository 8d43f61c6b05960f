import itertools

import numpy as np
import pytest
from scipy.special import expit, logit

from matchstudy.matching import (
    MatchConfig,
    MatchCounts,
    MatchingError,
    REASON_COMMON_SUPPORT,
    REASON_OPTIMAL_DISCARD,
    REASON_UNMATCHED,
    apply_caliper,
    build_match,
    composition,
    match_bucket,
    propensity_interval,
    rank_mahalanobis,
    trim_common_support,
)
from matchstudy.oracles import brute_force_bucket_cost, match_total_cost
from matchstudy.pipeline import format_match_row
from matchstudy.propensity import PropensityFit

from util import make_table


def score_fit(scores):
    return PropensityFit(method="mle", scores=np.asarray(scores, dtype=float))


class TestRankMahalanobis:
    def test_identical_vectors_are_at_distance_zero(self):
        d = rank_mahalanobis(np.array([[1.0, 5.0]]), np.array([[1.0, 5.0], [2.0, 7.0]]))
        assert abs(d[0, 0]) < 1e-10

    def test_adjacent_ranks_single_covariate(self):
        # pooled ranks are 1..4, variance 5/3, so one rank step costs 0.6
        d = rank_mahalanobis(np.array([[10.0], [30.0]]), np.array([[20.0], [40.0]]))
        np.testing.assert_allclose(d[0, 0], 0.6, rtol=1e-6)
        np.testing.assert_allclose(d[1, 1], 0.6, rtol=1e-6)
        np.testing.assert_allclose(d[0, 1], 0.6 * 9, rtol=1e-6)

    def test_column_order_irrelevant(self):
        rng = np.random.default_rng(0)
        xt, xc = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        perm = [2, 0, 1]
        np.testing.assert_allclose(
            rank_mahalanobis(xt[:, perm], xc[:, perm]), rank_mahalanobis(xt, xc), atol=1e-10
        )

    def test_constant_covariate_dropped_with_warning(self):
        xt = np.array([[1.0, 7.0], [2.0, 7.0]])
        xc = np.array([[3.0, 7.0]])
        with pytest.warns(UserWarning, match="constant covariate"):
            d = rank_mahalanobis(xt, xc)
        assert d.shape == (2, 1)
        assert np.isfinite(d).all()


class TestApplyCaliper:
    def test_equal_scores_leave_distances_unchanged(self):
        d = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = apply_caliper(d, np.full(2, 0.3), np.full(2, 0.3), width_sd=0.2, penalty=5.0)
        np.testing.assert_array_equal(out, d)

    def test_single_violation_is_local(self):
        st = expit(np.array([0.0]))
        sc = expit(np.array([0.05, 0.6]))
        pool = np.concatenate([logit(st), logit(sc)])
        sd = float(np.std(pool, ddof=1))
        # width 0.3: only the second gap (0.6, twice the width) violates
        d = np.ones((1, 2))
        out = apply_caliper(d, st, sc, width_sd=0.3 / sd, penalty=7.0)
        expected = d.copy()
        expected[0, 1] += 7.0 * 0.3
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_huge_penalty_avoids_violating_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            d = rng.integers(1, 100, size=(3, 3)) / 10.0
            st = expit(rng.normal(size=3))
            sc = expit(rng.normal(size=3))
            out = apply_caliper(d, st, sc, width_sd=0.5, penalty=1e6)
            violating = out > d + 1e-9
            clean_matching_exists = any(
                not any(violating[t, perm[t]] for t in range(3))
                for perm in itertools.permutations(range(3))
            )
            if not clean_matching_exists:
                continue
            sets, _ = match_bucket(out, ("t1", "t2", "t3"), ("c1", "c2", "c3"), k=1)
            pairs = {(t, cs[0]) for t, cs in sets}
            names = ("t1", "t2", "t3"), ("c1", "c2", "c3")
            for t, c in pairs:
                assert not violating[names[0].index(t), names[1].index(c)]


class TestTrimCommonSupport:
    def test_low_treated_dropped(self):
        drop = trim_common_support(np.array([0.5, 0.05, 0.1, 0.4]), np.array([1, 1, 0, 0]))
        np.testing.assert_array_equal(drop, [1])

    def test_full_overlap_drops_nobody(self):
        drop = trim_common_support(np.array([0.3, 0.6, 0.2, 0.55]), np.array([1, 1, 0, 0]))
        assert drop.size == 0

    def test_emptying_an_arm_raises(self):
        with pytest.raises(MatchingError, match="emptied"):
            trim_common_support(np.array([0.6, 0.7, 0.8]), np.array([1, 0, 0]))

    def test_single_arm_rejected(self):
        with pytest.raises(MatchingError, match="both arms"):
            trim_common_support(np.array([0.5, 0.6]), np.array([1, 1]))


class TestPropensityInterval:
    def test_published_anchor_points(self):
        assert propensity_interval(0.5) == 1
        assert propensity_interval(0.3) == 2
        assert propensity_interval(1.0 / 16.0) == 15
        assert propensity_interval(1.0 / 16.0 + 1e-12) == 14

    def test_unit_endpoints(self):
        assert propensity_interval(1.0) == 1
        assert propensity_interval(0.0) == 15

    def test_agrees_with_interval_definitions(self):
        # S_1 = (1/3, 1]; S_k = (1/(k+2), 1/(k+1)] for k = 2..14; S_15 = [0, 1/16]
        rng = np.random.default_rng(2)
        for e in rng.random(5000):
            k = propensity_interval(float(e))
            if k == 1:
                assert 1.0 / 3.0 < e <= 1.0
            elif k == 15:
                assert 0.0 <= e <= 1.0 / 16.0
            else:
                assert 1.0 / (k + 2) < e <= 1.0 / (k + 1)

    def test_vector_input(self):
        out = propensity_interval(np.array([0.5, 0.3, 0.01]))
        np.testing.assert_array_equal(out, [1, 2, 15])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            propensity_interval(1.5)


class TestMatchBucket:
    def test_two_by_two_picks_diagonal(self):
        d = np.array([[1.0, 2.0], [2.0, 1.0]])
        sets, dropped = match_bucket(d, ("t1", "t2"), ("c1", "c2"), k=1)
        assert sets == [("t1", ("c1",)), ("t2", ("c2",))]
        assert dropped == []
        assert match_total_cost(d, ("t1", "t2"), ("c1", "c2"), sets) == 2.0

    def test_single_treated_takes_nearest_controls(self):
        d = np.array([[0.3, 0.1, 0.9]])
        sets, dropped = match_bucket(d, ("t1",), ("c1", "c2", "c3"), k=2)
        assert sets == [("t1", ("c1", "c2"))]
        assert dropped == [("c3", REASON_OPTIMAL_DISCARD)]

    def test_scarce_controls_discard_is_optimal(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            d = rng.integers(0, 10_000, size=(3, 2)) / 1000.0
            sets, dropped = match_bucket(d, ("t1", "t2", "t3"), ("c1", "c2"), k=3)
            assert len(sets) == 2 and len(dropped) == 1
            assert dropped[0][1] == REASON_OPTIMAL_DISCARD
            cost = match_total_cost(d, ("t1", "t2", "t3"), ("c1", "c2"), sets)
            assert cost == pytest.approx(brute_force_bucket_cost(d, 3), abs=1e-9)

    def test_optimal_on_random_small_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            n_t = int(rng.integers(1, 4))
            n_c = int(rng.integers(1, 6))
            k = int(rng.integers(1, 4))
            d = rng.integers(0, 10_000, size=(n_t, n_c)) / 1000.0
            t_ids = tuple(f"t{i}" for i in range(n_t))
            c_ids = tuple(f"c{i}" for i in range(n_c))
            sets, dropped = match_bucket(d, t_ids, c_ids, k)
            cost = match_total_cost(d, t_ids, c_ids, sets)
            assert cost == pytest.approx(brute_force_bucket_cost(d, k), abs=1e-9)
            seen = [c for _, cs in sets for c in cs] + [t for t, _ in sets]
            seen += [s for s, _ in dropped]
            assert sorted(seen) == sorted(t_ids + c_ids)

    def test_intermediate_regime_uses_every_control(self):
        rng = np.random.default_rng(5)
        d = rng.random((2, 3))
        sets, dropped = match_bucket(d, ("t1", "t2"), ("c1", "c2", "c3"), k=2)
        assert dropped == []
        matched_controls = sorted(c for _, cs in sets for c in cs)
        assert matched_controls == ["c1", "c2", "c3"]
        assert all(1 <= len(cs) <= 2 for _, cs in sets)

    def test_empty_side_returns_everything_unmatched(self):
        sets, dropped = match_bucket(np.zeros((0, 2)), (), ("c1", "c2"), k=1)
        assert sets == []
        assert dropped == [("c1", REASON_UNMATCHED), ("c2", REASON_UNMATCHED)]

    def test_same_input_same_output(self):
        rng = np.random.default_rng(6)
        d = rng.random((3, 5))
        first = match_bucket(d, ("t1", "t2", "t3"), ("c1", "c2", "c3", "c4", "c5"), k=2)
        second = match_bucket(d, ("t1", "t2", "t3"), ("c1", "c2", "c3", "c4", "c5"), k=2)
        assert first == second


def simple_instance(rng, n_treated, n_control, strata=("a",), score_range=(0.35, 0.9)):
    n = n_treated + n_control
    z = np.array([1] * n_treated + [0] * n_control)
    covs = rng.normal(size=(n, 3))
    stratum = rng.choice(strata, size=n)
    table = make_table(z, covs, stratum=stratum)
    scores = rng.uniform(*score_range, size=n)
    return table, score_fit(scores)


class TestBuildMatch:
    def test_balanced_single_bucket_is_pure_pairing(self):
        rng = np.random.default_rng(7)
        table = make_table(np.array([1, 1, 1, 1, 0, 0, 0, 0]), rng.normal(size=(8, 3)))
        fit = score_fit([0.50, 0.55, 0.60, 0.65, 0.45, 0.52, 0.58, 0.63])
        result = build_match(table, fit, MatchConfig(comparison="c", method="mle"))
        assert len(result.sets) == 4
        assert all(len(s.control_ids) == 1 and s.interval == 1 for s in result.sets)
        assert composition(result) == {1: 4, **{k: 0 for k in range(2, 16)}}
        assert result.counts.n_matched == 8

    def test_straddling_buckets_match_independent_sub_runs(self):
        # no caliper and no trims, so each interval cell is self-contained
        z = np.array([1, 1, 0, 0, 1, 1, 0, 0])
        scores = np.array([0.50, 0.60, 0.45, 0.55, 0.30, 0.32, 0.28, 0.31])
        rng = np.random.default_rng(8)
        covs = rng.normal(size=(8, 2))
        config = MatchConfig(comparison="c", method="mle", caliper_penalty=0.0)

        table = make_table(z, covs)
        full = build_match(table, score_fit(scores), config)

        pieces = []
        for cell in (slice(0, 4), slice(4, 8)):
            sub = make_table(z[cell], covs[cell], ids=table.ids[cell])
            pieces.extend(build_match(sub, score_fit(scores[cell]), config).sets)
        key = lambda s: s.treated_id
        assert sorted(full.sets, key=key) == sorted(pieces, key=key)

    def test_common_support_and_accounting(self):
        z = np.array([1, 1, 1, 0, 0, 0])
        scores = np.array([0.50, 0.44, 0.05, 0.45, 0.42, 0.90])
        rng = np.random.default_rng(9)
        table = make_table(z, rng.normal(size=(6, 2)))
        result = build_match(table, score_fit(scores), MatchConfig(comparison="c"))
        reasons = dict(result.dropped)
        assert reasons[table.ids[2]] == REASON_COMMON_SUPPORT  # below every control
        assert reasons[table.ids[5]] == REASON_COMMON_SUPPORT  # above every treated
        assert result.counts.n_cs_treated == 1 and result.counts.n_cs_control == 1
        matched = {s.treated_id for s in result.sets} | {c for s in result.sets for c in s.control_ids}
        assert matched | set(reasons) == set(table.ids)
        assert len(matched) + len(result.dropped) == table.n

    def test_sets_never_cross_strata(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            table, fit = simple_instance(rng, 6, 10, strata=("7-8", "9-10", "11-12"))
            result = build_match(table, fit, MatchConfig(comparison="c"))
            stratum_of = {s: table.stratum[i] for i, s in enumerate(table.ids)}
            for matched_set in result.sets:
                assert stratum_of[matched_set.treated_id] == matched_set.stratum
                for c in matched_set.control_ids:
                    assert stratum_of[c] == matched_set.stratum
                assert 1 <= len(matched_set.control_ids) <= 15

    def test_partition_property(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            table, fit = simple_instance(rng, 5, 12, strata=("a", "b"), score_range=(0.05, 0.95))
            result = build_match(table, fit, MatchConfig(comparison="c"))
            in_sets = [s.treated_id for s in result.sets]
            in_sets += [c for s in result.sets for c in s.control_ids]
            everyone = in_sets + [s for s, _ in result.dropped]
            assert sorted(everyone) == sorted(table.ids)

    def test_caliper_penalty_monotone_in_total_violation(self):
        # the optimal match's total caliper excess is nonincreasing in the
        # penalty (exchange argument); the count of within-caliper pairs is
        # not, since one big violation may be traded for two small ones
        rng = np.random.default_rng(12)
        width_sd = 0.5
        for _ in range(25):
            d = rng.random((4, 6))
            st = expit(rng.normal(size=4))
            sc = expit(rng.normal(size=6))
            pool = np.concatenate([logit(st), logit(sc)])
            width = width_sd * float(np.std(pool, ddof=1))
            t_ids = tuple(f"t{i}" for i in range(4))
            c_ids = tuple(f"c{i}" for i in range(6))
            last = np.inf
            for penalty in (0.0, 1.0, 10.0, 1000.0):
                out = apply_caliper(d, st, sc, width_sd=width_sd, penalty=penalty)
                sets, _ = match_bucket(out, t_ids, c_ids, k=2)
                excess = sum(
                    max(abs(logit(st[int(t[1:])]) - logit(sc[int(c[1:])])) - width, 0.0)
                    for t, cs in sets
                    for c in cs
                )
                assert excess <= last + 1e-9
                last = excess

    def test_misaligned_scores_rejected(self):
        rng = np.random.default_rng(13)
        table, _ = simple_instance(rng, 2, 2)
        with pytest.raises(ValueError, match="align"):
            build_match(table, score_fit([0.5, 0.5]), MatchConfig())

    def test_config_bounds(self):
        with pytest.raises(ValueError):
            MatchConfig(max_controls=16)
        with pytest.raises(ValueError):
            MatchConfig(max_controls=0)


class TestComposition:
    def test_all_pairs(self):
        rng = np.random.default_rng(14)
        table = make_table(np.array([1, 1, 1, 0, 0, 0]), rng.normal(size=(6, 3)))
        fit = score_fit([0.50, 0.55, 0.60, 0.48, 0.52, 0.58])
        result = build_match(table, fit, MatchConfig(comparison="c"))
        counts = composition(result)
        assert counts[1] == 3
        assert sum(counts.values()) == len(result.sets)

    def test_mixed_sizes_counted(self):
        rng = np.random.default_rng(15)
        # scores spread over buckets so set sizes vary
        table, fit = simple_instance(rng, 4, 20, score_range=(0.1, 0.9))
        result = build_match(table, fit, MatchConfig(comparison="c"))
        counts = composition(result)
        sizes = [len(s.control_ids) for s in result.sets]
        for j in range(1, 16):
            assert counts[j] == sizes.count(j)


class TestReportRow:
    def test_published_row_format(self):
        counts = MatchCounts(
            n_miss_treated=0,
            n_miss_control=32,
            n_cs_treated=26,
            n_cs_control=177,
            n_matched_treated=447,
            n_matched_control=1034,
        )
        row = format_match_row("Comparison 1", "MLE", counts, imbalanced=0)
        assert row == (
            "Comparison 1, MLE: n_miss 32 (0/32), n_cs 203 (26/177), "
            "n_total 1481 (447/1034), imbalanced 0"
        )
