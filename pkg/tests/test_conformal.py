import math
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import numpy as np
import pytest

from specgate.conformal import (
    CalibrationError,
    CalibrationPool,
    PValueRecord,
    budget_for,
    build_rejection_set,
    classic_prediction_set,
    classic_threshold,
    conditional_p_value,
    marginal_p_value,
    nll_score,
    online_calibrate,
    rank_p_value,
    reject,
    softmax_conformity,
)


def brute_force_marginal(s, pool_scores):
    """Independent oracle: literal double loop over the indicator sum."""
    count = sum(1 for row in pool_scores for v in row if s <= v)
    total = sum(len(row) for row in pool_scores)
    return Fraction(count + 1, total + 1)


def brute_force_conditional(s, own_scores):
    count = sum(1 for v in own_scores if s <= v)
    return Fraction(count + 1, len(own_scores) + 1)


class TestNllScore:
    def test_uniform_two_way(self):
        assert nll_score([-math.log(2), -math.log(2)]) == pytest.approx(math.log(2))

    def test_certain_token(self):
        assert nll_score([0.0]) == 0.0

    def test_hand_mean(self):
        assert nll_score([-1.0, -3.0]) == 2.0

    def test_empty_block(self):
        with pytest.raises(ValueError, match="empty block"):
            nll_score([])

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf"), 0.5])
    def test_invalid_logprob(self, bad):
        with pytest.raises(ValueError, match="invalid logprob"):
            nll_score([-1.0, bad])


class TestSoftmaxConformity:
    def test_symmetry(self):
        out = softmax_conformity([2.5, 2.5, 2.5])
        assert np.allclose(out, [1 / 3] * 3)

    def test_two_way_hand_value(self):
        # exp(0) / (exp(0) + exp(-ln 3)) = 1 / (1 + 1/3)
        out = softmax_conformity([0.0, math.log(3)])
        assert out[0] == pytest.approx(0.75)
        assert out[1] == pytest.approx(0.25)

    def test_shift_invariance_extreme(self):
        out = softmax_conformity([1000.0, 1000.0])
        assert np.allclose(out, [0.5, 0.5])

    def test_sums_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            losses = rng.normal(0, 5, size=rng.integers(1, 12))
            assert abs(softmax_conformity(losses).sum() - 1.0) < 1e-12

    def test_order_preserving(self):
        rng = np.random.default_rng(12)
        losses = rng.normal(0, 2, size=9)
        out = softmax_conformity(losses)
        order_losses = np.argsort(losses)          # ascending loss
        order_scores = np.argsort(-out)            # descending score
        assert np.array_equal(order_losses, order_scores)


class TestCalibrationPool:
    def test_frozen_scores(self):
        pool = CalibrationPool.from_scores(["a", "b"], [[1.0, 2.0], [3.0, 4.0]])
        with pytest.raises(ValueError):
            pool.scores[0, 0] = 99.0

    def test_row_lookup(self):
        pool = CalibrationPool.from_scores(["a", "b"], [[1.0, 2.0], [3.0, 4.0]])
        assert list(pool.row("b")) == [3.0, 4.0]
        with pytest.raises(KeyError, match="unknown input id"):
            pool.row("zzz")

    def test_rejects_non_finite(self):
        with pytest.raises(CalibrationError, match="non-finite"):
            CalibrationPool.from_scores(["a"], [[1.0, float("nan")]])

    def test_hash_changes_with_content(self):
        p1 = CalibrationPool.from_scores(["a"], [[1.0, 2.0]])
        p2 = CalibrationPool.from_scores(["a"], [[1.0, 2.5]])
        assert p1.content_hash != p2.content_hash


class TestOnlineCalibrate:
    def test_deterministic_source(self):
        ids = ["i0", "i1", "i2"]
        pool = online_calibrate(ids, 2, lambda iid, j: ids.index(iid) + j)
        assert pool.scores.tolist() == [[0, 1], [1, 2], [2, 3]]

    def test_empty_calibration(self):
        with pytest.raises(CalibrationError, match="empty calibration"):
            online_calibrate([], 4, lambda iid, j: 0.0)

    def test_replay_identical(self):
        def source(iid, j):
            rng = np.random.default_rng(abs(hash((iid, j))) % (2**32))
            return float(rng.normal())

        a = online_calibrate(["x", "y"], 3, source)
        b = online_calibrate(["x", "y"], 3, source)
        assert a.content_hash == b.content_hash
        assert np.array_equal(a.scores, b.scores)

    def test_source_failure_identifies_cell(self):
        def source(iid, j):
            if (iid, j) == ("y", 1):
                raise RuntimeError("boom")
            return 0.0

        with pytest.raises(CalibrationError, match=r"'y', sample 1"):
            online_calibrate(["x", "y"], 2, source)


FOUR_SCORE_POOL = CalibrationPool.from_scores(["a", "b"], [[1.0, 2.0], [3.0, 4.0]])


class TestMarginalPValue:
    @pytest.mark.parametrize("s,expected", [
        (5.0, Fraction(1, 5)),
        (0.5, Fraction(1, 1)),
        (2.5, Fraction(3, 5)),
    ])
    def test_examples(self, s, expected):
        rec = marginal_p_value(s, FOUR_SCORE_POOL)
        assert rec.p == expected
        assert rec.p == brute_force_marginal(s, [[1, 2], [3, 4]])

    def test_matches_brute_force_on_random_pools(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n, m = rng.integers(1, 5), rng.integers(1, 5)
            scores = rng.normal(size=(n, m))
            pool = CalibrationPool([f"i{k}" for k in range(n)], scores)
            s = float(rng.normal())
            assert marginal_p_value(s, pool).p == brute_force_marginal(s, scores.tolist())

    def test_exact_support(self):
        rng = np.random.default_rng(8)
        pool = CalibrationPool(["i0", "i1"], rng.normal(size=(2, 3)))
        for s in rng.normal(size=40):
            rec = marginal_p_value(float(s), pool)
            assert rec.denominator == 7 and 1 <= rec.numerator <= 7

    def test_monotone_in_score(self):
        rng = np.random.default_rng(9)
        pool = CalibrationPool(["i0"], rng.normal(size=(1, 9)))
        svals = np.sort(rng.normal(size=25))
        ps = [marginal_p_value(float(s), pool).p for s in svals]
        assert all(b <= a for a, b in zip(ps, ps[1:]))

    def test_rank_invariance_under_shift(self):
        rng = np.random.default_rng(10)
        scores = rng.normal(size=(3, 4))
        s = 0.3
        for shift in (-5.0, 0.0, 17.25):
            pool = CalibrationPool([f"i{k}" for k in range(3)], scores + shift)
            assert marginal_p_value(s + shift, pool).p == marginal_p_value(
                s, CalibrationPool([f"i{k}" for k in range(3)], scores)).p

    def test_order_independent_pure_reads(self):
        rng = np.random.default_rng(13)
        pool = CalibrationPool([f"i{k}" for k in range(4)], rng.normal(size=(4, 5)))
        batch = [float(s) for s in rng.normal(size=64)]
        sequential = [marginal_p_value(s, pool).p for s in batch]
        shuffled_idx = rng.permutation(len(batch))
        shuffled = {int(i): marginal_p_value(batch[int(i)], pool).p for i in shuffled_idx}
        assert [shuffled[i] for i in range(len(batch))] == sequential
        with ThreadPoolExecutor(max_workers=8) as pool_exec:
            concurrent = list(pool_exec.map(lambda s: marginal_p_value(s, pool).p, batch))
        assert concurrent == sequential


class TestConditionalPValue:
    def test_above_all_own_scores(self):
        pool = CalibrationPool.from_scores(["a"], [[1.0, 2.0, 3.0]])
        assert conditional_p_value(4.0, pool, "a").p == Fraction(1, 4)

    def test_below_all_own_scores(self):
        pool = CalibrationPool.from_scores(["a"], [[1.0, 2.0, 3.0]])
        assert conditional_p_value(0.5, pool, "a").p == Fraction(1, 1)

    def test_interleaved(self):
        pool = CalibrationPool.from_scores(["a"], [[1.0, 2.0, 3.0]])
        assert conditional_p_value(1.5, pool, "a").p == Fraction(3, 4)

    def test_unknown_input(self):
        pool = CalibrationPool.from_scores(["a"], [[1.0]])
        with pytest.raises(KeyError):
            conditional_p_value(1.0, pool, "nope")

    def test_matches_brute_force(self):
        rng = np.random.default_rng(14)
        for _ in range(30):
            own = rng.normal(size=rng.integers(1, 8))
            pool = CalibrationPool(["a"], own[None, :])
            s = float(rng.normal())
            assert conditional_p_value(s, pool, "a").p == brute_force_conditional(s, own)


class TestReject:
    def test_reject_below(self):
        assert reject(PValueRecord("c", 1, 5, "marginal"), 0.4) is True

    def test_accept_p_one(self):
        assert reject(PValueRecord("c", 5, 5, "marginal"), 0.9) is False

    def test_boundary_rejects(self):
        # p == alpha exactly: 1/4 vs 0.25 (representable)
        assert reject(PValueRecord("c", 1, 4, "marginal"), 0.25) is True

    def test_exact_comparison_against_float(self):
        # 3/10 > float(0.3) because float 0.3 is slightly below 3/10
        assert reject(PValueRecord("c", 3, 10, "marginal"), 0.3) is False
        assert reject(PValueRecord("c", 2, 10, "marginal"), 0.3) is True


class TestRejectionSet:
    def test_elementwise_threshold(self):
        recs = [PValueRecord(f"c{i}", n, 10, "marginal")
                for i, n in enumerate([1, 5, 9])]
        rs = build_rejection_set(recs, 0.4, turn=3)
        assert rs.rejected == ("c0",)
        assert rs.accepted == ("c1", "c2")
        assert rs.turn == 3

    def test_tiny_alpha_rejects_nothing(self):
        recs = [PValueRecord(f"c{i}", i + 1, 8, "conditional") for i in range(7)]
        rs = build_rejection_set(recs, 1e-9)
        assert rs.rejected == ()

    def test_conditional_rank_budget(self):
        # 8 candidates, each ranked leave-one-out against the other 7
        # distinct scores: p-values are a permutation of {1/8..8/8}
        scores = np.array([3.1, 0.2, 5.7, 1.1, 4.4, 2.2, 6.6, 0.9])
        recs = []
        for i in range(len(scores)):
            num, den = rank_p_value(scores[i], np.delete(scores, i))
            recs.append(PValueRecord(f"c{i}", num, den, "conditional"))
        assert sorted(r.p for r in recs) == [Fraction(k, 8) for k in range(1, 9)]
        rs = build_rejection_set(recs, 0.25)
        assert len(rs.rejected) == 2 == budget_for(0.25, 7, "conditional").b

    def test_mixed_modes_error(self):
        recs = [PValueRecord("a", 1, 5, "marginal"),
                PValueRecord("b", 1, 5, "conditional")]
        with pytest.raises(ValueError, match="mixed"):
            build_rejection_set(recs, 0.3)

    def test_partition_is_complete_and_disjoint(self):
        rng = np.random.default_rng(15)
        recs = [PValueRecord(f"c{i}", int(rng.integers(1, 12)), 12, "marginal")
                for i in range(20)]
        rs = build_rejection_set(recs, 0.35)
        assert set(rs.rejected) | set(rs.accepted) == {f"c{i}" for i in range(20)}
        assert not set(rs.rejected) & set(rs.accepted)


class TestBudgetFor:
    def test_conditional_examples(self):
        assert budget_for(0.25, 7, "conditional").b == 2
        assert budget_for(0.25, 3, "conditional").b == 1

    def test_tiny_alpha(self):
        assert budget_for(1e-9, 5, "conditional").b == 0
        assert budget_for(1e-9, 5, "marginal").b == 0

    def test_marginal_expectation(self):
        spec = budget_for(0.25, 64, "marginal")
        assert spec.b == 16
        assert spec.expected == pytest.approx(16.0)
        assert spec.scope == "per_dataset"

    def test_enumeration_oracle(self):
        # B must equal the number of rank p-values k/(m+1) at or below alpha
        for m in range(1, 12):
            for alpha in (0.1, 0.25, 0.3, 0.4, 0.5, 0.75):
                want = sum(1 for k in range(1, m + 1)
                           if Fraction(k, m + 1) <= Fraction(alpha))
                assert budget_for(alpha, m, "conditional").b == want

    def test_budget_never_exceeds_m(self):
        for m in (1, 2, 5, 9):
            assert budget_for(0.99, m, "conditional").b <= m


class TestClassicThreshold:
    def test_hand_quantile(self):
        pool = CalibrationPool.from_scores(["a", "b", "c", "d"],
                                           [[0.1], [0.2], [0.3], [0.4]])
        th = classic_threshold(pool, 0.5)
        assert th.quantile_level == Fraction(3, 4)
        assert th.tau == pytest.approx(0.3)
        assert not th.saturated

    def test_alpha_near_one_gives_min(self):
        rng = np.random.default_rng(16)
        pool = CalibrationPool([f"i{k}" for k in range(100)], rng.uniform(size=(100, 1)))
        th = classic_threshold(pool, 0.999)
        assert th.tau == pool.scores.min()

    def test_saturation_flag(self):
        pool = CalibrationPool.from_scores(["a"], [[0.7]])
        th = classic_threshold(pool, 0.4)
        assert th.saturated
        assert th.tau == 0.7

    def test_prediction_set_examples(self):
        th = classic_threshold(CalibrationPool.from_scores(["a"], [[0.3]]), 0.4)
        # direct containment check with tau == 0.3 (saturated single-score pool)
        assert classic_prediction_set([0.5, 0.3, 0.2], th) == {0, 1}

    def test_prediction_set_extremes(self):
        from specgate.conformal import ClassicThreshold

        zero = ClassicThreshold(tau=0.0, quantile_level=Fraction(1, 2))
        assert classic_prediction_set([0.5, 0.1], zero) == {0, 1}
        high = ClassicThreshold(tau=2.0, quantile_level=Fraction(1, 2))
        assert classic_prediction_set([0.5, 0.1], high) == set()
