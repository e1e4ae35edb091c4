"""Conformity scores, calibration pools, and exact conformal p-values.

The score convention throughout: a conformity score is the mean per-token
negative log-likelihood of a candidate block under the target scorer, so
higher means *less* conforming. With the p-value indicator s_test <= s_cal,
small p identifies the worst candidates and {p <= alpha} rejects the
low-confidence fraction alpha.

P-values are exact rationals: marginal p in {k/(nm+1)}, conditional p in
{k/(m+1)} for integer k >= 1. Rejection decisions compare the exact
Fraction against alpha, so there is no float boundary ambiguity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .records import pool_content_hash

MARGINAL = "marginal"
CONDITIONAL = "conditional"
MODES = (MARGINAL, CONDITIONAL)

ScoreSource = Callable[[str, int], float]


class CalibrationError(ValueError):
    pass


def _check_alpha(alpha: float) -> float:
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha!r}")
    return float(alpha)


def nll_score(token_logprobs: Sequence[float]) -> float:
    """Mean per-token negative log-likelihood of one block.

    The mean (rather than the sum) keeps blocks that ended early at an
    answer token comparable to full-length blocks.
    """
    if len(token_logprobs) == 0:
        raise ValueError("empty block")
    total = 0.0
    for lp in token_logprobs:
        if not math.isfinite(lp) or lp > 0.0:
            raise ValueError(f"invalid logprob {lp!r}")
        total -= lp
    return total / len(token_logprobs)


def softmax_conformity(losses: Sequence[float]) -> np.ndarray:
    """Normalized conformity scores exp(-l_k) / sum_j exp(-l_j).

    Max-shifted for stability: constant offsets to the losses cancel, so a
    row of equal losses maps to the uniform vector even at extreme values.
    Order-reversing in the loss (smaller loss -> larger score).
    """
    arr = np.asarray(losses, dtype=float)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("losses must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError("losses must be finite")
    z = -arr
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


class CalibrationPool:
    """Frozen n x m matrix of conformity scores, grouped by input.

    Immutable once built: the score matrix is read-only and the pool is
    identified by a content hash, so concurrent readers never observe
    mutation and recalibration yields a distinguishable new pool.
    """

    def __init__(self, input_ids: Sequence[str], scores: np.ndarray):
        scores = np.asarray(scores, dtype=float)
        if scores.ndim != 2:
            raise CalibrationError("scores must be an n x m matrix")
        n, m = scores.shape
        if n < 1 or m < 1:
            raise CalibrationError("empty calibration")
        if len(input_ids) != n:
            raise CalibrationError(f"{len(input_ids)} input ids for {n} score rows")
        if len(set(input_ids)) != n:
            raise CalibrationError("duplicate input ids")
        if not np.all(np.isfinite(scores)):
            bad = np.argwhere(~np.isfinite(scores))[0]
            raise CalibrationError(
                f"non-finite score at input {input_ids[bad[0]]!r}, sample {bad[1]}")
        self._input_ids = tuple(str(i) for i in input_ids)
        self._scores = scores.copy()
        self._scores.setflags(write=False)
        self._index = {input_id: i for i, input_id in enumerate(self._input_ids)}
        self._sorted_flat = np.sort(scores, axis=None)
        self._sorted_flat.setflags(write=False)
        self._hash = pool_content_hash(
            self._input_ids,
            {iid: [float(v) for v in self._scores[i]] for i, iid in enumerate(self._input_ids)},
        )

    @classmethod
    def from_scores(cls, input_ids: Sequence[str], rows: Iterable[Sequence[float]]) -> "CalibrationPool":
        return cls(input_ids, np.array([list(r) for r in rows], dtype=float))

    @property
    def n(self) -> int:
        return self._scores.shape[0]

    @property
    def m(self) -> int:
        return self._scores.shape[1]

    @property
    def size(self) -> int:
        return self._scores.size

    @property
    def input_ids(self) -> tuple[str, ...]:
        return self._input_ids

    @property
    def scores(self) -> np.ndarray:
        return self._scores

    @property
    def content_hash(self) -> str:
        return self._hash

    def row(self, input_id: str) -> np.ndarray:
        try:
            return self._scores[self._index[input_id]]
        except KeyError:
            raise KeyError(f"unknown input id {input_id!r}") from None

    def __contains__(self, input_id: str) -> bool:
        return input_id in self._index

    def __repr__(self) -> str:
        return (f"CalibrationPool(n={self.n}, m={self.m}, "
                f"hash={self._hash[:12]}...)")

    def count_at_least(self, s: float) -> int:
        """#{(i,j): s <= s_i^j}, via binary search on the sorted flat view."""
        return int(self.size - np.searchsorted(self._sorted_flat, s, side="left"))


def online_calibrate(input_ids: Sequence[str], m: int, source: ScoreSource) -> CalibrationPool:
    """Build a frozen pool by drawing m pre-sample scores per input.

    Each cell is drawn independently by calling source(input_id, j); there
    is no ordering or barrier between cells, so a source backed by
    per-cell seeds may be evaluated in any order or concurrently.
    """
    if len(input_ids) == 0:
        raise CalibrationError("empty calibration")
    if m < 1:
        raise CalibrationError("m must be >= 1")
    scores = np.empty((len(input_ids), m), dtype=float)
    for i, input_id in enumerate(input_ids):
        for j in range(m):
            try:
                value = float(source(input_id, j))
            except Exception as exc:
                raise CalibrationError(
                    f"score source failed for input {input_id!r}, sample {j}: {exc}"
                ) from exc
            if not math.isfinite(value):
                raise CalibrationError(
                    f"score source returned non-finite value for input "
                    f"{input_id!r}, sample {j}")
            scores[i, j] = value
    return CalibrationPool(input_ids, scores)


@dataclass(frozen=True)
class PValueRecord:
    """Exact conformal p-value of one candidate.

    p = numerator/denominator with denominator nm+1 (marginal) or m+1
    (conditional); numerator = #{calibration scores >= s} + 1.
    """

    candidate_id: str
    numerator: int
    denominator: int
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (1 <= self.numerator <= self.denominator):
            raise ValueError(
                f"p-value {self.numerator}/{self.denominator} outside (0, 1]")

    @property
    def p(self) -> Fraction:
        return Fraction(self.numerator, self.denominator)

    def __float__(self) -> float:
        return self.numerator / self.denominator


def rank_p_value(s: float, calibration_scores: np.ndarray) -> tuple[int, int]:
    """(numerator, denominator) of (#{j: s <= scores_j} + 1) / (len + 1)."""
    scores = np.asarray(calibration_scores, dtype=float)
    count = int(np.count_nonzero(s <= scores))
    return count + 1, scores.size + 1


def marginal_p_value(s: float, pool: CalibrationPool, candidate_id: str = "") -> PValueRecord:
    """Conformal p-value of score s against the full pool.

    p = (#{(i,j): s <= s_i^j} + 1) / (nm + 1). A pure read of the frozen
    pool: no normalization over the test batch and no cross-candidate
    communication, so batch evaluation order is irrelevant.
    """
    num = pool.count_at_least(s) + 1
    return PValueRecord(candidate_id, num, pool.size + 1, MARGINAL)


def conditional_p_value(s: float, pool: CalibrationPool, input_id: str,
                        candidate_id: str = "") -> PValueRecord:
    """Conformal p-value of score s against its own input's m scores.

    p = (#{j: s <= s_input^j} + 1) / (m + 1).
    """
    row = pool.row(input_id)
    num, den = rank_p_value(s, row)
    return PValueRecord(candidate_id, num, den, CONDITIONAL)


def reject(p: PValueRecord, alpha: float) -> bool:
    """True iff p <= alpha. Boundary p == alpha rejects.

    The comparison is exact: the Fraction p is compared against the exact
    rational value of the float alpha.
    """
    _check_alpha(alpha)
    return p.p <= Fraction(alpha)


@dataclass(frozen=True)
class RejectionSet:
    """Partition of one turn's candidates into rejected ({p <= alpha}) and accepted."""

    turn: int
    rejected: tuple[str, ...]
    accepted: tuple[str, ...]
    alpha: float


def build_rejection_set(pvalues: Sequence[PValueRecord], alpha: float, turn: int = 0) -> RejectionSet:
    """Partition candidates by reject(), preserving input order in both lists."""
    _check_alpha(alpha)
    modes = {rec.mode for rec in pvalues}
    if len(modes) > 1:
        raise ValueError(f"mixed p-value modes {sorted(modes)}")
    rejected, accepted = [], []
    for rec in pvalues:
        (rejected if reject(rec, alpha) else accepted).append(rec.candidate_id)
    return RejectionSet(turn=turn, rejected=tuple(rejected), accepted=tuple(accepted),
                        alpha=float(alpha))


@dataclass(frozen=True)
class BudgetSpec:
    """Predicted rejections per scope.

    Conditional scope is exact for distinct scores; marginal scope also
    carries the real-valued expectation alpha*m.
    """

    b: int
    scope: str
    expected: float | None = None


def budget_for(alpha: float, m: int, mode: str) -> BudgetSpec:
    """Predicted number of rejections among candidates ranked against m scores.

    Conditional: B = floor(alpha * (m+1)) = #{k in 1..m: k/(m+1) <= alpha},
    computed with exact rationals so it matches reject() at the boundary.
    Marginal: expectation alpha*m at the dataset level, reported with the
    integer floor.
    """
    _check_alpha(alpha)
    if m < 1:
        raise ValueError("m must be >= 1")
    if mode == CONDITIONAL:
        b = int(Fraction(alpha) * (m + 1))
        return BudgetSpec(b=min(b, m), scope="per_turn_per_input")
    if mode == MARGINAL:
        return BudgetSpec(b=int(Fraction(alpha) * m), scope="per_dataset",
                          expected=alpha * m)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class ClassicThreshold:
    """Global split-conformal threshold tau at quantile level ceil((n+1)(1-a))/n."""

    tau: float
    quantile_level: Fraction
    saturated: bool = False


def classic_threshold(pool: CalibrationPool, alpha: float) -> ClassicThreshold:
    """Classic global threshold over the pool's nm (already normalized) scores.

    The quantile level is p = ceil((n+1)(1-alpha))/n and tau is the
    ceil(p*nm)-th smallest score (inclusive lower quantile). When p > 1
    (tiny n or alpha) the threshold saturates: tau clamps to the max score
    and the result is flagged rather than raising.

    The pool's stored scores are quantiled as given; callers targeting the
    softmax baseline normalize each input's row with softmax_conformity
    first.
    """
    _check_alpha(alpha)
    n = pool.n
    level = Fraction(math.ceil((n + 1) * (1 - Fraction(alpha))), n)
    flat = pool._sorted_flat
    saturated = level > 1
    if saturated:
        tau = float(flat[-1])
    else:
        k = math.ceil(level * pool.size)
        tau = float(flat[max(k, 1) - 1])
    return ClassicThreshold(tau=tau, quantile_level=level, saturated=saturated)


def classic_prediction_set(scores: Sequence[float], threshold: ClassicThreshold) -> set[int]:
    """{k : s_k >= tau}; may be empty."""
    return {k for k, s in enumerate(scores) if s >= threshold.tau}
