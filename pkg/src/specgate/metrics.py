"""Monte-Carlo verification of the coverage guarantees and efficiency accounting.

The three verifiers draw exchangeable scores (pool plus one extra test
score per trial) and check, at an explicit Monte-Carlo tolerance, that

* marginal p-values satisfy P(p <= alpha) <= alpha on an alpha grid and
  are uniform on {k/(nm+1)} for distinct scores (KS against the exact
  discrete CDF);
* conditional p-values do the same against a per-input pool of size m;
* the designated right sample is accepted with frequency in
  [1-alpha, 1-alpha + 1/((n-1)m+1) + eps] for distinct scores.

Every assertion carries eps_mc = max(0.01, 3*sqrt(a(1-a)/trials)), a
3-sigma binomial slack, and reports include the bound used. Reports are
pure functions of (params, seed): rerunning reproduces every number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pipeline import EpisodeTrace
from .simkernel import ScheduleTrace
from .synthetic import draw_scores

DEFAULT_ALPHA_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


def mc_epsilon(alpha: float, trials: int) -> float:
    """3-sigma binomial slack, floored at 0.01."""
    return max(0.01, 3.0 * math.sqrt(alpha * (1.0 - alpha) / trials))


def discrete_uniform_ks(counts: np.ndarray) -> float:
    """KS distance between an empirical distribution over the atoms
    {1/D, ..., D/D} (given as counts per atom) and the exact discrete
    uniform CDF k/D, evaluated at the atoms."""
    total = counts.sum()
    if total == 0:
        raise ValueError("no samples")
    d = counts.size
    empirical = np.cumsum(counts) / total
    uniform = np.arange(1, d + 1) / d
    return float(np.abs(empirical - uniform).max())


@dataclass
class CoverageReport:
    mode: str
    alpha_grid: tuple[float, ...]
    empirical_reject_rate: dict[float, float]
    epsilon: dict[float, float]
    violation: dict[float, bool]
    ks_distance_to_uniform: float
    trials: int
    atom_frequencies: np.ndarray | None = None
    acceptance_rate: float | None = None
    acceptance_bounds: tuple[float, float] | None = None
    bound_vacuous: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(self.violation.values())

    def to_csv_lines(self) -> list[str]:
        lines = ["alpha,reject_rate,epsilon,violation"]
        for a in self.alpha_grid:
            lines.append(f"{a},{self.empirical_reject_rate[a]!r},"
                         f"{self.epsilon[a]!r},{int(self.violation[a])}")
        return lines


def _rate_table(pnum: np.ndarray, denom: int, alpha_grid, trials: int):
    """Per-alpha frequency of {p <= alpha}, exact at the atom boundaries.

    p = k/denom <= alpha iff k <= floor(Fraction(alpha) * denom), the same
    exact-rational comparison the reject decision uses.
    """
    from fractions import Fraction

    rates, eps, violations = {}, {}, {}
    for alpha in alpha_grid:
        kmax = int(Fraction(alpha) * denom)
        rate = float(np.count_nonzero(pnum <= kmax)) / trials
        e = mc_epsilon(alpha, trials)
        rates[alpha] = rate
        eps[alpha] = e
        violations[alpha] = rate > alpha + e
    return rates, eps, violations


def verify_marginal_validity(distribution: str, n: int, m: int,
                             alpha_grid=DEFAULT_ALPHA_GRID, trials: int = 10_000,
                             seed: int = 0, bias_test_score: float = 0.0) -> CoverageReport:
    """Monte-Carlo check of marginal validity and uniformity.

    Each trial draws an (nm+1)-vector of i.i.d. scores; the last entry is
    the test score (optionally shifted by `bias_test_score`, a hook that
    deliberately breaks exchangeability for negative testing). The p-value
    numerator is #{pool >= test} + 1.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A]))
    denom = n * m + 1
    pnum = np.empty(trials, dtype=np.int64)
    chunk = max(1, min(trials, 20_000))
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        draws = draw_scores(rng, distribution, (size, denom))
        pool, test = draws[:, :-1], draws[:, -1] + bias_test_score
        pnum[done:done + size] = (pool >= test[:, None]).sum(axis=1) + 1
        done += size

    rates, eps, violations = _rate_table(pnum, denom, alpha_grid, trials)
    counts = np.bincount(pnum, minlength=denom + 1)[1:]
    ks = discrete_uniform_ks(counts)
    return CoverageReport(
        mode="marginal", alpha_grid=tuple(alpha_grid),
        empirical_reject_rate=rates, epsilon=eps, violation=violations,
        ks_distance_to_uniform=ks, trials=trials,
        atom_frequencies=counts / trials,
    )


def verify_conditional_validity(distribution: str, n: int, m: int,
                                alpha_grid=DEFAULT_ALPHA_GRID, trials: int = 10_000,
                                seed: int = 0, bias_test_score: float = 0.0) -> CoverageReport:
    """Monte-Carlo check of conditional validity against per-input pools.

    Only the test input's own m scores matter, so each trial draws an
    (m+1)-vector. Also applies the distinct-score sharpening check
    rate <= alpha - 1/((n-1)m+1) + eps wherever that bound is non-vacuous
    (the +eps slack absorbs the discrete atom at the boundary).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x2B]))
    denom = m + 1
    draws = draw_scores(rng, distribution, (trials, denom))
    pool, test = draws[:, :-1], draws[:, -1] + bias_test_score
    pnum = (pool >= test[:, None]).sum(axis=1) + 1

    rates, eps, violations = _rate_table(pnum, denom, alpha_grid, trials)
    sharp = 1.0 / ((n - 1) * m + 1) if n > 1 else None
    notes = []
    if sharp is not None:
        for alpha in alpha_grid:
            # the sharpening holds up to the discrete atom at the boundary;
            # apply it only where the eps slack leaves a full 3-sigma margin,
            # so a correct implementation can never trip it
            margin = 3.0 * math.sqrt(alpha * (1.0 - alpha) / trials)
            if sharp + margin > eps[alpha]:
                continue
            if rates[alpha] > alpha - sharp + eps[alpha]:
                violations[alpha] = True
                notes.append(f"sharpened bound violated at alpha={alpha}")
    counts = np.bincount(pnum, minlength=denom + 1)[1:]
    ks = discrete_uniform_ks(counts)
    return CoverageReport(
        mode="conditional", alpha_grid=tuple(alpha_grid),
        empirical_reject_rate=rates, epsilon=eps, violation=violations,
        ks_distance_to_uniform=ks, trials=trials,
        atom_frequencies=counts / trials, notes=notes,
        bound_vacuous=sharp is None,
    )


def verify_simultaneous_coverage(n: int, m: int, alpha: float, trials: int = 10_000,
                                 seed: int = 0, distribution: str = "distinct-uniform",
                                 bias_test_score: float = 0.0) -> CoverageReport:
    """Acceptance frequency of the designated right sample.

    Accept iff p > alpha. For distinct scores the frequency must land in
    [1-alpha, 1-alpha + 1/((n-1)m+1) + eps]; at n=1 the upper refinement
    is vacuous and flagged as such.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x3C]))
    denom = n * m + 1
    accepted = 0
    chunk = max(1, min(trials, 20_000))
    done = 0
    from fractions import Fraction

    kmax = int(Fraction(alpha) * denom)
    while done < trials:
        size = min(chunk, trials - done)
        draws = draw_scores(rng, distribution, (size, denom))
        pool, test = draws[:, :-1], draws[:, -1] + bias_test_score
        pnum = (pool >= test[:, None]).sum(axis=1) + 1
        accepted += int(np.count_nonzero(pnum > kmax))
        done += size

    rate = accepted / trials
    eps = mc_epsilon(alpha, trials)
    vacuous = n <= 1
    slack = 0.0 if vacuous else 1.0 / ((n - 1) * m + 1)
    lo, hi = 1.0 - alpha - eps, 1.0 - alpha + slack + eps
    violated = (rate < lo) or (not vacuous and rate > hi)
    return CoverageReport(
        mode="marginal", alpha_grid=(alpha,),
        empirical_reject_rate={alpha: 1.0 - rate}, epsilon={alpha: eps},
        violation={alpha: violated},
        ks_distance_to_uniform=float("nan"), trials=trials,
        acceptance_rate=rate,
        acceptance_bounds=(1.0 - alpha, 1.0 - alpha + slack),
        bound_vacuous=vacuous,
        notes=["bound vacuous (n=1)"] if vacuous else [],
    )


@dataclass(frozen=True)
class BudgetReport:
    target_alpha: float
    empirical_rate: float
    per_input_rates: dict[str, float]
    abs_error: float
    scope: str

    def to_csv_lines(self) -> list[str]:
        lines = ["input_id,reject_rate"]
        lines.append(f"__dataset__,{self.empirical_rate!r}")
        for input_id, rate in self.per_input_rates.items():
            lines.append(f"{input_id},{rate!r}")
        return lines


def budget_accuracy(trace: EpisodeTrace) -> BudgetReport:
    """Empirical rejection rate of an episode vs. its configured alpha.

    Reports the dataset-level rate plus the per-input distribution;
    abs_error is |rate - alpha| (the percentage-accuracy view is
    the labeled transform 1 - abs_error).
    """
    if trace.num_turns == 0:
        raise ValueError("empty trace")
    total = rejected = 0
    per_input_counts: dict[str, list[int]] = {}
    for chain, rec in trace.turn_records():
        total += 1
        is_rej = rec.decision == "rejected"
        rejected += is_rej
        c = per_input_counts.setdefault(chain.input_id, [0, 0])
        c[0] += 1
        c[1] += is_rej
    rate = rejected / total
    per_input = {iid: c[1] / c[0] for iid, c in per_input_counts.items()}
    return BudgetReport(
        target_alpha=trace.config.alpha,
        empirical_rate=rate,
        per_input_rates=per_input,
        abs_error=abs(rate - trace.config.alpha),
        scope=trace.config.coverage_mode,
    )


@dataclass(frozen=True)
class EfficiencyReport:
    makespan_sync: float
    makespan_async: float
    speedup: float
    tokens_draft: int
    tokens_target: int
    tokens_wasted: int
    throughput: float    # retained tokens per simulated second, async schedule

    def to_kv_lines(self) -> list[str]:
        return [
            f"makespan_sync={self.makespan_sync!r}",
            f"makespan_async={self.makespan_async!r}",
            f"speedup={self.speedup!r}",
            f"tokens_draft={self.tokens_draft}",
            f"tokens_target={self.tokens_target}",
            f"tokens_wasted={self.tokens_wasted}",
            f"throughput={self.throughput!r}",
        ]


def efficiency(schedule_sync: ScheduleTrace, schedule_async: ScheduleTrace,
               episode: EpisodeTrace) -> EfficiencyReport:
    """Speedup and token accounting for a pair of schedules of one episode."""
    fp = episode.fingerprint()
    if schedule_sync.episode_fingerprint != fp or schedule_async.episode_fingerprint != fp:
        raise ValueError("schedules do not derive from this episode")
    retained = episode.total_draft_tokens + episode.total_target_tokens - episode.wasted_draft_tokens
    return EfficiencyReport(
        makespan_sync=schedule_sync.makespan,
        makespan_async=schedule_async.makespan,
        speedup=schedule_sync.makespan / schedule_async.makespan,
        tokens_draft=episode.total_draft_tokens,
        tokens_target=episode.total_target_tokens,
        tokens_wasted=episode.wasted_draft_tokens,
        throughput=retained / schedule_async.makespan,
    )
