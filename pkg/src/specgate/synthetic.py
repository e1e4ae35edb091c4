"""Seeded stochastic stand-ins for the draft and target models.

A chain's latent quality theta drives its per-token NLL distribution:
lower theta means lower expected NLL. Draft sampling drifts theta upward
(quality degrades turn over turn); a target takeover pulls it back down.
Per-token NLLs are lognormal with log-median linear in theta, so scores
are positive and heavy-tailed like real per-token losses.

Every generator is a pure function of (state, params, rng); replay with
the same seed reproduces emitted logprobs bitwise.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .conformal import CalibrationPool, nll_score
from .records import RecordScoreSource

DISTRIBUTIONS = ("normal", "uniform", "lognormal", "distinct-uniform")


def logistic_hazard(midpoint: float = 8.0, scale: float = 1.5) -> Callable[[int], float]:
    """Answer hazard rising with turn index, reaching 0.5 at `midpoint`."""

    def hazard(turn: int) -> float:
        return 1.0 / (1.0 + math.exp(-(turn - midpoint) / scale))

    return hazard


@dataclass(frozen=True)
class ProcessParams:
    """Parameters of the synthetic draft/target quality process.

    draft_drift_mean / target_pull_mean move theta per block; noise_std is
    the per-move Gaussian jitter. The NLL model maps theta to a lognormal
    over per-token NLLs with log-median nll_loc_base + nll_loc_scale*theta.
    Defaults are tuned so that draft-only chains degrade monotonically and
    takeovers at alpha=0.4 are enough to reverse the trend.
    """

    draft_drift_mean: float = 0.08
    target_pull_mean: float = 0.35
    noise_std: float = 0.05
    answer_hazard: Callable[[int], float] = field(default_factory=logistic_hazard)
    nll_loc_base: float = -1.2
    nll_loc_scale: float = 0.5
    nll_sigma: float = 0.35
    theta0: float = 1.0
    target_emission_edge: float = 0.25   # target blocks emit as if theta were lower

    def __post_init__(self):
        if self.draft_drift_mean <= 0 or self.target_pull_mean <= 0:
            raise ValueError("drift and pull means must be > 0")
        if self.noise_std < 0 or self.nll_sigma < 0:
            raise ValueError("standard deviations must be >= 0")
        if self.nll_loc_scale <= 0:
            raise ValueError("nll_loc_scale must be > 0")
        if self.target_emission_edge < 0:
            raise ValueError("target_emission_edge must be >= 0")


@dataclass(frozen=True)
class TokenBlock:
    role: str
    token_logprobs: tuple[float, ...]
    ended_with_answer: bool

    def __post_init__(self):
        if len(self.token_logprobs) < 1:
            raise ValueError("empty block")

    @property
    def length(self) -> int:
        return len(self.token_logprobs)


def _emit_block(role: str, theta: float, k: int, turn: int, params: ProcessParams,
                rng: np.random.Generator) -> TokenBlock:
    ended = bool(rng.random() < params.answer_hazard(turn))
    length = int(rng.integers(1, k + 1)) if ended else k
    if role == "target":
        theta = theta - params.target_emission_edge
    loc = params.nll_loc_base + params.nll_loc_scale * theta
    nlls = rng.lognormal(mean=loc, sigma=params.nll_sigma, size=length)
    return TokenBlock(role=role, token_logprobs=tuple(-nlls), ended_with_answer=ended)


def draft_block(theta: float, k_d: int, params: ProcessParams,
                rng: np.random.Generator, turn: int = 0) -> tuple[TokenBlock, float]:
    """Sample one draft block; theta drifts up (quality degrades)."""
    if k_d < 1:
        raise ValueError("k_d must be >= 1")
    block = _emit_block("draft", theta, k_d, turn, params, rng)
    theta_next = theta + params.draft_drift_mean + rng.normal(0.0, params.noise_std)
    return block, theta_next


def target_block(theta: float, k_t: int, params: ProcessParams,
                 rng: np.random.Generator, turn: int = 0) -> tuple[TokenBlock, float]:
    """Sample one target takeover block; theta is pulled down (quality recovers)."""
    if k_t < 1:
        raise ValueError("k_t must be >= 1")
    block = _emit_block("target", theta, k_t, turn, params, rng)
    theta_next = theta - params.target_pull_mean + rng.normal(0.0, params.noise_std)
    return block, theta_next


def block_score(block: TokenBlock) -> float:
    return nll_score(block.token_logprobs)


def _label_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def chain_rng(root_seed: int, input_id: str, candidate: int, tag: str = "chain") -> np.random.Generator:
    """Per-chain generator stream derived from a root seed by stable labels.

    Chains may be advanced concurrently; the stream depends only on the
    (seed, input, candidate, tag) labels, never on interleaving.
    """
    ss = np.random.SeedSequence([int(root_seed), _label_int(f"{tag}/{input_id}"), int(candidate)])
    return np.random.default_rng(ss)


def gen_exchangeable_scores(n: int, m: int, distribution: str, seed: int) -> CalibrationPool:
    """An i.i.d. pool for the statistical verification suite.

    distinct-uniform redraws the whole pool until all values are pairwise
    distinct at 1e-12 resolution, matching the distinct-score
    hypothesis of the coverage guarantees.
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCA1]))
    scores = draw_scores(rng, distribution, (n, m))
    return CalibrationPool([f"cal-{i}" for i in range(n)], scores)


def draw_scores(rng: np.random.Generator, distribution: str, shape) -> np.ndarray:
    if distribution == "normal":
        return rng.standard_normal(shape)
    if distribution == "uniform":
        return rng.uniform(0.0, 1.0, shape)
    if distribution == "lognormal":
        return rng.lognormal(0.0, 1.0, shape)
    if distribution == "distinct-uniform":
        flat = rng.uniform(0.0, 1.0, int(np.prod(shape)))
        while True:
            rounded = np.round(flat / 1e-12).astype(np.int64)
            _, first_idx = np.unique(rounded, return_index=True)
            if first_idx.size == flat.size:
                return flat.reshape(shape)
            dup = np.ones(flat.size, dtype=bool)
            dup[first_idx] = False
            flat[dup] = rng.uniform(0.0, 1.0, int(dup.sum()))
    if distribution == "constant":
        # total-tie degeneracy, for negative tests of the distinct-score clauses
        return np.zeros(shape)
    raise ValueError(f"unknown distribution {distribution!r}")


def synthetic_calibration_source(params: ProcessParams, k_d: int, root_seed: int) -> Callable[[str, int], float]:
    """Score source for online calibration: pre-sample one draft block per cell.

    Draws are exchangeable with first-turn pipeline candidates (same theta0,
    same drift step, same block length), which is what makes the frozen pool
    a valid reference for turn-1 p-values. Each cell has its own seed stream,
    so cells are order-independent.
    """

    def source(input_id: str, sample_id: int) -> float:
        rng = chain_rng(root_seed, input_id, sample_id, tag="calibrate")
        block, _ = draft_block(params.theta0, k_d, params, rng, turn=0)
        return block_score(block)

    return source


def score_source_from_records(path) -> RecordScoreSource:
    """Replay a recorded trace file as a score source (exact mean NLLs)."""
    return RecordScoreSource.from_path(path)


def correctness_label(theta_final: float, rng: np.random.Generator) -> bool:
    """Optional Bernoulli(sigmoid(-theta)) label for accuracy-style plots."""
    return bool(rng.random() < 1.0 / (1.0 + math.exp(theta_final)))
