"""Three-stage rejection-sampling pipeline: draft, verify, takeover.

Each turn, every active chain drafts a block of up to k_d tokens, the
block's mean NLL is turned into a conformal p-value, and chains with
p <= alpha are taken over by the target model for up to k_t tokens.
Sequential scaling = more turns; parallel scaling = more chains per input.

Coverage modes:

* marginal -- every candidate is ranked against the one frozen calibration
  pool (a pure lookup; no communication between candidates).
* conditional -- the m candidates of one input rank against each other
  (leave-one-out), which pins the per-input rejection count to exactly
  floor(alpha * m) whenever scores are distinct: per-input batch budget
  control at the price of a small within-input synchronization.

Intervention modes: continueSampling keeps the rejected draft block as the
takeover prefix; resampling discards it (tokens counted as waste) and the
target regenerates.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .conformal import (
    CONDITIONAL,
    MARGINAL,
    CalibrationPool,
    PValueRecord,
    RejectionSet,
    marginal_p_value,
    rank_p_value,
    reject,
)
from .synthetic import ProcessParams, block_score, chain_rng, draft_block, target_block

CONTINUE_SAMPLING = "continue_sampling"
RESAMPLING = "resampling"
INTERVENTION_MODES = (CONTINUE_SAMPLING, RESAMPLING)

ACTIVE = "active"
ANSWERED = "answered"
TURN_LIMIT = "turn_limit"
TOKEN_LIMIT = "token_limit"


@dataclass(frozen=True)
class PipelineConfig:
    m: int = 16
    k_d: int = 500
    k_t: int = 500
    max_turns: int = 10
    token_limit: int = 8192
    alpha: float = 0.4
    coverage_mode: str = MARGINAL
    intervention_mode: str = CONTINUE_SAMPLING
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.k_d < 1 or self.k_t < 1 or self.max_turns < 1:
            raise ValueError("m, k_d, k_t and max_turns must be >= 1")
        if self.token_limit < self.k_d:
            raise ValueError("token_limit must be >= k_d")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must be in (0, 1)")
        if self.coverage_mode not in (MARGINAL, CONDITIONAL):
            raise ValueError(f"unknown coverage mode {self.coverage_mode!r}")
        if self.intervention_mode not in INTERVENTION_MODES:
            raise ValueError(f"unknown intervention mode {self.intervention_mode!r}")


@dataclass(frozen=True)
class TurnRecord:
    turn: int
    role: str                      # "target" when a takeover happened
    score: float
    p: PValueRecord
    decision: str                  # "accepted" | "rejected"
    tokens: int                    # tokens retained by the chain this turn
    draft_tokens: int = 0
    target_tokens: int = 0
    wasted_tokens: int = 0

    def to_json_obj(self, chain) -> dict:
        return {
            "chain_id": chain.candidate_id,
            "input_id": chain.input_id,
            "turn": self.turn,
            "role": self.role,
            "score": self.score,
            "p_num": self.p.numerator,
            "p_den": self.p.denominator,
            "mode": self.p.mode,
            "decision": self.decision,
            "tokens": self.tokens,
            "draft_tokens": self.draft_tokens,
            "target_tokens": self.target_tokens,
            "wasted_tokens": self.wasted_tokens,
        }


@dataclass
class ChainState:
    input_id: str
    candidate_id: str
    theta: float
    rng: np.random.Generator
    tokens_used: int = 0
    turn: int = 0
    status: str = ACTIVE
    ended_with_answer: bool = False
    history: list[TurnRecord] = field(default_factory=list)

    @property
    def is_active(self) -> bool:
        return self.status == ACTIVE


def check_termination(chain: ChainState, cfg: PipelineConfig) -> str:
    """Terminal status of a chain, priority answered > token_limit > turn_limit."""
    if chain.ended_with_answer:
        return ANSWERED
    if chain.tokens_used >= cfg.token_limit:
        return TOKEN_LIMIT
    if chain.turn >= cfg.max_turns:
        return TURN_LIMIT
    return ACTIVE


def spawn_chains(cfg: PipelineConfig, input_ids: Sequence[str],
                 params: ProcessParams) -> list[ChainState]:
    return [
        ChainState(
            input_id=input_id,
            candidate_id=f"{input_id}/{k}",
            theta=params.theta0,
            rng=chain_rng(cfg.seed, input_id, k),
        )
        for input_id in input_ids
        for k in range(cfg.m)
    ]


def _group_for_mode(chains: Sequence[ChainState], mode: str) -> list[list[ChainState]]:
    if mode == MARGINAL:
        return [list(chains)]
    groups: dict[str, list[ChainState]] = {}
    for chain in chains:
        groups.setdefault(chain.input_id, []).append(chain)
    return list(groups.values())


def run_turn(chains: Sequence[ChainState], pool: CalibrationPool, cfg: PipelineConfig,
             params: ProcessParams) -> tuple[list[ChainState], RejectionSet, list[TurnRecord]]:
    """Advance every active chain by one draft/verify/takeover turn."""
    active = [c for c in chains if c.is_active]
    if not active:
        raise ValueError("nothing to run")
    turn_index = active[0].turn
    records: list[TurnRecord] = []
    rejected_ids: list[str] = []
    accepted_ids: list[str] = []

    for group in _group_for_mode(active, cfg.coverage_mode):
        if any(c.turn != turn_index for c in group):
            raise ValueError("chains in one group must share a turn index")

        blocks = []
        scores = np.empty(len(group))
        for i, chain in enumerate(group):
            # the draft never drafts past the chain's remaining budget;
            # only a takeover block may overshoot (by < k_t)
            k_eff = min(cfg.k_d, cfg.token_limit - chain.tokens_used)
            block, theta_next = draft_block(chain.theta, k_eff, params,
                                            chain.rng, turn=chain.turn)
            blocks.append((block, theta_next))
            scores[i] = block_score(block)

        pvalues: list[PValueRecord] = []
        if cfg.coverage_mode == MARGINAL:
            for chain, s in zip(group, scores):
                pvalues.append(marginal_p_value(float(s), pool, chain.candidate_id))
        else:
            for i, chain in enumerate(group):
                others = np.delete(scores, i)
                num, den = rank_p_value(float(scores[i]), others)
                pvalues.append(PValueRecord(chain.candidate_id, num, den, CONDITIONAL))

        for chain, (block, theta_next), pvalue in zip(group, blocks, pvalues):
            is_rejected = reject(pvalue, cfg.alpha)
            chain.theta = theta_next
            draft_kept = block.length
            target_tokens = 0
            wasted = 0
            answered = block.ended_with_answer

            if is_rejected:
                if cfg.intervention_mode == RESAMPLING:
                    wasted = block.length
                    draft_kept = 0
                # a chain whose draft already exhausted the token budget is
                # terminal; the target does not take over a finished chain
                if chain.tokens_used + draft_kept < cfg.token_limit:
                    tblock, theta_after = target_block(chain.theta, cfg.k_t, params,
                                                       chain.rng, turn=chain.turn)
                    chain.theta = theta_after
                    target_tokens = tblock.length
                    answered = tblock.ended_with_answer
                rejected_ids.append(chain.candidate_id)
            else:
                accepted_ids.append(chain.candidate_id)

            retained = draft_kept + target_tokens
            chain.tokens_used += retained
            chain.turn += 1
            chain.ended_with_answer = answered
            record = TurnRecord(
                turn=turn_index,
                role="target" if is_rejected else "draft",
                score=float(block_score(block)),
                p=pvalue,
                decision="rejected" if is_rejected else "accepted",
                tokens=retained,
                draft_tokens=draft_kept,
                target_tokens=target_tokens,
                wasted_tokens=wasted,
            )
            chain.history.append(record)
            records.append(record)
            chain.status = check_termination(chain, cfg)

    rejection_set = RejectionSet(turn=turn_index, rejected=tuple(rejected_ids),
                                 accepted=tuple(accepted_ids), alpha=cfg.alpha)
    return list(chains), rejection_set, records


@dataclass
class EpisodeTrace:
    config: PipelineConfig
    chains: list[ChainState]
    per_turn_rejection_counts: list[int]
    total_draft_tokens: int
    total_target_tokens: int
    wasted_draft_tokens: int
    pool_hash: str

    @property
    def num_turns(self) -> int:
        return len(self.per_turn_rejection_counts)

    def turn_records(self) -> Iterable[tuple[ChainState, TurnRecord]]:
        for chain in self.chains:
            for record in chain.history:
                yield chain, record

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for chain, record in self.turn_records():
            h.update(json.dumps(record.to_json_obj(chain), sort_keys=True).encode())
        return h.hexdigest()

    def to_jsonl_lines(self) -> list[str]:
        return [json.dumps(record.to_json_obj(chain), separators=(",", ":"))
                for chain, record in self.turn_records()]

    def summary_csv_lines(self) -> list[str]:
        lines = ["turn,rejections,draft_tokens,target_tokens,wasted_tokens"]
        for t in range(self.num_turns):
            draft = target = wasted = 0
            for _, rec in self.turn_records():
                if rec.turn == t:
                    draft += rec.draft_tokens + rec.wasted_tokens
                    target += rec.target_tokens
                    wasted += rec.wasted_tokens
            lines.append(f"{t},{self.per_turn_rejection_counts[t]},{draft},{target},{wasted}")
        return lines


def run_episode(cfg: PipelineConfig, pool: CalibrationPool,
                params: ProcessParams | None = None,
                input_ids: Sequence[str] | None = None) -> EpisodeTrace:
    """Run chains for every input until all are terminal.

    Inputs default to the pool's input ids (online calibration has already
    pre-sampled those inputs). Deterministic per cfg.seed: every chain owns
    a labeled rng stream, so results are independent of iteration order.
    """
    params = params or ProcessParams()
    if input_ids is None:
        input_ids = pool.input_ids
    chains = spawn_chains(cfg, input_ids, params)
    per_turn_rejections: list[int] = []
    while any(c.is_active for c in chains):
        _, rejection_set, _ = run_turn(chains, pool, cfg, params)
        per_turn_rejections.append(len(rejection_set.rejected))

    total_draft = sum(r.draft_tokens + r.wasted_tokens for c in chains for r in c.history)
    total_target = sum(r.target_tokens for c in chains for r in c.history)
    wasted = sum(r.wasted_tokens for c in chains for r in c.history)
    return EpisodeTrace(
        config=cfg,
        chains=chains,
        per_turn_rejection_counts=per_turn_rejections,
        total_draft_tokens=total_draft,
        total_target_tokens=total_target,
        wasted_draft_tokens=wasted,
        pool_hash=pool.content_hash,
    )
