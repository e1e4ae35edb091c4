"""Conformal rejection-sampling gate for draft/target test-time scaling.

Core surfaces:

* conformal  -- scores, frozen calibration pools, exact p-values, budgets
* synthetic  -- seeded draft/target stand-ins and exchangeable generators
* pipeline   -- the per-turn draft/verify/takeover loop
* simkernel  -- sync-vs-async discrete-event cost simulator
* metrics    -- Monte-Carlo verification of the coverage guarantees
* cli        -- `specgate calibrate|run|verify|sweep`
"""

__version__ = "0.1.0"

from .conformal import (
    CalibrationPool,
    PValueRecord,
    RejectionSet,
    BudgetSpec,
    ClassicThreshold,
    budget_for,
    build_rejection_set,
    classic_prediction_set,
    classic_threshold,
    conditional_p_value,
    marginal_p_value,
    nll_score,
    online_calibrate,
    reject,
    softmax_conformity,
)
from .pipeline import ChainState, EpisodeTrace, PipelineConfig, TurnRecord, run_episode, run_turn
from .simkernel import (
    CostModel,
    IntensityReport,
    ScheduleTrace,
    arithmetic_intensity,
    async_intensity,
    intensity_of,
    simulate_async,
    simulate_sync,
)
from .synthetic import ProcessParams, TokenBlock, draft_block, gen_exchangeable_scores, target_block

__all__ = [
    "BudgetSpec",
    "CalibrationPool",
    "ChainState",
    "ClassicThreshold",
    "CostModel",
    "EpisodeTrace",
    "IntensityReport",
    "PValueRecord",
    "PipelineConfig",
    "ProcessParams",
    "RejectionSet",
    "ScheduleTrace",
    "TokenBlock",
    "TurnRecord",
    "arithmetic_intensity",
    "async_intensity",
    "budget_for",
    "build_rejection_set",
    "classic_prediction_set",
    "classic_threshold",
    "conditional_p_value",
    "draft_block",
    "gen_exchangeable_scores",
    "intensity_of",
    "marginal_p_value",
    "nll_score",
    "online_calibrate",
    "reject",
    "run_episode",
    "run_turn",
    "simulate_async",
    "simulate_sync",
    "softmax_conformity",
    "target_block",
]
