"""Deterministic cost simulator: sync vs. async scheduling of an episode.

Replays an EpisodeTrace as compute events (draft block, verify prefill,
target block) on one or two device timelines and prices them with a
CostModel. The sync schedule advances all chains in lockstep turns with a
ranking barrier per turn; the async schedule lets chains free-run, paying
only a constant per-candidate verify lookup.

Event durations follow the roofline convention max(t_c*F, t_m*B); the
intensity report aggregates F, bytes, and times across the schedule.
Synchronization time in the report is chain-experienced: at a barrier
every active chain waits out the whole barrier, while an async lookup is
private to its chain. This is what makes sync r = T_c/(T_m+T_s) degrade
as concurrency grows even though each barrier is only linear in the
number of candidates.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .pipeline import EpisodeTrace

SYNC = "sync"
ASYNC = "async"

DRAFT_BLOCK = "draftBlock"
VERIFY = "verify"
TARGET_BLOCK = "targetBlock"
BARRIER = "barrier"

_KIND_ORDER = {DRAFT_BLOCK: 0, VERIFY: 1, TARGET_BLOCK: 2}


@dataclass(frozen=True)
class CostModel:
    """Per-unit prices for compute, memory traffic, and synchronization.

    flops/bytes factors are per token by event kind; verify events bill
    target-model prefill FLOPs over the scored block with its own (weight-
    amortized) bytes factor. The per-turn sync barrier costs
    barrier_base + barrier_cost_per_candidate * active * (1+sync_growth)^turn.
    Async verification replaces the barrier with a constant per-candidate
    lookup; keep verify_lookup_cost <= barrier_cost_per_candidate so that
    removing barriers can never slow a schedule down (the async-dominance
    guarantee assumes it).
    """

    t_c: float = 1e-14            # seconds per FLOP-unit
    t_m: float = 5e-13            # seconds per byte-unit
    draft_flops_per_token: float = 3e9
    target_flops_per_token: float = 6.4e10
    verify_flops_per_token: float = 6.4e10   # target prefill over the draft block
    draft_bytes_per_token: float = 3.5e9
    target_bytes_per_token: float = 6.6e10
    verify_bytes_per_token: float = 1.2e9    # weights amortized across the block
    kv_bytes_per_token: float = 1e5
    capacity_bytes: float = 8e10
    barrier_base: float = 0.05
    barrier_cost_per_candidate: float = 0.01
    sync_growth: float = 0.3       # f(turn) = (1 + g)^turn
    verify_lookup_cost: float = 1e-4
    separate_devices: bool = True

    def __post_init__(self):
        for name in ("t_c", "t_m", "draft_flops_per_token", "target_flops_per_token",
                     "verify_flops_per_token", "draft_bytes_per_token",
                     "target_bytes_per_token", "verify_bytes_per_token",
                     "kv_bytes_per_token", "barrier_base", "barrier_cost_per_candidate",
                     "sync_growth", "verify_lookup_cost"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be > 0")

    def flops(self, kind: str, tokens: int) -> float:
        factor = {DRAFT_BLOCK: self.draft_flops_per_token,
                  VERIFY: self.verify_flops_per_token,
                  TARGET_BLOCK: self.target_flops_per_token}[kind]
        return factor * tokens

    def bytes_moved(self, kind: str, tokens: int) -> float:
        factor = {DRAFT_BLOCK: self.draft_bytes_per_token,
                  VERIFY: self.verify_bytes_per_token,
                  TARGET_BLOCK: self.target_bytes_per_token}[kind]
        return factor * tokens

    def compute_duration(self, kind: str, tokens: int) -> float:
        return max(self.t_c * self.flops(kind, tokens),
                   self.t_m * self.bytes_moved(kind, tokens))

    def barrier_duration(self, active: int, turn: int) -> float:
        return self.barrier_base + self.barrier_cost_per_candidate * active * (
            (1.0 + self.sync_growth) ** turn)

    def device_of(self, kind: str) -> str:
        if not self.separate_devices:
            return "dev0"
        return "draft" if kind == DRAFT_BLOCK else "target"


@dataclass(frozen=True)
class Event:
    start: float
    end: float
    kind: str
    chain_id: str
    tokens: int
    device: str

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class ScheduleTrace:
    mode: str
    events: list[Event]
    makespan: float
    peak_memory_bytes: float
    oom: bool
    per_turn_sync_time: list[float]
    per_turn_active: list[int]
    episode_fingerprint: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time_start", "time_end", "kind", "chain_id", "tokens", "device"])
        for ev in self.events:
            writer.writerow([repr(ev.start), repr(ev.end), ev.kind, ev.chain_id,
                             ev.tokens, ev.device])
        return buf.getvalue()


def arithmetic_intensity(flops: float, bytes_moved: float) -> float:
    """Classic roofline intensity I = F / B."""
    if bytes_moved == 0:
        raise ValueError("undefined intensity")
    return flops / bytes_moved


def async_intensity(t_c: float, t_m: float, t_s: float) -> float:
    """r = T_c / (T_m + T_s); small r means synchronization dominates."""
    if t_m + t_s == 0:
        raise ValueError("undefined intensity")
    return t_c / (t_m + t_s)


@dataclass(frozen=True)
class IntensityReport:
    flops: float
    bytes_moved: float
    intensity: float
    t_c: float
    t_m: float
    t_s: float
    r: float
    r_approx: float | None    # T_c / T_s, meaningful when T_m << T_s

    def to_kv_lines(self) -> list[str]:
        lines = [
            f"flops={self.flops!r}",
            f"bytes={self.bytes_moved!r}",
            f"intensity={self.intensity!r}",
            f"t_c={self.t_c!r}",
            f"t_m={self.t_m!r}",
            f"t_s={self.t_s!r}",
            f"r={self.r!r}",
        ]
        if self.r_approx is not None:
            lines.append(f"r_approx={self.r_approx!r}")
        return lines


class _WorkItem:
    __slots__ = ("turn", "kind", "chain_id", "chain_index", "tokens")

    def __init__(self, turn, kind, chain_id, chain_index, tokens):
        self.turn = turn
        self.kind = kind
        self.chain_id = chain_id
        self.chain_index = chain_index
        self.tokens = tokens


def _episode_work(trace: EpisodeTrace) -> tuple[list[_WorkItem], int]:
    """Flatten an episode into schedulable work items.

    The verify item scores the block as drafted (retained + wasted tokens);
    the draft item bills the same tokens since the draft model generated
    them whether or not they were kept.
    """
    work: list[_WorkItem] = []
    for idx, chain in enumerate(trace.chains):
        for rec in chain.history:
            drafted = rec.draft_tokens + rec.wasted_tokens
            work.append(_WorkItem(rec.turn, DRAFT_BLOCK, chain.candidate_id, idx, drafted))
            work.append(_WorkItem(rec.turn, VERIFY, chain.candidate_id, idx, drafted))
            if rec.target_tokens:
                work.append(_WorkItem(rec.turn, TARGET_BLOCK, chain.candidate_id,
                                      idx, rec.target_tokens))
    return work, trace.num_turns


def _ordered(work: list[_WorkItem]) -> list[_WorkItem]:
    return sorted(work, key=lambda w: (w.turn, _KIND_ORDER[w.kind], w.chain_index))


def _memory_profile(events: list[Event], cost: CostModel,
                    chain_end: dict[str, float]) -> float:
    """Peak resident KV bytes: blocks occupy memory from completion until
    their chain's last event; a chain frees everything on termination."""
    deltas: list[tuple[float, int, float]] = []
    for ev in events:
        if ev.kind in (DRAFT_BLOCK, TARGET_BLOCK) and ev.tokens:
            deltas.append((ev.end, 0, cost.kv_bytes_per_token * ev.tokens))
    for chain_id, t_end in chain_end.items():
        freed = sum(cost.kv_bytes_per_token * ev.tokens for ev in events
                    if ev.chain_id == chain_id and ev.kind in (DRAFT_BLOCK, TARGET_BLOCK))
        deltas.append((t_end, 1, -freed))
    deltas.sort(key=lambda d: (d[0], d[1]))
    level = peak = 0.0
    for _, _, delta in deltas:
        level += delta
        peak = max(peak, level)
    return peak


def _finalize(mode: str, trace: EpisodeTrace, cost: CostModel, events: list[Event],
              per_turn_sync: list[float], per_turn_active: list[int]) -> ScheduleTrace:
    events = sorted(events, key=lambda e: (e.start, e.end, e.chain_id))
    makespan = max((e.end for e in events), default=0.0)
    chain_end: dict[str, float] = {}
    for ev in events:
        if ev.chain_id != "-":
            chain_end[ev.chain_id] = max(chain_end.get(ev.chain_id, 0.0), ev.end)
    peak = _memory_profile(events, cost, chain_end)
    return ScheduleTrace(
        mode=mode,
        events=events,
        makespan=makespan,
        peak_memory_bytes=peak,
        oom=peak > cost.capacity_bytes,
        per_turn_sync_time=per_turn_sync,
        per_turn_active=per_turn_active,
        episode_fingerprint=trace.fingerprint(),
    )


def _active_per_turn(work: list[_WorkItem], num_turns: int) -> list[int]:
    active = [set() for _ in range(num_turns)]
    for item in work:
        active[item.turn].add(item.chain_id)
    return [len(s) for s in active]


def simulate_sync(trace: EpisodeTrace, cost: CostModel) -> ScheduleTrace:
    """Lockstep schedule: per turn, draft phase, verify phase, ranking
    barrier, then takeover phase; no chain crosses a turn boundary early."""
    work, num_turns = _episode_work(trace)
    per_turn_active = _active_per_turn(work, num_turns)
    events: list[Event] = []
    per_turn_sync: list[float] = []
    device_free: dict[str, float] = {}
    clock = 0.0
    by_turn: dict[int, list[_WorkItem]] = {}
    for item in work:
        by_turn.setdefault(item.turn, []).append(item)

    for turn in range(num_turns):
        items = _ordered(by_turn.get(turn, []))
        for phase in (DRAFT_BLOCK, VERIFY, TARGET_BLOCK):
            if phase == TARGET_BLOCK:
                # ranking barrier between verification and takeovers
                dur = cost.barrier_duration(per_turn_active[turn], turn)
                barrier_start = max([clock] + [device_free[d] for d in device_free])
                events.append(Event(barrier_start, barrier_start + dur, BARRIER,
                                    "-", 0, "all"))
                per_turn_sync.append(dur)
                clock = barrier_start + dur
                device_free = {d: clock for d in device_free}
            phase_start = max([clock] + list(device_free.values()))
            for item in items:
                if item.kind != phase:
                    continue
                dev = cost.device_of(item.kind)
                start = max(phase_start, device_free.get(dev, 0.0))
                end = start + cost.compute_duration(item.kind, item.tokens)
                device_free[dev] = end
                events.append(Event(start, end, item.kind, item.chain_id,
                                    item.tokens, dev))
            clock = max([clock] + list(device_free.values()))
        device_free = {d: clock for d in device_free}

    return _finalize(SYNC, trace, cost, events, per_turn_sync, per_turn_active)


def simulate_async(trace: EpisodeTrace, cost: CostModel) -> ScheduleTrace:
    """Free-running schedule: each chain's events chain locally (draft ->
    verify -> takeover -> next turn); devices serve items in the same
    deterministic order as the sync schedule, minus barriers. Verification
    pays only a constant per-candidate lookup on top of scoring."""
    work, num_turns = _episode_work(trace)
    per_turn_active = _active_per_turn(work, num_turns)
    events: list[Event] = []
    device_free: dict[str, float] = {}
    chain_ready: dict[str, float] = {}

    for item in _ordered(work):
        dev = cost.device_of(item.kind)
        dur = cost.compute_duration(item.kind, item.tokens)
        if item.kind == VERIFY:
            dur += cost.verify_lookup_cost
        start = max(chain_ready.get(item.chain_id, 0.0), device_free.get(dev, 0.0))
        end = start + dur
        device_free[dev] = end
        chain_ready[item.chain_id] = end
        events.append(Event(start, end, item.kind, item.chain_id, item.tokens, dev))

    per_turn_sync = [cost.verify_lookup_cost * a for a in per_turn_active]
    return _finalize(ASYNC, trace, cost, events, per_turn_sync, per_turn_active)


def intensity_of(schedule: ScheduleTrace, cost: CostModel) -> IntensityReport:
    """Aggregate F, bytes and times of a schedule into I and r.

    T_s is chain-experienced synchronization: every chain active at a sync
    barrier waits out the whole barrier, while async lookups are private.
    """
    flops = bytes_moved = 0.0
    for ev in schedule.events:
        if ev.kind in (DRAFT_BLOCK, VERIFY, TARGET_BLOCK):
            flops += cost.flops(ev.kind, ev.tokens)
            bytes_moved += cost.bytes_moved(ev.kind, ev.tokens)
    intensity = arithmetic_intensity(flops, bytes_moved)
    t_c = cost.t_c * flops
    t_m = cost.t_m * bytes_moved
    if schedule.mode == SYNC:
        t_s = sum(a * s for a, s in zip(schedule.per_turn_active,
                                        schedule.per_turn_sync_time))
    else:
        t_s = sum(schedule.per_turn_sync_time)
    r = async_intensity(t_c, t_m, t_s)
    r_approx = (t_c / t_s) if t_s > 0 else None
    return IntensityReport(flops=flops, bytes_moved=bytes_moved, intensity=intensity,
                           t_c=t_c, t_m=t_m, t_s=t_s, r=r, r_approx=r_approx)
