"""Command-line entry point: calibrate | run | verify | sweep.

Every command is idempotent given (config, seed): reruns overwrite their
outputs with identical bytes. Exit codes: 0 ok, 2 config error, 3 I/O
error, 4 internal invariant violation, 5 statistical bound violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import metrics as M
from .config import ConfigError, ExperimentConfig, load_config
from .conformal import CONDITIONAL, CalibrationError, CalibrationPool, online_calibrate
from .pipeline import EpisodeTrace, PipelineConfig, run_episode
from .records import RecordFormatError, read_pool_file, write_pool_file
from .simkernel import intensity_of, simulate_async, simulate_sync
from .synthetic import score_source_from_records, synthetic_calibration_source

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVARIANT = 4
EXIT_BOUND = 5

MIN_TRIALS = 1_000


class InvariantError(RuntimeError):
    pass


class BoundViolation(RuntimeError):
    pass


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_lines(path: Path, lines) -> None:
    _write_text(path, "\n".join(lines) + "\n")


def _input_ids(cfg: ExperimentConfig) -> list[str]:
    return [f"q-{i:04d}" for i in range(cfg.inputs_count)]


def build_pool(cfg: ExperimentConfig) -> CalibrationPool:
    if cfg.source == "synthetic":
        source = synthetic_calibration_source(cfg.process, cfg.effective_calibration_k_d,
                                              cfg.seed)
        return online_calibrate(_input_ids(cfg), cfg.calibration_samples, source)
    if cfg.source == "records":
        if not cfg.records_path:
            raise ConfigError("source=records requires records_path")
        replay = score_source_from_records(cfg.records_path)
        input_ids = replay.input_ids
        if not input_ids:
            raise ConfigError(f"records file {cfg.records_path!r} has no records")
        return online_calibrate(input_ids, cfg.calibration_samples,
                                lambda iid, j: replay(iid, j, 0))
    raise ConfigError(f"unknown source {cfg.source!r}")


def cmd_calibrate(cfg: ExperimentConfig, out_dir: Path) -> int:
    pool = build_pool(cfg)
    pool_path = out_dir / "pool.jsonl"
    pool_path.parent.mkdir(parents=True, exist_ok=True)
    write_pool_file(pool_path, pool)
    print(f"calibrated pool: n={pool.n} m={pool.m} hash={pool.content_hash}")
    print(f"wrote {pool_path}")
    return EXIT_OK


def _check_episode_invariants(episode: EpisodeTrace) -> None:
    total = sum(rec.tokens for _, rec in episode.turn_records())
    wasted = sum(rec.wasted_tokens for _, rec in episode.turn_records())
    if episode.total_draft_tokens + episode.total_target_tokens != total + wasted:
        raise InvariantError("token conservation violated")
    rejected = sum(rec.decision == "rejected" for _, rec in episode.turn_records())
    if rejected != sum(episode.per_turn_rejection_counts):
        raise InvariantError("rejection counts inconsistent")


def run_once(cfg: ExperimentConfig, pool: CalibrationPool):
    """Episode + both schedules + reports for one configuration."""
    episode = run_episode(cfg.pipeline, pool, cfg.process)
    _check_episode_invariants(episode)
    sched_sync = simulate_sync(episode, cfg.cost)
    sched_async = simulate_async(episode, cfg.cost)
    budget = M.budget_accuracy(episode)
    eff = M.efficiency(sched_sync, sched_async, episode)
    return episode, sched_sync, sched_async, budget, eff


def _load_pool(cfg: ExperimentConfig, pool_path: Path) -> CalibrationPool:
    pool = read_pool_file(pool_path)
    if cfg.pool_hash and pool.content_hash != cfg.pool_hash:
        raise ConfigError(
            f"pool hash {pool.content_hash} does not match pinned {cfg.pool_hash}")
    if cfg.pipeline.coverage_mode == CONDITIONAL and pool.n != cfg.inputs_count:
        raise ConfigError("conditional mode requires grouped pool")
    return pool


def cmd_run(cfg: ExperimentConfig, out_dir: Path, pool_path: Path) -> int:
    pool = _load_pool(cfg, pool_path)
    episode, sched_sync, sched_async, budget, eff = run_once(cfg, pool)

    _write_lines(out_dir / "episode.jsonl", episode.to_jsonl_lines())
    _write_text(out_dir / "sync.csv", sched_sync.to_csv())
    _write_text(out_dir / "async.csv", sched_async.to_csv())
    _write_lines(out_dir / "episode_summary.csv", episode.summary_csv_lines())

    decisions_per_turn = _decisions_per_turn(episode)
    fig5 = ["turn,reject_rate"]
    fig7b = ["turn,takeovers"]
    for t, rejections in enumerate(episode.per_turn_rejection_counts):
        rate = rejections / decisions_per_turn[t] if decisions_per_turn[t] else 0.0
        fig5.append(f"{t},{rate!r}")
        fig7b.append(f"{t},{rejections}")
    _write_lines(out_dir / "fig5_budget.csv", fig5)
    _write_lines(out_dir / "fig7b_takeovers.csv", fig7b)

    report_sync = intensity_of(sched_sync, cfg.cost)
    report_async = intensity_of(sched_async, cfg.cost)
    summary = [
        f"pool_hash={pool.content_hash}",
        f"turns={episode.num_turns}",
        f"chains={len(episode.chains)}",
        f"alpha={cfg.pipeline.alpha!r}",
        f"coverage_mode={cfg.pipeline.coverage_mode}",
        f"intervention_mode={cfg.pipeline.intervention_mode}",
        f"reject_rate={budget.empirical_rate!r}",
        f"budget_abs_error={budget.abs_error!r}",
        f"peak_memory_sync={sched_sync.peak_memory_bytes!r}",
        f"peak_memory_async={sched_async.peak_memory_bytes!r}",
        f"oom_sync={int(sched_sync.oom)}",
        f"oom_async={int(sched_async.oom)}",
    ]
    summary += eff.to_kv_lines()
    summary += [f"sync_{line}" for line in report_sync.to_kv_lines()]
    summary += [f"async_{line}" for line in report_async.to_kv_lines()]
    _write_lines(out_dir / "summary.txt", summary)

    print(f"episode: {episode.num_turns} turns, reject_rate={budget.empirical_rate:.4f}, "
          f"speedup={eff.speedup:.3f}")
    print(f"wrote outputs to {out_dir}")
    return EXIT_OK


def _decisions_per_turn(episode: EpisodeTrace) -> list[int]:
    counts = [0] * episode.num_turns
    for _, rec in episode.turn_records():
        counts[rec.turn] += 1
    return counts


def cmd_verify(cfg: ExperimentConfig, out_dir: Path) -> int:
    v = cfg.verify
    if v.trials < MIN_TRIALS:
        raise ConfigError(f"insufficient trials ({v.trials} < {MIN_TRIALS})")
    marginal = M.verify_marginal_validity(
        v.distribution, v.n, v.m, v.alpha_grid, v.trials, cfg.seed,
        bias_test_score=v.bias_test_score)
    conditional = M.verify_conditional_validity(
        v.distribution, v.n, v.conditional_m, v.alpha_grid, v.trials, cfg.seed,
        bias_test_score=v.bias_test_score)
    simultaneous = M.verify_simultaneous_coverage(
        v.n, v.m, v.alpha, v.trials, cfg.seed, v.distribution,
        bias_test_score=v.bias_test_score)

    _write_lines(out_dir / "coverage_marginal.csv", marginal.to_csv_lines())
    _write_lines(out_dir / "coverage_conditional.csv", conditional.to_csv_lines())
    _write_lines(out_dir / "coverage_simultaneous.csv", simultaneous.to_csv_lines())
    summary = [
        f"marginal_ks={marginal.ks_distance_to_uniform!r}",
        f"conditional_ks={conditional.ks_distance_to_uniform!r}",
        f"simultaneous_acceptance={simultaneous.acceptance_rate!r}",
        f"marginal_ok={int(marginal.ok)}",
        f"conditional_ok={int(conditional.ok)}",
        f"simultaneous_ok={int(simultaneous.ok)}",
    ]
    _write_lines(out_dir / "coverage_summary.txt", summary)

    for name, report in (("marginal", marginal), ("conditional", conditional),
                         ("simultaneous", simultaneous)):
        if not report.ok:
            bad = [a for a, flag in report.violation.items() if flag]
            raise BoundViolation(f"{name} coverage bound violated at alpha={bad}")
    print(f"coverage verified: trials={v.trials}, marginal KS="
          f"{marginal.ks_distance_to_uniform:.4f}")
    return EXIT_OK


def _sweep_points(cfg: ExperimentConfig, axis: str):
    s = cfg.sweep
    base = cfg.pipeline
    if axis == "alpha":
        return [(a, _replace_pipeline(base, alpha=a)) for a in s.alpha_list]
    if axis == "m":
        return [(m, _replace_pipeline(base, m=m)) for m in s.m_list]
    if axis == "k_d":
        return [(k, _replace_pipeline(base, k_d=k)) for k in s.k_d_list]
    if axis == "turns":
        return [(t, _replace_pipeline(base, max_turns=t)) for t in s.turns_list]
    raise ConfigError(f"unknown axis {axis!r}")


def _replace_pipeline(base: PipelineConfig, **kw) -> PipelineConfig:
    return dataclasses.replace(base, **kw)


def _trend(values) -> str:
    increasing = all(b >= a for a, b in zip(values, values[1:]))
    decreasing = all(b <= a for a, b in zip(values, values[1:]))
    if increasing and decreasing:
        return "flat"
    if increasing:
        return "non-decreasing"
    if decreasing:
        return "non-increasing"
    return "mixed"


def cmd_sweep(cfg: ExperimentConfig, out_dir: Path, axis: str) -> int:
    axis = axis.lower()
    points = _sweep_points(cfg, axis)
    rows = []
    for value, pipe in points:
        point_cfg = dataclasses.replace(cfg, pipeline=pipe, pool_hash="")
        pool = build_pool(point_cfg)
        episode, sched_sync, sched_async, budget, eff = run_once(point_cfg, pool)
        r_sync = intensity_of(sched_sync, cfg.cost).r
        r_async = intensity_of(sched_async, cfg.cost).r
        rows.append({
            "point": value,
            "reject_rate": budget.empirical_rate,
            "abs_error": budget.abs_error,
            "peak_memory_sync": sched_sync.peak_memory_bytes,
            "total_sync_time": sum(sched_sync.per_turn_sync_time),
            "r_sync": r_sync,
            "r_async": r_async,
            "makespan_sync": sched_sync.makespan,
            "makespan_async": sched_async.makespan,
            "speedup": eff.speedup,
        })

    header = ["point"] + [k for k in rows[0] if k != "point"]
    table = [",".join(header)]
    for row in rows:
        table.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                              for k in header))
    _write_lines(out_dir / f"sweep_{axis}.csv", table)

    def series(name: str, key: str) -> list[float]:
        _write_lines(out_dir / name,
                     [f"{axis},{key}"] + [f"{r['point']},{r[key]!r}" for r in rows])
        return [r[key] for r in rows]

    trends = []
    if axis == "m":
        trends.append(("fig1_memory", series("fig1_memory.csv", "peak_memory_sync")))
        trends.append(("fig3a_sync_latency", series("fig3a_sync_latency.csv", "total_sync_time")))
        trends.append(("fig4b_r_vs_m", series("fig4b_r_vs_m.csv", "r_sync")))
        trends.append(("fig4b_r_vs_m_async", series("fig4b_r_vs_m_async.csv", "r_async")))
    elif axis == "alpha":
        trends.append(("fig5_budget", series("fig5_budget.csv", "abs_error")))
        trends.append(("takeover_rate", series("fig6_reject_rate.csv", "reject_rate")))
    elif axis == "turns":
        trends.append(("fig3b_sync_latency", series("fig3b_sync_latency.csv", "total_sync_time")))
    elif axis == "k_d":
        trends.append(("fig5_budget", series("fig5_budget.csv", "abs_error")))

    for name, values in trends:
        print(f"{name}: {_trend(values)} over {axis}={[r['point'] for r in rows]}")
    print(f"wrote sweep outputs to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specgate",
        description="Conformal rejection-sampling gate and scheduling cost simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("calibrate", "run", "verify", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default=os.environ.get("SPECGATE_OUT", "out"),
                       help="output directory (default $SPECGATE_OUT or ./out)")
        if name == "run":
            p.add_argument("--pool", default=None, help="pool file from `calibrate`")
        if name == "sweep":
            p.add_argument("--axis", required=True,
                           help="sweep axis: alpha | m | k_d | turns")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        cfg = load_config(args.config)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, out_dir)
        if args.command == "run":
            pool_path = Path(args.pool) if args.pool else out_dir / "pool.jsonl"
            if not pool_path.exists():
                print(f"error: pool file not found: {pool_path}", file=sys.stderr)
                return EXIT_IO
            return cmd_run(cfg, out_dir, pool_path)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, args.axis)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"calibration source error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RecordFormatError as exc:
        print(f"record format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"file not found: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvariantError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except BoundViolation as exc:
        print(f"statistical bound violated: {exc}", file=sys.stderr)
        return EXIT_BOUND


if __name__ == "__main__":
    sys.exit(main())
