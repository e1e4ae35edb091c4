"""Experiment configuration: one INI-style file drives every command.

Flags only select the command, config path and output directory; all
parameters live in the config so sweeps and reruns are reproducible.
Unknown sections or keys are rejected. All randomness flows from the
single [experiment] seed; subsystems derive their streams by labeled
splitting.

Defaults follow the reference operating point: alpha=0.4, k_d=k_t=500,
max_turns=10, token_limit=8192.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .pipeline import PipelineConfig
from .simkernel import CostModel
from .synthetic import ProcessParams, logistic_hazard


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VerifySettings:
    trials: int = 100_000
    n: int = 20
    m: int = 8
    conditional_m: int = 7
    distribution: str = "distinct-uniform"
    alpha: float = 0.25
    alpha_grid: tuple[float, ...] = tuple(round(0.05 * k, 2) for k in range(1, 20))
    bias_test_score: float = 0.0


@dataclass(frozen=True)
class SweepSettings:
    alpha_list: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    m_list: tuple[int, ...] = (4, 8, 16, 32)
    k_d_list: tuple[int, ...] = (300, 500, 700)
    turns_list: tuple[int, ...] = (2, 4, 6, 8, 10)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    inputs_count: int = 8
    calibration_samples: int = 16
    calibration_k_d: int | None = None   # defaults to pipeline.k_d
    source: str = "synthetic"
    records_path: str = ""
    pool_hash: str = ""
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    process: ProcessParams = field(default_factory=ProcessParams)
    cost: CostModel = field(default_factory=CostModel)
    verify: VerifySettings = field(default_factory=VerifySettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    @property
    def effective_calibration_k_d(self) -> int:
        return self.calibration_k_d if self.calibration_k_d is not None else self.pipeline.k_d


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _convert(raw: str, typ, key: str):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is bool:
            return _parse_bool(raw, key)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def _parse_list(raw: str, typ, key: str) -> tuple:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if not items:
        raise ConfigError(f"{key}: empty list")
    return tuple(_convert(x, typ, key) for x in items)


_PIPELINE_KEYS = {
    "m": int, "k_d": int, "k_t": int, "max_turns": int, "token_limit": int,
    "alpha": float, "coverage_mode": str, "intervention_mode": str,
}
_PROCESS_KEYS = {
    "draft_drift_mean": float, "target_pull_mean": float, "noise_std": float,
    "hazard_midpoint": float, "hazard_scale": float,
    "nll_loc_base": float, "nll_loc_scale": float, "nll_sigma": float, "theta0": float,
}
_COST_KEYS = {f.name: (bool if f.name == "separate_devices" else float)
              for f in fields(CostModel)}
_EXPERIMENT_KEYS = {
    "seed": int, "inputs_count": int, "calibration_samples": int,
    "calibration_k_d": int, "source": str, "records_path": str, "pool_hash": str,
}
_VERIFY_KEYS = {
    "trials": int, "n": int, "m": int, "conditional_m": int, "distribution": str,
    "alpha": float, "alpha_grid": "float_list", "bias_test_score": float,
}
_SWEEP_KEYS = {
    "alpha_list": "float_list", "m_list": "int_list",
    "k_d_list": "int_list", "turns_list": "int_list",
}

_SECTIONS = {
    "experiment": _EXPERIMENT_KEYS,
    "pipeline": _PIPELINE_KEYS,
    "process": _PROCESS_KEYS,
    "cost": _COST_KEYS,
    "verify": _VERIFY_KEYS,
    "sweep": _SWEEP_KEYS,
}


def _section_values(parser: configparser.ConfigParser, section: str) -> dict:
    allowed = _SECTIONS[section]
    values = {}
    if not parser.has_section(section):
        return values
    for key, raw in parser.items(section):
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        typ = allowed[key]
        if typ == "float_list":
            values[key] = _parse_list(raw, float, key)
        elif typ == "int_list":
            values[key] = _parse_list(raw, int, key)
        else:
            values[key] = _convert(raw, typ, key)
    return values


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path!r}: {exc}") from exc

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")

    exp = _section_values(parser, "experiment")
    pipe = _section_values(parser, "pipeline")
    proc = _section_values(parser, "process")
    cost = _section_values(parser, "cost")
    verify = _section_values(parser, "verify")
    sweep = _section_values(parser, "sweep")

    if seed_override is not None:
        exp["seed"] = seed_override
    seed = exp.get("seed", 0)

    hz_mid = proc.pop("hazard_midpoint", 8.0)
    hz_scale = proc.pop("hazard_scale", 1.5)
    try:
        process = ProcessParams(answer_hazard=logistic_hazard(hz_mid, hz_scale), **proc)
        pipeline = PipelineConfig(seed=seed, **pipe)
        cost_model = CostModel(**cost)
        verify_settings = VerifySettings(**verify)
        sweep_settings = SweepSettings(**sweep)
        return ExperimentConfig(
            pipeline=pipeline, process=process, cost=cost_model,
            verify=verify_settings, sweep=sweep_settings, **exp)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
