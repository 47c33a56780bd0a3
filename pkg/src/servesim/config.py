"""Run-configuration schema: JSON file + dotted key overrides -> RunConfig.

The configuration file is a single JSON object with optional sections
"model", "executor", "coefficients", "predictor", "scheduler", "memory" and
"run"; missing keys take the defaults below.  Every value can also be set
from the command line with --set section.key=value.
"""

from __future__ import annotations

import json
import math

from .costmodel import CostCoefficients, load_coefficients
from .kvmanager import MODEL_PRESETS, ModelConfig
from .predictor import PredictorConfig
from .scheduler import SchedulerConfig
from .simcore import ExecutorParams, MemoryConfig, RunConfig, RunOptions


class ConfigError(ValueError):
    pass


DEFAULT_MODEL = "opt-13b"


def load_config_file(path) -> dict:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def parse_override(text: str) -> tuple[list[str], object]:
    """Parse one 'a.b.c=value' override; values are JSON literals when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare string
    return path, value


def apply_overrides(data: dict, overrides) -> dict:
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return data


def _take(section: dict, cls, mapping: dict, what: str):
    unknown = set(section) - set(mapping)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    kwargs = {mapping[k]: v for k, v in section.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc


def build_config(data: dict | None = None) -> RunConfig:
    """Materialize a RunConfig from a (possibly partial) JSON-shaped dict."""
    data = dict(data or {})

    model_spec = data.get("model", DEFAULT_MODEL)
    if isinstance(model_spec, str):
        if model_spec not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {model_spec!r}; "
                              f"presets: {sorted(MODEL_PRESETS)}")
        model = MODEL_PRESETS[model_spec]
    else:
        model = _take(model_spec, ModelConfig, {k: k for k in (
            "name", "num_heads", "num_layers", "hidden_size", "bytes_per_value",
            "param_bytes")}, "model")

    executor = _take(data.get("executor", {}), ExecutorParams, {k: k for k in (
        "t0", "alpha", "beta", "gamma0", "noise_ms", "context_growth")}, "executor")

    coeffs = None
    cspec = data.get("coefficients")
    if isinstance(cspec, dict) and "path" in cspec:
        coeffs = load_coefficients(cspec["path"])
    elif isinstance(cspec, dict) and cspec:
        coeffs = CostCoefficients.from_dict(cspec)
    elif cspec not in (None, "auto"):
        raise ConfigError("coefficients must be an object, {'path': ...}, or 'auto'")

    predictor = _take(data.get("predictor", {}), PredictorConfig, {k: k for k in (
        "dimension", "top_k", "similarity_threshold", "db_capacity", "max_len",
        "fallback_hidden", "fallback_epochs", "fallback_learning_rate",
        "allow_untrained", "online_refit", "refit_epochs", "refit_sample_cap")},
        "predictor")

    sched_section = dict(data.get("scheduler", {}))
    if sched_section.get("aging_ms") in ("inf", "Infinity"):
        sched_section["aging_ms"] = math.inf
    scheduler = _take(sched_section, SchedulerConfig, {k: k for k in (
        "levels", "band_base_ms", "aging_ms", "max_batch")}, "scheduler")

    memory = _take(data.get("memory", {}), MemoryConfig, {k: k for k in (
        "gpu_capacity_bytes", "cpu_capacity_bytes", "pcie_gb_per_s", "quant_bits",
        "block_tokens", "reserve_output_tokens")}, "memory")

    run = _take(data.get("run", {}), RunOptions, {k: k for k in (
        "max_len", "sim_time_limit_s", "livelock_window_s", "knee_multiple",
        "aging_tick_divisor")}, "run")

    cfg = RunConfig(model=model, executor=executor, coeffs=coeffs,
                    predictor=predictor, scheduler=scheduler, memory=memory, run=run)
    cfg.validate()
    return cfg
