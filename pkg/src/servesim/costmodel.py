"""Analytic execution-time model and its least-squares calibration.

Per-request execution time decomposes into a prefill pass that is linear in
the input length (no intercept) and a per-decode-step cost that is affine in
the input length:

    total_ms(s, n) = s * t0 + n * (alpha * s + beta)

The three coefficients are recovered from profiled samples: t0 by a
through-the-origin fit of prefill time against s, (alpha, beta) by ordinary
least squares of per-step decode time against s.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


class CalibrationError(ValueError):
    """Profiled samples are insufficient or degenerate."""


@dataclass(frozen=True)
class CostCoefficients:
    t0: float      # ms per prefill token
    alpha: float   # ms per decode step per input token
    beta: float    # ms per decode step

    def __post_init__(self):
        if self.t0 <= 0:
            raise ValueError("t0 must be > 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def to_dict(self) -> dict:
        return {"t0": self.t0, "alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_dict(cls, d: dict) -> "CostCoefficients":
        return cls(t0=float(d["t0"]), alpha=float(d["alpha"]), beta=float(d["beta"]))


@dataclass(frozen=True)
class ProfileSample:
    """One profiled point: prefill time and per-decode-step time at input length s."""

    s: int
    n: int
    t_pre_ms: float
    t_step_ms: float

    def __post_init__(self):
        if self.s < 1 or self.n < 0:
            raise ValueError("sample lengths out of range")
        if self.t_pre_ms <= 0 or self.t_step_ms <= 0:
            raise ValueError("sample times must be positive")


@dataclass(frozen=True)
class CalibrationStats:
    """Residual diagnostics and standard errors of the fitted coefficients."""

    n_samples: int
    se_t0: float
    se_alpha: float
    se_beta: float
    rss_pre: float
    rss_step: float


def calibrate(samples: list[ProfileSample]) -> tuple[CostCoefficients, CalibrationStats]:
    """Fit (t0, alpha, beta) from profiled samples.

    Requires at least two samples with distinct s; otherwise both fits are
    rank-deficient and CalibrationError is raised.
    """
    if len(samples) < 2:
        raise CalibrationError("need at least 2 profile samples")
    s = np.array([p.s for p in samples], dtype=float)
    t_pre = np.array([p.t_pre_ms for p in samples], dtype=float)
    t_step = np.array([p.t_step_ms for p in samples], dtype=float)
    if np.unique(s).size < 2:
        raise CalibrationError("samples cover a single input length; fit is underdetermined")

    # Prefill: through-the-origin least squares.
    ss = float(np.dot(s, s))
    t0 = float(np.dot(s, t_pre)) / ss
    res_pre = t_pre - t0 * s
    rss_pre = float(np.dot(res_pre, res_pre))
    dof_pre = max(len(samples) - 1, 1)
    se_t0 = math.sqrt(rss_pre / dof_pre / ss)

    # Decode step: OLS with intercept.
    X = np.column_stack([s, np.ones_like(s)])
    coef, _, _, _ = np.linalg.lstsq(X, t_step, rcond=None)
    alpha, beta = float(coef[0]), float(coef[1])
    res_step = t_step - X @ coef
    rss_step = float(np.dot(res_step, res_step))
    dof_step = max(len(samples) - 2, 1)
    sigma2 = rss_step / dof_step
    xtx_inv = np.linalg.inv(X.T @ X)
    se_alpha = math.sqrt(sigma2 * xtx_inv[0, 0])
    se_beta = math.sqrt(sigma2 * xtx_inv[1, 1])

    coeffs = CostCoefficients(t0=t0, alpha=max(alpha, 0.0), beta=beta)
    stats = CalibrationStats(
        n_samples=len(samples),
        se_t0=se_t0, se_alpha=se_alpha, se_beta=se_beta,
        rss_pre=rss_pre, rss_step=rss_step,
    )
    return coeffs, stats


def decode_step_ms(s: int, c: CostCoefficients) -> float:
    """Modelled cost of one decode step for a request with input length s."""
    return c.alpha * s + c.beta


def estimate_total_ms(s: int, n: int, c: CostCoefficients) -> float:
    """Modelled total execution time: prefill of s tokens plus n decode steps."""
    if s < 1:
        raise ValueError("s must be >= 1")
    if n < 0:
        raise ValueError("n must be >= 0")
    return s * c.t0 + n * decode_step_ms(s, c)


def remaining_ms(s: int, predicted_n: int, generated: int, prefilled: bool,
                 c: CostCoefficients) -> float:
    """Modelled remaining execution time of an in-flight request.

    Before prefill the whole modelled total is outstanding; afterwards only
    the predicted-minus-generated decode steps remain.  Never negative.
    """
    if not prefilled:
        return estimate_total_ms(s, predicted_n, c)
    left = predicted_n - generated
    if left <= 0:
        return 0.0
    return left * decode_step_ms(s, c)


def save_coefficients(path, coeffs: CostCoefficients, stats: CalibrationStats | None = None):
    payload = coeffs.to_dict()
    if stats is not None:
        payload["fit"] = {
            "n_samples": stats.n_samples,
            "se_t0": stats.se_t0,
            "se_alpha": stats.se_alpha,
            "se_beta": stats.se_beta,
            "rss_pre": stats.rss_pre,
            "rss_step": stats.rss_step,
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_coefficients(path) -> CostCoefficients:
    with open(path) as fh:
        return CostCoefficients.from_dict(json.load(fh))
