"""Synthetic request traces (Poisson arrivals) and trace file ingestion.

Time is carried as integer microseconds internally so event ordering is
exact; trace files store arrival times in milliseconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng

US_PER_MS = 1_000
US_PER_S = 1_000_000

DEFAULT_MAX_LEN = 2048


class TraceFormatError(ValueError):
    """A trace file line failed to parse or validate."""


class ParameterError(ValueError):
    """Invalid workload generation parameters."""


@dataclass(frozen=True)
class Request:
    """One inference request as it appears in a trace."""

    id: int
    arrival_us: int
    input_len: int
    output_len: int
    prompt_tokens: tuple[int, ...] | None = None

    def validate(self):
        if self.input_len < 1:
            raise TraceFormatError(f"request {self.id}: input_len must be >= 1")
        if self.output_len < 1:
            raise TraceFormatError(f"request {self.id}: output_len must be >= 1")
        if self.arrival_us < 0:
            raise TraceFormatError(f"request {self.id}: arrival_time must be >= 0")

    @property
    def arrival_ms(self) -> float:
        return self.arrival_us / US_PER_MS


@dataclass
class Trace:
    """Requests sorted by (arrival_us, id), plus generation metadata."""

    requests: list[Request]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.requests)

    def duration_ms(self) -> float:
        if not self.requests:
            return 0.0
        return self.requests[-1].arrival_us / US_PER_MS


@dataclass
class LengthDistribution:
    """Input/output token length model for synthetic traces.

    family "lognormal": params holds mu/sigma for input and output.
    family "empirical": params holds a list of (input_len, output_len)
    pairs sampled with replacement.  Sampled lengths are clamped to
    [1, max_len].
    """

    family: str
    params: dict
    max_len: int = DEFAULT_MAX_LEN

    def validate(self):
        if self.max_len < 1:
            raise ParameterError("max_len must be >= 1")
        if self.family == "lognormal":
            for key in ("input_mu", "input_sigma", "output_mu", "output_sigma"):
                if key not in self.params:
                    raise ParameterError(f"lognormal distribution missing {key}")
            if self.params["input_sigma"] <= 0 or self.params["output_sigma"] <= 0:
                raise ParameterError("lognormal sigma must be > 0")
        elif self.family == "empirical":
            pairs = self.params.get("pairs")
            if not pairs:
                raise ParameterError("empirical distribution needs a non-empty pair list")
            for s, n in pairs:
                if s < 1 or n < 1:
                    raise ParameterError("empirical lengths must be >= 1")
        else:
            raise ParameterError(f"unknown length distribution family {self.family!r}")

    def sample(self, gen: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw `count` (input_len, output_len) pairs, clamped to [1, max_len]."""
        if self.family == "lognormal":
            p = self.params
            inputs = gen.lognormal(p["input_mu"], p["input_sigma"], size=count)
            outputs = gen.lognormal(p["output_mu"], p["output_sigma"], size=count)
            inputs = np.clip(np.rint(inputs), 1, self.max_len).astype(int)
            outputs = np.clip(np.rint(outputs), 1, self.max_len).astype(int)
        else:
            pairs = self.params["pairs"]
            idx = gen.integers(0, len(pairs), size=count)
            inputs = np.clip([pairs[i][0] for i in idx], 1, self.max_len).astype(int)
            outputs = np.clip([pairs[i][1] for i in idx], 1, self.max_len).astype(int)
        return inputs, outputs


# Dataset-analog presets.  Chosen so the second preset has longer, heavier-
# tailed lengths than the first; only this ordering is meaningful.
PRESETS = {
    "alpaca": LengthDistribution(
        "lognormal",
        {"input_mu": 3.0, "input_sigma": 0.8, "output_mu": 3.6, "output_sigma": 0.8},
    ),
    "sharegpt": LengthDistribution(
        "lognormal",
        {"input_mu": 4.6, "input_sigma": 1.1, "output_mu": 5.0, "output_sigma": 1.2},
    ),
}


def length_bucket(output_len: int) -> int:
    """Third-octave bucket index of a length (bucket width factor 2^(1/3)).

    Pseudo-prompts share a token stem per bucket, so this sets how much
    output-length signal the embedder can recover: within a bucket, lengths
    vary by at most ~26%.
    """
    return round(3.0 * math.log2(max(int(output_len), 1)))


def make_prompt_tokens(seed: int, req_id: int, output_len: int,
                       family_tokens: int = 18, salt_tokens: int = 2) -> tuple[int, ...]:
    """Deterministic pseudo-prompt for (seed, id, output-length bucket).

    The stem is a sliding token window indexed by the bucket, so prompts of
    nearby buckets overlap heavily and similarity decays smoothly with
    length distance; `salt_tokens` per-request tokens keep prompts from
    being exact duplicates.  With salt_tokens=0, prompts within a bucket
    are identical.
    """
    bucket = length_bucket(output_len)
    stem = tuple(1000 + bucket + i for i in range(family_tokens))
    mix = (req_id * 2654435761 + seed * 1099087573) & 0xFFFFFFFF
    salt = tuple(50_000 + (mix + 97 * j) % 1000 for j in range(salt_tokens))
    return stem + salt


def generate_trace(rate: float, duration_s: float, dist: LengthDistribution,
                   seed: int, prompt_salt_tokens: int = 2) -> Trace:
    """Open-loop Poisson trace: i.i.d. exponential gaps with mean 1/rate.

    Fully determined by (rate, duration_s, dist, seed, prompt_salt_tokens).
    rate=0 yields an empty trace.
    """
    if rate < 0:
        raise ParameterError("rate must be >= 0")
    if duration_s <= 0:
        raise ParameterError("duration must be > 0")
    dist.validate()

    meta = {
        "rate": rate,
        "duration_s": duration_s,
        "seed": seed,
        "family": dist.family,
        "params": dist.params,
        "max_len": dist.max_len,
        "prompt_salt_tokens": prompt_salt_tokens,
    }
    if rate == 0:
        return Trace([], meta)

    arr_gen = rng.stream(seed, rng.TRACE_ARRIVALS)
    horizon_us = int(round(duration_s * US_PER_S))
    arrivals_us = []
    t = 0.0
    while True:
        t += arr_gen.exponential(1.0 / rate)
        t_us = int(round(t * US_PER_S))
        if t_us > horizon_us:
            break
        arrivals_us.append(t_us)

    len_gen = rng.stream(seed, rng.TRACE_LENGTHS)
    inputs, outputs = dist.sample(len_gen, len(arrivals_us))

    requests = []
    for i, arr in enumerate(arrivals_us):
        requests.append(Request(
            id=i,
            arrival_us=arr,
            input_len=int(inputs[i]),
            output_len=int(outputs[i]),
            prompt_tokens=make_prompt_tokens(seed, i, int(outputs[i]),
                                             salt_tokens=prompt_salt_tokens),
        ))
    requests.sort(key=lambda r: (r.arrival_us, r.id))
    return Trace(requests, meta)


def save_trace(trace: Trace, path) -> None:
    """Write a trace as JSON-lines, one request per line."""
    with open(path, "w") as fh:
        for r in trace.requests:
            rec = {
                "id": r.id,
                "arrival_time_ms": r.arrival_us / US_PER_MS,
                "input_len": r.input_len,
                "output_len": r.output_len,
            }
            if r.prompt_tokens is not None:
                rec["prompt_tokens"] = list(r.prompt_tokens)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trace(path) -> Trace:
    """Parse and validate a JSON-lines trace file.

    Records are sorted by (arrival time, id); duplicate ids, missing fields
    and non-positive lengths are rejected with the offending line number.
    """
    requests = []
    seen_ids = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(rec, dict):
                raise TraceFormatError(f"{path}:{lineno}: expected a JSON object")
            for key in ("id", "arrival_time_ms", "input_len", "output_len"):
                if key not in rec:
                    raise TraceFormatError(f"{path}:{lineno}: missing field {key!r}")
            try:
                req = Request(
                    id=int(rec["id"]),
                    arrival_us=int(round(float(rec["arrival_time_ms"]) * US_PER_MS)),
                    input_len=int(rec["input_len"]),
                    output_len=int(rec["output_len"]),
                    prompt_tokens=tuple(int(t) for t in rec["prompt_tokens"])
                    if rec.get("prompt_tokens") is not None else None,
                )
            except (TypeError, ValueError) as exc:
                raise TraceFormatError(f"{path}:{lineno}: bad field value ({exc})") from exc
            try:
                req.validate()
            except TraceFormatError as exc:
                raise TraceFormatError(f"{path}:{lineno}: {exc}") from exc
            if req.id in seen_ids:
                raise TraceFormatError(f"{path}:{lineno}: duplicate request id {req.id}")
            seen_ids.add(req.id)
            requests.append(req)
    requests.sort(key=lambda r: (r.arrival_us, r.id))
    return Trace(requests, {"source": str(path)})


def _stats(values) -> dict:
    if len(values) == 0:
        return {"mean": 0.0, "median": 0.0, "p95": 0.0, "max": 0}
    arr = np.asarray(values, dtype=float)
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "p95": float(np.percentile(arr, 95)),
        "max": int(arr.max()),
    }


def summarize_trace(trace: Trace) -> dict:
    """Distribution summary of input/output lengths and arrival span."""
    return {
        "count": len(trace.requests),
        "duration_ms": trace.duration_ms(),
        "input_len": _stats([r.input_len for r in trace.requests]),
        "output_len": _stats([r.output_len for r in trace.requests]),
    }
