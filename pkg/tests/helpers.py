"""Shared builders and independent oracles for the simulator tests."""

import itertools

from servesim.costmodel import CostCoefficients
from servesim.kvmanager import MODEL_PRESETS
from servesim.predictor import PredictorConfig
from servesim.scheduler import SchedulerConfig
from servesim.simcore import ExecutorParams, MemoryConfig, RunConfig, RunOptions
from servesim.workload import Request, Trace

GiB = 1024 ** 3


def make_trace(jobs, rate=None):
    """jobs: iterable of (arrival_us, input_len, output_len)."""
    reqs = [Request(i, int(a), int(s), int(n)) for i, (a, s, n) in enumerate(jobs)]
    reqs.sort(key=lambda r: (r.arrival_us, r.id))
    meta = {"rate": rate} if rate is not None else {}
    return Trace(reqs, meta)


def base_config(gpu_gib=8.0, max_batch=8, levels=4, aging_ms=5000.0,
                band_base_ms=1000.0, executor=None, **run_kw) -> RunConfig:
    return RunConfig(
        model=MODEL_PRESETS["opt-13b"],
        executor=executor or ExecutorParams(),
        predictor=PredictorConfig(),
        scheduler=SchedulerConfig(levels=levels, band_base_ms=band_base_ms,
                                  aging_ms=aging_ms, max_batch=max_batch),
        memory=MemoryConfig(gpu_capacity_bytes=int(gpu_gib * GiB)),
        run=RunOptions(**run_kw),
    )


# --- shortest-remaining-time specialization -------------------------------
#
# Instances where every iteration lasts the same wall time: constant input
# length, prefill cost tuned to one decode step, no batch overhead, no
# per-token slope.  Under these parameters the modelled remaining time ranks
# jobs exactly like their true remaining work, so the simulator's
# iteration-level preemptive schedule must not lose to any non-preemptive
# dispatch order.

SRPT_S = 64
SRPT_BETA = 30.0


def srpt_executor() -> ExecutorParams:
    return ExecutorParams(t0=SRPT_BETA / SRPT_S, alpha=0.0, beta=SRPT_BETA,
                          gamma0=0.0, noise_ms=0.0)


def srpt_config() -> RunConfig:
    return RunConfig(
        model=MODEL_PRESETS["opt-13b"],
        executor=srpt_executor(),
        predictor=PredictorConfig(),
        scheduler=SchedulerConfig(levels=1, band_base_ms=1000.0, aging_ms=float("inf"),
                                  max_batch=1),
        memory=MemoryConfig(gpu_capacity_bytes=1 << 62, cpu_capacity_bytes=1 << 62),
        run=RunOptions(),
    )


def service_us(s, n, params: ExecutorParams) -> int:
    """Total standalone service time in integer microseconds, mirroring the
    engine's per-iteration rounding: one prefill plus n-1 decode iterations."""
    p_us = max(1, round((params.gamma0 + s * params.t0) * 1000))
    d_us = max(1, round((params.gamma0 + params.alpha * s + params.beta) * 1000))
    return p_us + (n - 1) * d_us


def best_permutation_flow_us(jobs, params: ExecutorParams) -> int:
    """Minimum total flow time over all non-preemptive dispatch orders.

    Each permutation is executed work-conservingly: when the server frees,
    the earliest job in the permutation among those already arrived starts;
    if none has arrived, the clock jumps to the next arrival.  Jobs run to
    completion.  Exact integer-microsecond arithmetic.
    """
    svc = [service_us(s, n, params) for (_, s, n) in jobs]
    arrivals = [a for (a, _, _) in jobs]
    best = None
    for perm in itertools.permutations(range(len(jobs))):
        t = 0
        flow = 0
        remaining = list(perm)
        while remaining:
            arrived = [i for i in remaining if arrivals[i] <= t]
            if not arrived:
                t = min(arrivals[i] for i in remaining)
                continue
            i = next(j for j in remaining if arrivals[j] <= t)
            t += svc[i]
            flow += t - arrivals[i]
            remaining.remove(i)
        if best is None or flow < best:
            best = flow
    return best


def sim_flow_us(report) -> int:
    """Total flow time of a completed run, in integer microseconds."""
    total = 0
    for rec in report.per_request:
        total += round((rec["e2e_ms"]) * 1000)
    return total


def srpt_instance(gen, k=None, staggered=True):
    """One random SRPT-specialization instance of at most 7 jobs."""
    k = k if k is not None else int(gen.integers(2, 8))
    jobs = []
    t = 0
    for i in range(k):
        if staggered and i > 0 and gen.random() < 0.7:
            t += int(gen.integers(0, 150_000))
        n = int(gen.integers(1, 80))
        jobs.append((t if staggered else 0, SRPT_S, n))
    return jobs
