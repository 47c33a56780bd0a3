"""Deterministic discrete-event simulation of an LLM serving node.

One run processes a trace under a scheduling policy.  Time advances in
integer microseconds.  Each cycle: due events are applied (arrivals,
transfer completions, aging ticks), the policy plans memory moves, a batch
is formed, and the clock jumps by the batch's modelled iteration latency.
Prefill handles a request's whole prompt in one iteration and yields its
first token; every later iteration yields one token per batched job.

Policies
    speculative   priority queues over predicted remaining time, aging,
                  demotion on misprediction, EWT-driven KV swapping
    oracle        the speculative loop with ground-truth lengths
    defer         speculative scheduling, but preempted KV stays on the GPU
                  and new prefills wait for free memory (no swapping)
    recompute     speculative scheduling, but preempted KV is deleted and
                  recomputed (prefill over prompt + generated) on return
    fcfs-reserve  iteration-level FCFS; admission reserves KV space for the
                  longest possible output up front
    fcfs-paged    iteration-level FCFS; block-granular on-demand KV
                  allocation, evicting the newest job on growth pressure
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import rng
from .costmodel import (CalibrationError, CostCoefficients, ProfileSample, calibrate,
                        decode_step_ms, estimate_total_ms, remaining_ms)
from .kvmanager import (CPU, GPU, NONE, OFFLOADING, UPLOADING, MemoryState, ModelConfig,
                        PlanEntry, ewt_ms, kv_bytes, plan_swaps, quantized_kv_bytes)
from .predictor import FALLBACK, RETRIEVED, LengthPredictor, PredictorConfig
from .scheduler import Job, PriorityQueueSet, SchedulerConfig, on_prediction_exceeded
from .workload import Trace

US_PER_MS = 1_000

SPECULATIVE = "speculative"
ORACLE = "oracle"
DEFER = "defer"
RECOMPUTE = "recompute"
FCFS_RESERVE = "fcfs-reserve"
FCFS_PAGED = "fcfs-paged"

POLICIES = (SPECULATIVE, ORACLE, DEFER, RECOMPUTE, FCFS_RESERVE, FCFS_PAGED)
PRIORITY_POLICIES = (SPECULATIVE, ORACLE, DEFER, RECOMPUTE)

# Event kinds, in processing priority at equal timestamps.
EV_ARRIVAL = 0
EV_TRANSFER = 1
EV_AGING = 2
EV_ITERATION = 3


class LivelockError(RuntimeError):
    """No progress is possible although unfinished jobs remain."""


@dataclass
class ExecutorParams:
    """Ground-truth cost parameters of the simulated batch executor.

    Defaults approximate a 13B-class single-GPU profile: decode steps in the
    tens of milliseconds, prefill linear in prompt length and expensive
    enough that recomputing a several-hundred-token context costs a
    meaningful multiple of one decode step.
    """

    t0: float = 0.35          # ms per prefill token
    alpha: float = 0.0008     # ms per decode step per input token
    beta: float = 28.0        # ms per decode step
    gamma0: float = 4.0       # ms per iteration (batch overhead)
    noise_ms: float = 0.0
    context_growth: bool = False

    def validate(self):
        if self.t0 <= 0 or self.beta <= 0:
            raise ValueError("t0 and beta must be > 0")
        if self.alpha < 0 or self.gamma0 < 0 or self.noise_ms < 0:
            raise ValueError("alpha, gamma0 and noise_ms must be >= 0")


def iteration_latency_ms(prefill_lens, decode_ctx, params: ExecutorParams,
                         gen: np.random.Generator | None = None) -> float:
    """Modelled latency of one batched iteration.

    prefill_lens: token counts processed as prefill work this iteration.
    decode_ctx: (input_len, generated) per decode job; with context_growth
    the per-step term uses the grown context instead of the input length.
    """
    if not prefill_lens and not decode_ctx:
        raise ValueError("empty batch")
    total = params.gamma0
    for s in prefill_lens:
        total += s * params.t0
    for s, g in decode_ctx:
        ctx = s + g if params.context_growth else s
        total += params.alpha * ctx + params.beta
    if params.noise_ms > 0 and gen is not None:
        total += float(gen.normal(0.0, params.noise_ms))
    return max(total, 1e-3)


def profile_executor(params: ExecutorParams, s_grid, seed: int = 0,
                     noise_ms: float = 0.0, reps: int = 1) -> list[ProfileSample]:
    """Query per-job ground-truth costs over a grid of input lengths.

    Returns the executor's per-job prefill and per-decode-step times (the
    shared batch overhead is not attributable to a job) with optional
    additive Gaussian noise, for closed-loop calibration.
    """
    gen = rng.stream(seed, rng.PROFILING_NOISE)
    samples = []
    for _ in range(reps):
        for s in s_grid:
            t_pre = s * params.t0
            t_step = params.alpha * s + params.beta
            if noise_ms > 0:
                t_pre += float(gen.normal(0.0, noise_ms))
                t_step += float(gen.normal(0.0, noise_ms))
            samples.append(ProfileSample(s=int(s), n=1,
                                         t_pre_ms=max(t_pre, 1e-9),
                                         t_step_ms=max(t_step, 1e-9)))
    return samples


@dataclass
class MemoryConfig:
    # Default KV budget: large enough that the reservation policy can admit
    # any single request (input + full output window), small enough that
    # memory pressure appears within desk-scale request rates.
    gpu_capacity_bytes: int = int(3.2 * 1024 ** 3)
    cpu_capacity_bytes: int = 64 * 1024 ** 3
    pcie_gb_per_s: float = 25.0
    quant_bits: int = 8
    block_tokens: int = 16              # fcfs-paged allocation granularity
    reserve_output_tokens: int | None = None  # fcfs-reserve; None -> max_len

    def validate(self):
        if self.gpu_capacity_bytes <= 0 or self.cpu_capacity_bytes <= 0:
            raise ValueError("capacities must be > 0")
        if self.pcie_gb_per_s <= 0:
            raise ValueError("pcie bandwidth must be > 0")
        if self.quant_bits not in (4, 8):
            raise ValueError("quant_bits must be 4 or 8")
        if self.block_tokens < 1:
            raise ValueError("block_tokens must be >= 1")


@dataclass
class RunOptions:
    max_len: int = 2048
    sim_time_limit_s: float | None = None
    livelock_window_s: float = 120.0
    knee_multiple: float = 6.0
    aging_tick_divisor: int = 4   # aging scanned every K/divisor

    def validate(self):
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.livelock_window_s <= 0:
            raise ValueError("livelock_window_s must be > 0")
        if self.knee_multiple <= 1:
            raise ValueError("knee_multiple must be > 1")
        if self.aging_tick_divisor < 1:
            raise ValueError("aging_tick_divisor must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig
    executor: ExecutorParams = field(default_factory=ExecutorParams)
    coeffs: CostCoefficients | None = None   # None -> noise-free auto-calibration
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def validate(self):
        self.executor.validate()
        self.predictor.validate()
        self.scheduler.validate()
        self.memory.validate()
        self.run.validate()

    def resolved_coeffs(self) -> CostCoefficients:
        if self.coeffs is not None:
            return self.coeffs
        samples = profile_executor(self.executor, s_grid=(16, 64, 256, 1024), seed=0)
        coeffs, _ = calibrate(samples)
        return coeffs


@dataclass
class MetricsReport:
    """Aggregated result of one run; serialization is deterministic."""

    policy: str
    seed: int
    config_digest: str
    rate: float | None
    arrived: int
    completed: int
    live_final: int
    deferred_final: int
    makespan_ms: float
    normalized_latency_ms_per_token: float
    e2e_ms_mean: float
    e2e_ms_p50: float
    e2e_ms_p95: float
    first_token_ms_mean: float
    throughput_rps: float
    throughput_tokens_per_s: float
    unloaded_normalized_ms_per_token: float
    iterations: int
    prefill_tokens_executed: int
    decode_tokens_executed: int
    gpu_high_water_bytes: int
    swap_in_count: int
    swap_out_count: int
    swap_in_bytes: int
    swap_out_bytes: int
    kv_deletions: int
    evictions: int
    demotions: int
    aging_promotions: int
    predictions_retrieved: int
    predictions_fallback: int
    prediction_mean_rel_error: float | None
    per_request: list = field(default_factory=list, repr=False)

    def to_dict(self, include_requests: bool = False) -> dict:
        d = asdict(self)
        if not include_requests:
            d.pop("per_request")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())


def config_digest(cfg: RunConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return "sha256:" + hashlib.sha256(blob).hexdigest()[:16]


def unloaded_normalized_ms(trace: Trace, params: ExecutorParams) -> float:
    """Mean per-token latency of each request run alone (the knee baseline)."""
    if not trace.requests:
        return 0.0
    total = 0.0
    for r in trace.requests:
        p_us = max(1, round(iteration_latency_ms([r.input_len], [], params) * US_PER_MS))
        d_us = max(1, round(iteration_latency_ms([], [(r.input_len, 0)], params) * US_PER_MS))
        e2e_ms = (p_us + (r.output_len - 1) * d_us) / US_PER_MS
        total += e2e_ms / r.output_len
    return total / len(trace.requests)


class _Run:
    """State of one simulation run; single-threaded, fully deterministic."""

    def __init__(self, trace: Trace, policy: str, cfg: RunConfig, seed: int):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
        cfg.validate()
        self.trace = trace
        self.policy = policy
        self.cfg = cfg
        self.seed = seed
        self.clock = 0
        self.coeffs = cfg.resolved_coeffs()
        self.noise_gen = rng.stream(seed, rng.EXECUTOR_NOISE) if cfg.executor.noise_ms > 0 else None

        self.model = cfg.model
        self.token_bytes = kv_bytes(self.model, 1)
        self.memory = MemoryState(
            gpu_capacity=cfg.memory.gpu_capacity_bytes,
            cpu_capacity=cfg.memory.cpu_capacity_bytes,
            pcie_bytes_per_ms=cfg.memory.pcie_gb_per_s * 1e9 / 1000.0,
        )

        self.is_priority = policy in PRIORITY_POLICIES
        self.queues = PriorityQueueSet(cfg.scheduler) if self.is_priority else None
        self.predictor = None
        if policy in (SPECULATIVE, DEFER, RECOMPUTE):
            pc = cfg.predictor
            pc.max_len = cfg.run.max_len
            self.predictor = LengthPredictor(pc)

        self.jobs: dict[int, Job] = {}
        self.admitted: list[Job] = []       # FCFS policies: batch membership, admission order
        self.admission_wait: list = []      # FCFS policies: arrived, not yet admitted
        self.deferred_cpu: list = []        # priority policies: arrivals held for CPU space
        self.arrival_idx = 0
        self.live = 0
        self.completed: list[Job] = []

        self.iterations = 0
        self.prefill_tokens = 0
        self.decode_tokens = 0
        self.kv_deletions = 0
        self.evictions = 0
        self.demotions = 0
        self.aging_promotions = 0
        self.pred_retrieved = 0
        self.pred_fallback = 0
        self.pred_rel_errors: list[float] = []
        self.admission_seq = 0
        self.last_progress_us = 0
        self.next_aging_tick_us = None
        if self.is_priority and not math.isinf(cfg.scheduler.aging_ms):
            self.tick_us = max(1, int(cfg.scheduler.aging_ms * US_PER_MS
                                      / cfg.run.aging_tick_divisor))
            self.next_aging_tick_us = self.tick_us
        self.event_log = None  # optional list of (time_us, kind, ids)

    # ---------- helpers ----------

    def _remaining_ms(self, job: Job) -> float:
        return remaining_ms(job.input_len, job.predicted_len, job.generated,
                            job.prefilled, self.coeffs)

    def _gpu_need(self, job: Job) -> int:
        """Bytes the job needs resident to run one more iteration."""
        return self.token_bytes * (job.kv_tokens + 1)

    def _quant_bytes(self, job: Job) -> int:
        return quantized_kv_bytes(self.model, job.kv_tokens, self.cfg.memory.quant_bits)

    def _block_bytes(self, tokens: int) -> int:
        bt = self.cfg.memory.block_tokens
        blocks = (tokens + bt - 1) // bt
        return blocks * bt * self.token_bytes

    def _log(self, kind: int, ids):
        if self.event_log is not None:
            self.event_log.append((self.clock, kind, ids))

    # ---------- event processing ----------

    def _process_arrivals(self):
        reqs = self.trace.requests
        while self.arrival_idx < len(reqs) and reqs[self.arrival_idx].arrival_us <= self.clock:
            req = reqs[self.arrival_idx]
            self.arrival_idx += 1
            self._log(EV_ARRIVAL, req.id)
            if not self.is_priority:
                # FCFS admission queue; predicted length plays no role
                self.admission_wait.append(Job(request=req, predicted_len=self.cfg.run.max_len))
                continue
            self._admit_priority(req)

    def _admit_priority(self, req):
        # CPU-tier exhaustion defers new arrivals until swapping can proceed.
        worst_cpu = quantized_kv_bytes(self.model, req.input_len + self.cfg.run.max_len,
                                       self.cfg.memory.quant_bits)
        if self.policy == SPECULATIVE and self.memory.cpu_free() < worst_cpu:
            self.deferred_cpu.append(req)
            return
        if self.policy == ORACLE:
            predicted, retrieved = req.output_len, False
            vector = None
        else:
            tokens = req.prompt_tokens if req.prompt_tokens else (1 + req.input_len % 211,)
            predicted, provenance, vector = self.predictor.predict(tokens, req.id)
            retrieved = provenance == RETRIEVED
        if retrieved:
            self.pred_retrieved += 1
        else:
            self.pred_fallback += 1
        job = Job(request=req, predicted_len=predicted, predicted_initial=predicted)
        job.vector = vector
        job.prediction_retrieved = retrieved
        job.remaining_ms = self._remaining_ms(job)
        self.jobs[req.id] = job
        self.queues.enqueue(job, self.clock, first=True)
        self.live += 1

    def _process_transfers(self):
        while True:
            due = [c for c in self.memory.in_flight.values() if c.complete_us <= self.clock]
            if not due:
                return
            due.sort(key=lambda c: (c.complete_us, c.job_id))
            for cmd in due:
                self.memory.complete(cmd)
                job = self.jobs[cmd.job_id]
                self._log(EV_TRANSFER, job.id)
                if cmd.direction == "upload":
                    job.residency = GPU
                    job.gpu_bytes = cmd.gpu_bytes
                    job.cpu_bytes = 0
                else:
                    job.residency = CPU
                    job.gpu_bytes = 0
                    job.cpu_bytes = cmd.link_bytes

    def _process_aging(self):
        if self.next_aging_tick_us is None:
            return
        while self.next_aging_tick_us <= self.clock:
            self._log(EV_AGING, None)
            self.aging_promotions += self.queues.apply_aging(self.next_aging_tick_us)
            self.next_aging_tick_us += self.tick_us

    def _retry_deferred(self):
        if not self.deferred_cpu:
            return
        still = []
        for req in self.deferred_cpu:
            worst_cpu = quantized_kv_bytes(self.model, req.input_len + self.cfg.run.max_len,
                                           self.cfg.memory.quant_bits)
            if self.memory.cpu_free() >= worst_cpu:
                self._admit_priority(req)
            else:
                still.append(req)
        self.deferred_cpu = still

    # ---------- policy planning ----------

    def _plan_memory(self):
        if self.policy in (SPECULATIVE, ORACLE):
            self._plan_swapping()
        elif self.policy == RECOMPUTE:
            self._plan_recompute()
        # defer: keeps whatever is resident; admission handled at selection

    def _ranked_with_grants(self):
        """Rank live jobs, compute EWT, and run the byte-budget planner."""
        ranked = self.queues.ranked()
        rems = [job.remaining_ms for job in ranked]
        ewts = ewt_ms(ranked, rems, self.cfg.scheduler.aging_ms, self.clock)
        by_level: dict[int, list[tuple[float, int, Job]]] = {}
        for pos, (job, e) in enumerate(zip(ranked, ewts)):
            by_level.setdefault(job.level, []).append((e, pos, job))
        entries = []
        order = []
        for level in sorted(by_level):
            for e, _, job in sorted(by_level[level], key=lambda t: (t[0], t[1])):
                if job.residency in (UPLOADING, OFFLOADING):
                    continue
                order.append(job)
                entries.append(PlanEntry(
                    job_id=job.id,
                    residency=job.residency,
                    need_gpu_bytes=self._gpu_need(job),
                    held_gpu_bytes=job.gpu_bytes,
                    data_gpu_bytes=self.token_bytes * job.kv_tokens,
                    link_bytes=self._quant_bytes(job),
                ))
        plan = plan_swaps(entries, self.memory, self.clock)
        return plan

    def _plan_swapping(self):
        plan = self._ranked_with_grants()
        self._granted = set(plan.granted)
        for cmd in plan.commands:
            job = self.jobs[cmd.job_id]
            if cmd.direction == "offload" and job.residency == GPU:
                if self.memory.cpu_free() >= cmd.link_bytes:
                    self.memory.start_offload(job.id, cmd.link_bytes, job.gpu_bytes, self.clock)
                    job.residency = OFFLOADING
            elif cmd.direction == "upload" and job.residency == CPU:
                if self.memory.gpu_free() >= cmd.gpu_bytes:
                    self.memory.start_upload(job.id, cmd.link_bytes, cmd.gpu_bytes, self.clock)
                    job.residency = UPLOADING

    def _defer_wedge_break(self) -> bool:
        """Last-resort escape when every resident job is blocked on growth.

        Deferral has no swapping, so a fully packed GPU whose residents all
        need one more token would wedge; dropping the lowest-ranked
        resident's KV (recomputed later) restores progress.  This fires only
        when no batch can form at all.
        """
        for job in reversed(self.queues.ranked()):
            if job.residency == GPU:
                self.memory.release_gpu(job.gpu_bytes)
                job.gpu_bytes = 0
                job.residency = NONE
                job.prefilled = False
                job.remaining_ms = self._remaining_ms(job)
                self.kv_deletions += 1
                return True
        return False

    def _plan_recompute(self):
        plan = self._ranked_with_grants()
        self._granted = set(plan.granted)
        for cmd in plan.commands:
            if cmd.direction != "offload":
                continue
            job = self.jobs[cmd.job_id]
            if job.residency == GPU:
                self.memory.release_gpu(job.gpu_bytes)
                job.gpu_bytes = 0
                job.residency = NONE
                job.prefilled = False  # KV must be recomputed over s + generated
                job.remaining_ms = self._remaining_ms(job)
                self.kv_deletions += 1

    # ---------- batch formation ----------

    def _runnable_priority(self, job: Job) -> bool:
        if job.residency == GPU:
            need = self._gpu_need(job)
            top_up = need - job.gpu_bytes
            if top_up <= 0:
                return True
            if self.memory.gpu_free() >= top_up:
                self.memory.reserve_gpu(top_up)
                job.gpu_bytes = need
                return True
            return False
        if job.residency == NONE:
            if self.policy in (SPECULATIVE, ORACLE, RECOMPUTE) and job.id not in self._granted:
                return False
            if self.policy == DEFER:
                # no swapping escape hatch exists, so admission must cover the
                # predicted context or resident jobs could all wedge on growth
                need = self.token_bytes * (job.input_len + job.predicted_len + 1)
                need = max(need, self._gpu_need(job))
            else:
                need = self._gpu_need(job)
            if self.memory.gpu_free() >= need:
                self.memory.reserve_gpu(need)
                job.gpu_bytes = need
                job.residency = GPU
                return True
            return False
        return False  # on CPU or mid-transfer

    def _form_batch_priority(self):
        self._plan_memory()
        batch, blocked = self.queues.select_batch(self._runnable_priority)
        self._blocked = blocked
        return batch

    def _form_batch_fcfs(self):
        mc = self.cfg.memory
        while self.admission_wait:
            job = self.admission_wait[0]
            if self.policy == FCFS_RESERVE:
                reserve_out = mc.reserve_output_tokens or self.cfg.run.max_len
                need = self.token_bytes * (job.input_len + reserve_out)
            else:
                need = self._block_bytes(job.kv_tokens + 1)
            if self.memory.gpu_free() < need:
                break
            self.admission_wait.pop(0)
            self.memory.reserve_gpu(need)
            job.gpu_bytes = need
            job.residency = GPU
            self.admission_seq += 1
            job.enqueue_seq = self.admission_seq
            self.jobs[job.id] = job
            self.admitted.append(job)
            self.live += 1
        if self.policy == FCFS_PAGED:
            return [job for job in list(self.admitted) if self._paged_growable(job)]
        return list(self.admitted)

    def _paged_growable(self, job: Job) -> bool:
        need = self._block_bytes(job.kv_tokens + 1)
        top_up = need - job.gpu_bytes
        if top_up <= 0:
            return True
        while self.memory.gpu_free() < top_up:
            victim = None
            for cand in reversed(self.admitted):
                if cand is not job:
                    victim = cand
                    break
            if victim is None or victim.enqueue_seq < job.enqueue_seq:
                return False  # only older jobs left; wait for completions
            self._evict_paged(victim)
        self.memory.reserve_gpu(top_up)
        job.gpu_bytes = need
        return True

    def _evict_paged(self, job: Job):
        """Growth pressure: drop the newest job's KV; it re-queues at the
        admission-queue head and recomputes prefill over prompt + generated."""
        self.memory.release_gpu(job.gpu_bytes)
        job.gpu_bytes = 0
        job.residency = NONE
        job.prefilled = False
        self.admitted.remove(job)
        self.jobs.pop(job.id)
        self.live -= 1
        self.admission_wait.insert(0, job)
        self.evictions += 1

    # ---------- execution ----------

    def _execute(self, batch: list[Job]):
        prefill_lens = []
        decode_ctx = []
        for job in batch:
            if not job.prefilled:
                prefill_lens.append(job.input_len + job.generated)
            else:
                decode_ctx.append((job.input_len, job.generated))
        dt_ms = iteration_latency_ms(prefill_lens, decode_ctx, self.cfg.executor, self.noise_gen)
        self.clock += max(1, round(dt_ms * US_PER_MS))
        self.iterations += 1
        self.prefill_tokens += sum(prefill_lens)
        self.decode_tokens += len(decode_ctx)
        self._log(EV_ITERATION, [j.id for j in batch])

        for job in batch:
            if self.is_priority:
                self.queues.remove(job)
            if not job.prefilled:
                job.prefilled = True
                job.generated += 1
                if job.first_token_us is None:
                    job.first_token_us = self.clock
            else:
                job.generated += 1
            self.last_progress_us = self.clock

            if job.finished:
                self._complete(job)
            elif self.is_priority and job.generated >= job.predicted_len:
                on_prediction_exceeded(job, self.cfg.run.max_len, self.clock,
                                       self.cfg.scheduler.levels)
                self.demotions += 1
                job.remaining_ms = self._remaining_ms(job)
                self.queues.enqueue(job, self.clock, reband=False)
            elif self.is_priority:
                job.remaining_ms = self._remaining_ms(job)
                self.queues.enqueue(job, self.clock, reband=True)

    def _complete(self, job: Job):
        job.completion_us = self.clock
        if job.gpu_bytes:
            self.memory.release_gpu(job.gpu_bytes)
            job.gpu_bytes = 0
        if job.cpu_bytes:
            self.memory.release_cpu(job.cpu_bytes)
            job.cpu_bytes = 0
        job.residency = NONE
        if not self.is_priority:
            self.admitted.remove(job)
        self.jobs.pop(job.id)
        self.live -= 1
        self.completed.append(job)
        if self.predictor is not None and job.vector is not None:
            self.predictor.observe(job.vector, job.output_len)
        if self.is_priority and job.predicted_initial > 0:
            err = abs(job.predicted_initial - job.output_len) / job.output_len
            self.pred_rel_errors.append(err)

    # ---------- main loop ----------

    def _next_event_us(self):
        candidates = []
        if self.arrival_idx < len(self.trace.requests):
            candidates.append(self.trace.requests[self.arrival_idx].arrival_us)
        nxt = self.memory.next_completion_us()
        if nxt is not None:
            candidates.append(nxt)
        if self.next_aging_tick_us is not None and (self.live > 0 or self.deferred_cpu):
            candidates.append(self.next_aging_tick_us)
        return min(candidates) if candidates else None

    def _deferred_count(self) -> int:
        return len(self.admission_wait) + len(self.deferred_cpu)

    def _check_conservation(self):
        arrived = self.arrival_idx
        if arrived != len(self.completed) + self.live + self._deferred_count():
            raise AssertionError(
                f"conservation violated at t={self.clock}: arrived={arrived} "
                f"completed={len(self.completed)} live={self.live} "
                f"deferred={self._deferred_count()}")

    def run(self) -> "MetricsReport":
        limit_us = None
        if self.cfg.run.sim_time_limit_s is not None:
            limit_us = int(self.cfg.run.sim_time_limit_s * 1_000_000)
        window_us = int(self.cfg.run.livelock_window_s * 1_000_000)
        self._granted = set()

        while True:
            self._process_arrivals()
            self._process_transfers()
            if self.is_priority:
                self._process_aging()
                self._retry_deferred()
            self._check_conservation()
            self.memory.check()

            done = (self.arrival_idx >= len(self.trace.requests)
                    and self.live == 0 and self._deferred_count() == 0)
            if done:
                break
            if limit_us is not None and self.clock >= limit_us:
                break

            batch = (self._form_batch_priority() if self.is_priority
                     else self._form_batch_fcfs())
            if not batch and self.policy == DEFER and self._defer_wedge_break():
                batch = self._form_batch_priority()
            if batch:
                self._execute(batch)
                if self.clock - self.last_progress_us > window_us:
                    self._abort_livelock()
                continue

            nxt = self._next_event_us()
            if nxt is None:
                self._abort_livelock()
            if self.clock - self.last_progress_us > window_us:
                self._abort_livelock()
            self.clock = max(nxt, self.clock + 1)

        return self._report()

    def _abort_livelock(self):
        stuck = sorted(self.jobs)
        waiting = sorted(j.id for j in self.admission_wait) + sorted(
            r.id for r in self.deferred_cpu)
        raise LivelockError(
            f"no progress since t={self.last_progress_us}us (now {self.clock}us) "
            f"under policy {self.policy}; blocked jobs: {stuck[:20]}"
            + ("..." if len(stuck) > 20 else "")
            + f"; waiting for admission: {waiting[:20]}")

    def _report(self) -> MetricsReport:
        comp = self.completed
        e2e = np.array([(j.completion_us - j.request.arrival_us) / US_PER_MS for j in comp])
        toks = np.array([j.output_len for j in comp], dtype=float)
        first = np.array([(j.first_token_us - j.request.arrival_us) / US_PER_MS
                          for j in comp if j.first_token_us is not None])
        makespan_ms = (max((j.completion_us for j in comp), default=0)) / US_PER_MS
        per_request = [{
            "id": j.id,
            "arrival_ms": j.request.arrival_us / US_PER_MS,
            "first_token_ms": (j.first_token_us / US_PER_MS) if j.first_token_us else None,
            "completion_ms": j.completion_us / US_PER_MS,
            "input_len": j.input_len,
            "output_len": j.output_len,
            "e2e_ms": (j.completion_us - j.request.arrival_us) / US_PER_MS,
        } for j in sorted(comp, key=lambda j: j.id)]
        return MetricsReport(
            policy=self.policy,
            seed=self.seed,
            config_digest=config_digest(self.cfg),
            rate=self.trace.meta.get("rate"),
            arrived=self.arrival_idx,
            completed=len(comp),
            live_final=self.live,
            deferred_final=self._deferred_count(),
            makespan_ms=makespan_ms,
            normalized_latency_ms_per_token=float((e2e / toks).mean()) if len(comp) else 0.0,
            e2e_ms_mean=float(e2e.mean()) if len(comp) else 0.0,
            e2e_ms_p50=float(np.percentile(e2e, 50)) if len(comp) else 0.0,
            e2e_ms_p95=float(np.percentile(e2e, 95)) if len(comp) else 0.0,
            first_token_ms_mean=float(first.mean()) if len(first) else 0.0,
            throughput_rps=len(comp) / (makespan_ms / 1000.0) if makespan_ms else 0.0,
            throughput_tokens_per_s=float(toks.sum()) / (makespan_ms / 1000.0) if makespan_ms else 0.0,
            unloaded_normalized_ms_per_token=unloaded_normalized_ms(self.trace, self.cfg.executor),
            iterations=self.iterations,
            prefill_tokens_executed=self.prefill_tokens,
            decode_tokens_executed=self.decode_tokens,
            gpu_high_water_bytes=self.memory.gpu_high_water,
            swap_in_count=self.memory.swap_in_count,
            swap_out_count=self.memory.swap_out_count,
            swap_in_bytes=self.memory.swap_in_bytes,
            swap_out_bytes=self.memory.swap_out_bytes,
            kv_deletions=self.kv_deletions,
            evictions=self.evictions,
            demotions=self.demotions,
            aging_promotions=self.aging_promotions,
            predictions_retrieved=self.pred_retrieved,
            predictions_fallback=self.pred_fallback,
            prediction_mean_rel_error=(float(np.mean(self.pred_rel_errors))
                                       if self.pred_rel_errors else None),
            per_request=per_request,
        )


_EVENT_NAMES = {EV_ARRIVAL: "arrival", EV_TRANSFER: "transfer_complete",
                EV_AGING: "aging_tick", EV_ITERATION: "iteration_complete"}


def run(trace: Trace, policy: str, cfg: RunConfig, seed: int = 0,
        predictor_override: LengthPredictor | None = None,
        event_log_path=None) -> MetricsReport:
    """Simulate one trace under one policy; deterministic in all arguments."""
    sim = _Run(trace, policy, cfg, seed)
    if predictor_override is not None:
        sim.predictor = predictor_override
    if event_log_path is not None:
        sim.event_log = []
    report = sim.run()
    if event_log_path is not None:
        with open(event_log_path, "w") as fh:
            for t_us, kind, ids in sim.event_log:
                fh.write(json.dumps({"t_us": t_us, "kind": _EVENT_NAMES[kind],
                                     "ids": ids}) + "\n")
    return report


def find_knee(rates, latencies, baselines, multiple: float):
    """First swept rate whose normalized latency exceeds multiple x baseline."""
    for rate, lat, base in sorted(zip(rates, latencies, baselines)):
        if lat > multiple * base:
            return rate
    return None


def compare(reports: list[MetricsReport], knee_multiple: float | None = None) -> dict:
    """Arrange reports into latency-vs-rate rows per policy plus knee rates."""
    if not reports:
        raise ValueError("no reports to compare")
    digests = {r.config_digest for r in reports}
    if len(digests) > 1:
        raise ValueError("reports come from incompatible configurations")
    multiple = knee_multiple
    rows = []
    by_policy: dict[str, list[MetricsReport]] = {}
    for r in reports:
        by_policy.setdefault(r.policy, []).append(r)
    knees = {}
    for policy, items in sorted(by_policy.items()):
        items.sort(key=lambda r: (r.rate if r.rate is not None else 0.0, r.seed))
        rates = [r.rate for r in items]
        lats = [r.normalized_latency_ms_per_token for r in items]
        bases = [r.unloaded_normalized_ms_per_token for r in items]
        knee = find_knee(rates, lats, bases, multiple) if multiple else None
        knees[policy] = knee
        for r in items:
            rows.append({
                "policy": policy,
                "rate": r.rate,
                "normalized_latency_ms_per_token": r.normalized_latency_ms_per_token,
                "throughput_rps": r.throughput_rps,
                "throughput_tokens_per_s": r.throughput_tokens_per_s,
                "completed": r.completed,
                "is_knee": knee is not None and r.rate == knee,
            })
    return {"rows": rows, "knees": knees}
