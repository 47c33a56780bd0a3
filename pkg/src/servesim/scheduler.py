"""Preemptive priority scheduling keyed by estimated remaining execution time.

Jobs live in a small number of priority queues; the queue index is the
geometric band containing the job's modelled remaining time (band 0 is
[0, B), band i is [B*2^(i-1), B*2^i), the top band is unbounded).  Within a
queue, jobs are ordered by (remaining time, enqueue order).  Three forces
move jobs between queues: re-banding whenever a job is re-enqueued after an
iteration, demotion with prediction doubling when a job outruns its
predicted length, and virtual aging which lifts any job that has waited at
least K milliseconds one level up.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

from .kvmanager import GPU, NONE
from .workload import Request


@dataclass
class SchedulerConfig:
    # The executor's iteration cost grows with every batched job, so wide
    # batches trade everyone's latency for little extra throughput; the
    # priority policies therefore run narrow batches by default.
    levels: int = 4
    band_base_ms: float = 1000.0
    aging_ms: float = 5000.0          # math.inf disables aging
    max_batch: int | None = 2

    def validate(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.band_base_ms <= 0:
            raise ValueError("band_base_ms must be > 0")
        if self.aging_ms <= 0:
            raise ValueError("aging_ms must be > 0 (use inf to disable)")
        if self.max_batch is not None and self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")


@dataclass
class Job:
    """Mutable scheduling state wrapped around one trace request."""

    request: Request
    predicted_len: int
    predicted_initial: int = 0   # prediction before any demotion doubling
    generated: int = 0
    prefilled: bool = False
    level: int = 0
    enqueue_seq: int = 0
    last_promotion_us: int = 0
    remaining_ms: float = 0.0
    residency: str = NONE
    gpu_bytes: int = 0
    cpu_bytes: int = 0
    vector = None                      # cached prompt embedding
    prediction_retrieved: bool = False
    demotions: int = 0
    first_token_us: int | None = None
    completion_us: int | None = None
    in_queue: bool = False
    _qkey: tuple = field(default=(), repr=False)

    @property
    def id(self) -> int:
        return self.request.id

    @property
    def input_len(self) -> int:
        return self.request.input_len

    @property
    def output_len(self) -> int:
        return self.request.output_len

    @property
    def kv_tokens(self) -> int:
        """Context tokens whose KV the job holds once materialized."""
        return self.request.input_len + self.generated

    @property
    def finished(self) -> bool:
        return self.generated >= self.request.output_len


def assign_priority(remaining_ms: float, band_base_ms: float, levels: int) -> int:
    """Geometric band index of a remaining-time estimate."""
    level = 0
    threshold = band_base_ms
    while remaining_ms >= threshold and level < levels - 1:
        level += 1
        threshold *= 2.0
    return level


def on_prediction_exceeded(job: Job, max_len: int, now_us: int, levels: int) -> Job:
    """Demote a job that generated its whole predicted length without finishing.

    The prediction doubles (clamped to max_len) and the job drops exactly one
    level.  Caller re-enqueues with the refreshed remaining time.
    """
    job.predicted_len = min(job.predicted_len * 2, max_len)
    job.level = min(job.level + 1, levels - 1)
    job.last_promotion_us = now_us
    job.demotions += 1
    return job


class PriorityQueueSet:
    """The h ordered queues plus aging bookkeeping."""

    def __init__(self, config: SchedulerConfig):
        config.validate()
        self.config = config
        self.queues: list[list[tuple]] = [[] for _ in range(config.levels)]
        self._seq = 0
        self._count = 0

    def __len__(self):
        return self._count

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def enqueue(self, job: Job, now_us: int, reband: bool = True, first: bool = False):
        assert not job.in_queue, f"job {job.id} already enqueued"
        if first:
            job.enqueue_seq = self.next_seq()
            job.last_promotion_us = now_us
            job.level = assign_priority(job.remaining_ms, self.config.band_base_ms,
                                        self.config.levels)
        elif reband:
            job.level = assign_priority(job.remaining_ms, self.config.band_base_ms,
                                        self.config.levels)
        key = (job.remaining_ms, job.enqueue_seq)
        job._qkey = key
        bisect.insort(self.queues[job.level], (key, job))
        job.in_queue = True
        self._count += 1

    def remove(self, job: Job):
        assert job.in_queue, f"job {job.id} not enqueued"
        q = self.queues[job.level]
        i = bisect.bisect_left(q, (job._qkey,))
        while i < len(q) and q[i][1] is not job:
            i += 1
        assert i < len(q), f"job {job.id} missing from its queue"
        q.pop(i)
        job.in_queue = False
        self._count -= 1

    def apply_aging(self, now_us: int) -> int:
        """Promote one level every job that has waited >= K; returns promotions."""
        if math.isinf(self.config.aging_ms):
            return 0
        aging_us = int(self.config.aging_ms * 1000)
        promoted = 0
        for level in range(1, self.config.levels):
            due = [job for _, job in self.queues[level]
                   if now_us - job.last_promotion_us >= aging_us]
            for job in due:
                self.remove(job)
                job.level = level - 1
                job.last_promotion_us = now_us
                bisect.insort(self.queues[job.level], (job._qkey, job))
                job.in_queue = True
                self._count += 1
                promoted += 1
        return promoted

    def ranked(self) -> list[Job]:
        """All live jobs in global scheduling rank: level, then queue order."""
        out = []
        for q in self.queues:
            out.extend(job for _, job in q)
        return out

    def select_batch(self, runnable, max_batch: int | None = None):
        """Scan level 0 upward and admit runnable jobs up to max_batch.

        `runnable(job)` returns True to admit; jobs it refuses are returned
        as the blocked list so the memory manager can prioritize them.
        """
        limit = max_batch if max_batch is not None else self.config.max_batch
        batch, blocked = [], []
        for q in self.queues:
            for _, job in q:
                if limit is not None and len(batch) >= limit:
                    return batch, blocked
                if runnable(job):
                    batch.append(job)
                else:
                    blocked.append(job)
        return batch, blocked
