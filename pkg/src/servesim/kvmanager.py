"""KV-cache accounting across GPU/CPU tiers, swap planning, and quantization.

Byte accounting is exact integer arithmetic.  The swap planner walks jobs in
(priority level, estimated-wait-time) order and grants GPU residency greedily
under a byte budget; granted non-resident jobs get upload commands, resident
non-granted jobs get offload commands.  Offloaded (CPU-side) KV is held in
b-bit quantized form, so CPU bytes and transfer bytes use the quantized
footprint while GPU bytes stay at full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GPU = "gpu"
CPU = "cpu"
NONE = "none"
UPLOADING = "uploading"
OFFLOADING = "offloading"

SCALE_ZP_BYTES = 4 + 4  # accounted per channel: one real scale + one real zero-point


class MemoryAccountingError(AssertionError):
    """A byte-accounting invariant was violated."""


@dataclass(frozen=True)
class ModelConfig:
    """Transformer shape from which KV footprints derive."""

    name: str
    num_heads: int
    num_layers: int
    hidden_size: int
    bytes_per_value: int = 2  # FP16
    param_bytes: int = 0

    def __post_init__(self):
        if min(self.num_heads, self.num_layers, self.hidden_size, self.bytes_per_value) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")


GB = 1024 ** 3

MODEL_PRESETS = {
    "opt-2.7b": ModelConfig("opt-2.7b", num_heads=32, num_layers=32, hidden_size=2560,
                            param_bytes=5 * GB),
    "opt-6.7b": ModelConfig("opt-6.7b", num_heads=40, num_layers=40, hidden_size=5120,
                            param_bytes=13 * GB),
    "opt-13b": ModelConfig("opt-13b", num_heads=40, num_layers=40, hidden_size=5120,
                           param_bytes=24 * GB),
}


def kv_bytes(model: ModelConfig, tokens: int, bytes_per_value: int | None = None) -> int:
    """Full-precision KV footprint: K and V across all layers for `tokens`."""
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    bpv = model.bytes_per_value if bytes_per_value is None else bytes_per_value
    return 2 * model.num_layers * model.hidden_size * bpv * tokens


def quantized_kv_bytes(model: ModelConfig, tokens: int, bits: int) -> int:
    """Quantized KV footprint: b-bit payload plus per-channel scale/zero-point.

    A channel is one (layer, K-or-V, hidden column) vector along the token
    axis, so the scale/zero overhead is fixed at 2*layers*hidden*8 bytes no
    matter how many tokens are stored.  Zero tokens materialize no channels.
    """
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    if tokens == 0:
        return 0
    channels = 2 * model.num_layers * model.hidden_size
    payload = math.ceil(bits / 8) * channels * tokens
    return payload + channels * SCALE_ZP_BYTES


@dataclass
class QuantizedTensor:
    """Channel-wise affine-quantized tensor.

    `values` holds b-bit integers (in uint8 storage); `scale` and `zero`
    are real-valued per-channel parameters.  Dequantization is
    scale * (values - zero).
    """

    values: np.ndarray  # (channels, length) uint8
    scale: np.ndarray   # (channels, 1) float64
    zero: np.ndarray    # (channels, 1) float64
    bits: int

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


def quantize(values: np.ndarray, bits: int) -> QuantizedTensor:
    """Quantize a channel-major tensor to b-bit integers.

    Per channel: scale = (max - min) / (2^b - 1) and zero = round(-min/scale),
    kept real-valued (not clamped) so channels that do not straddle zero stay
    representable; stored integers are clamped to [0, 2^b - 1].  A constant
    channel uses scale 1 with zero = -min, which reconstructs it exactly.

    The scale is snapped to a fixed point of requantization so that
    dequantize-quantize round trips are stable; re-quantizing a dequantized
    single-sign channel may still drift by float-rounding ulps.
    """
    if bits not in (4, 8):
        raise ValueError("bits must be 4 or 8")
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.size == 0:
        raise ValueError("expected a non-empty channel-major 2D tensor")
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains non-finite values")

    q_max = float((1 << bits) - 1)
    mn = x.min(axis=1, keepdims=True)
    mx = x.max(axis=1, keepdims=True)
    degenerate = mx == mn

    scale = np.where(degenerate, 1.0, (mx - mn) / q_max)
    zero = np.where(degenerate, -mn, np.rint(-mn / scale))

    # Snap the scale to a fixed point of requantization: quantizing our own
    # dequantized output recomputes (ymax - ymin) / q_max, and the float
    # drift of that map is monotone, so a short iteration settles it.
    for _ in range(32):
        y_span = scale * (q_max - zero) - scale * (0.0 - zero)
        snapped = np.where(degenerate, 1.0, y_span / q_max)
        if np.array_equal(snapped, scale):
            break
        scale = snapped

    q = np.clip(np.rint(x / scale + zero), 0.0, q_max).astype(np.uint8)
    return QuantizedTensor(values=q, scale=scale, zero=zero, bits=bits)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """Reconstruct real values: scale * (q - zero)."""
    return qt.scale * (qt.values.astype(np.float64) - qt.zero)


@dataclass(frozen=True)
class TransferCommand:
    """A planned PCIe transfer for one job's KV cache."""

    job_id: int
    direction: str       # "upload" | "offload"
    link_bytes: int      # bytes moved over PCIe (quantized footprint)
    gpu_bytes: int       # GPU-side bytes reserved (upload) or held until done (offload)
    start_us: int
    complete_us: int


@dataclass
class PlanEntry:
    """Swap-planner view of one live, non-in-flight job."""

    job_id: int
    residency: str        # GPU | CPU | NONE (in-flight jobs are not planned)
    need_gpu_bytes: int   # grant-budget charge: data bytes plus one token of growth headroom
    held_gpu_bytes: int   # bytes currently reserved on the GPU (0 unless resident)
    data_gpu_bytes: int   # full-precision bytes of the KV data itself
    link_bytes: int       # quantized bytes if a transfer is needed


@dataclass
class SwapPlan:
    granted: list[int] = field(default_factory=list)   # job ids granted GPU residency
    commands: list[TransferCommand] = field(default_factory=list)
    denied: list[int] = field(default_factory=list)


@dataclass
class MemoryState:
    """GPU/CPU byte ledgers, transfer channels, and the in-flight set."""

    gpu_capacity: int
    cpu_capacity: int
    pcie_bytes_per_ms: float
    gpu_used: int = 0
    cpu_used: int = 0
    gpu_high_water: int = 0
    up_busy_until_us: int = 0
    down_busy_until_us: int = 0
    in_flight: dict = field(default_factory=dict)  # job_id -> TransferCommand
    swap_in_count: int = 0
    swap_out_count: int = 0
    swap_in_bytes: int = 0
    swap_out_bytes: int = 0

    def check(self):
        if not (0 <= self.gpu_used <= self.gpu_capacity):
            raise MemoryAccountingError(
                f"gpu_used {self.gpu_used} outside [0, {self.gpu_capacity}]")
        if not (0 <= self.cpu_used <= self.cpu_capacity):
            raise MemoryAccountingError(
                f"cpu_used {self.cpu_used} outside [0, {self.cpu_capacity}]")

    def reserve_gpu(self, nbytes: int):
        self.gpu_used += nbytes
        if self.gpu_used > self.gpu_high_water:
            self.gpu_high_water = self.gpu_used
        self.check()

    def release_gpu(self, nbytes: int):
        self.gpu_used -= nbytes
        self.check()

    def reserve_cpu(self, nbytes: int):
        self.cpu_used += nbytes
        self.check()

    def release_cpu(self, nbytes: int):
        self.cpu_used -= nbytes
        self.check()

    def gpu_free(self) -> int:
        return self.gpu_capacity - self.gpu_used

    def cpu_free(self) -> int:
        return self.cpu_capacity - self.cpu_used

    def transfer_us(self, nbytes: int) -> int:
        return max(1, int(math.ceil(nbytes / self.pcie_bytes_per_ms * 1000.0)))

    def start_upload(self, job_id: int, link_bytes: int, gpu_bytes: int, now_us: int) -> TransferCommand:
        start = max(now_us, self.up_busy_until_us)
        done = start + self.transfer_us(link_bytes)
        self.up_busy_until_us = done
        self.reserve_gpu(gpu_bytes)  # reserve destination for the whole flight
        cmd = TransferCommand(job_id, "upload", link_bytes, gpu_bytes, start, done)
        self.in_flight[job_id] = cmd
        self.swap_in_count += 1
        self.swap_in_bytes += link_bytes
        return cmd

    def start_offload(self, job_id: int, link_bytes: int, gpu_bytes: int, now_us: int) -> TransferCommand:
        start = max(now_us, self.down_busy_until_us)
        done = start + self.transfer_us(link_bytes)
        self.down_busy_until_us = done
        self.reserve_cpu(link_bytes)  # reserve destination for the whole flight
        cmd = TransferCommand(job_id, "offload", link_bytes, gpu_bytes, start, done)
        self.in_flight[job_id] = cmd
        self.swap_out_count += 1
        self.swap_out_bytes += link_bytes
        return cmd

    def complete(self, cmd: TransferCommand):
        del self.in_flight[cmd.job_id]
        if cmd.direction == "upload":
            self.release_cpu(cmd.link_bytes)   # source side freed on completion
        else:
            self.release_gpu(cmd.gpu_bytes)

    def next_completion_us(self):
        if not self.in_flight:
            return None
        return min(c.complete_us for c in self.in_flight.values())


def ewt_ms(ranked_jobs, remaining_ms_list, aging_ms: float, now_us: int) -> list[float]:
    """Estimated wait time for each job, in global rank order.

    EWT is the smaller of (a) the summed modelled remaining time of every job
    ranked ahead, and (b) the time left until aging alone would promote the
    job to the top level, i.e. level*K minus the time already waited, floored
    at zero.  With aging disabled (K = inf) only the workload arm applies.
    """
    out = []
    ahead = 0.0
    for job, rem in zip(ranked_jobs, remaining_ms_list):
        if math.isinf(aging_ms):
            promote = math.inf
        else:
            waited_ms = (now_us - job.last_promotion_us) / 1000.0
            promote = max(job.level * aging_ms - waited_ms, 0.0)
        out.append(min(ahead, promote))
        ahead += rem
    return out


def plan_swaps(entries: list[PlanEntry], memory: MemoryState, now_us: int) -> SwapPlan:
    """Grant GPU residency to a budget-limited prefix of the planned order.

    `entries` must already be ranked (level ascending, then EWT ascending,
    ties in queue order).  In-flight jobs are excluded by construction; their
    GPU-side bytes are charged against the budget here.  A job that does not
    fit is skipped, not a barrier: strictly smaller later jobs may still be
    granted (first-fit skip).
    """
    plan = SwapPlan()
    budget = memory.gpu_capacity
    budget -= sum(c.gpu_bytes for c in memory.in_flight.values())
    used = 0
    for e in entries:
        if used + e.need_gpu_bytes <= budget:
            used += e.need_gpu_bytes
            plan.granted.append(e.job_id)
            if e.residency == CPU:
                plan.commands.append(TransferCommand(
                    e.job_id, "upload", e.link_bytes, e.data_gpu_bytes, now_us, -1))
        else:
            plan.denied.append(e.job_id)
            if e.residency == GPU:
                plan.commands.append(TransferCommand(
                    e.job_id, "offload", e.link_bytes, e.held_gpu_bytes, now_us, -1))
    return plan
