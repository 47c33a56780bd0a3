"""servesim: deterministic simulator and policy library for LLM inference serving."""

from .costmodel import (CalibrationError, CostCoefficients, ProfileSample, calibrate,
                        estimate_total_ms, remaining_ms)
from .kvmanager import (MODEL_PRESETS, MemoryState, ModelConfig, QuantizedTensor,
                        dequantize, ewt_ms, kv_bytes, plan_swaps, quantize,
                        quantized_kv_bytes)
from .predictor import (FallbackRegressor, HashingEmbedder, LengthPredictor,
                        PredictorConfig, VectorStore, eval_accuracy, train_fallback)
from .scheduler import (Job, PriorityQueueSet, SchedulerConfig, assign_priority,
                        on_prediction_exceeded)
from .simcore import (ExecutorParams, LivelockError, MemoryConfig, MetricsReport,
                      POLICIES, RunConfig, RunOptions, compare, iteration_latency_ms,
                      profile_executor, run)
from .workload import (LengthDistribution, PRESETS, Request, Trace, TraceFormatError,
                       generate_trace, load_trace, save_trace, summarize_trace)

__version__ = "0.1.0"
