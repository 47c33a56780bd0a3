"""Command-line front-end: trace generation, calibration, runs, sweeps,
and predictor evaluation.

Exit codes: 0 success, 2 usage/validation error, 3 runtime abort (livelock),
4 I/O error.  Primary output files are byte-identical across repeated
invocations with the same arguments; wall-clock measurements go to separate
timing sidecars.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import rng, simcore, workload
from .config import ConfigError, apply_overrides, build_config, load_config_file
from .costmodel import CalibrationError, calibrate, save_coefficients
from .predictor import (HashingEmbedder, LengthPredictor, PredictorError, VectorStore,
                        eval_accuracy, train_fallback)
from .simcore import LivelockError, MetricsReport, POLICIES, compare, profile_executor, run
from .workload import (PRESETS, LengthDistribution, ParameterError, TraceFormatError,
                       generate_trace, load_trace, save_trace, summarize_trace)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORT = 3
EXIT_IO = 4


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_cfg(args):
    data = load_config_file(args.config) if args.config else {}
    apply_overrides(data, args.set or [])
    return build_config(data)


def _distribution(args) -> LengthDistribution:
    if args.pairs_file:
        pairs = []
        with open(args.pairs_file) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rec = json.loads(line)
                    pairs.append((int(rec["input_len"]), int(rec["output_len"])))
        return LengthDistribution("empirical", {"pairs": pairs}, max_len=args.max_len)
    preset = PRESETS[args.preset]
    return LengthDistribution(preset.family, dict(preset.params), max_len=args.max_len)


def cmd_generate(args) -> int:
    dist = _distribution(args)
    trace = generate_trace(args.rate, args.duration, dist, args.seed,
                           prompt_salt_tokens=args.prompt_salt)
    save_trace(trace, args.output)
    summary = {"meta": trace.meta, "summary": summarize_trace(trace)}
    _write_json(str(args.output) + ".summary.json", summary)
    print(f"wrote {len(trace)} requests to {args.output}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_cfg(args)
    grid = [int(s) for s in args.s_grid.split(",") if s]
    samples = profile_executor(cfg.executor, grid, seed=args.seed,
                               noise_ms=args.noise, reps=args.reps)
    coeffs, stats = calibrate(samples)
    save_coefficients(args.output, coeffs, stats)
    print(f"t0={coeffs.t0:.9g} alpha={coeffs.alpha:.9g} beta={coeffs.beta:.9g} "
          f"(n={stats.n_samples}, rss_pre={stats.rss_pre:.3g}, rss_step={stats.rss_step:.3g})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    trace = load_trace(args.trace)
    report = run(trace, args.policy, cfg, seed=args.seed,
                 event_log_path=args.event_log)
    report.save(args.output)
    if args.requests_csv:
        with open(args.requests_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=[
                "id", "arrival_ms", "first_token_ms", "completion_ms",
                "input_len", "output_len", "e2e_ms"])
            writer.writeheader()
            writer.writerows(report.per_request)
    print(f"policy={report.policy} completed={report.completed}/{report.arrived} "
          f"normalized_latency={report.normalized_latency_ms_per_token:.3f} ms/token "
          f"throughput={report.throughput_rps:.4f} req/s")
    return EXIT_OK


def _sweep_one(task):
    """Worker for one (policy, rate, seed) cell; returns the report dict."""
    policy, rate, seed, cfg_data, preset, duration, max_len, salt = task
    cfg = build_config(cfg_data)
    dist = LengthDistribution(PRESETS[preset].family, dict(PRESETS[preset].params),
                              max_len=max_len)
    trace = generate_trace(rate, duration, dist, seed, prompt_salt_tokens=salt)
    report = run(trace, policy, cfg, seed=seed)
    return report.to_dict()


def cmd_sweep(args) -> int:
    data = load_config_file(args.config) if args.config else {}
    apply_overrides(data, args.set or [])
    cfg = build_config(data)  # validate once up front
    policies = [p for p in args.policies.split(",") if p]
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}; expected one of {POLICIES}")
    rates = [float(r) for r in args.rates.split(",") if r]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    tasks = [(p, r, s, data, args.preset, args.duration, args.max_len, args.prompt_salt)
             for p in policies for r in rates for s in seeds]

    results, failures = [], []
    workers = args.jobs or os.cpu_count() or 1
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for task, fut in [(t, pool.submit(_sweep_one, t)) for t in tasks]:
                try:
                    results.append(fut.result())
                except Exception as exc:  # keep sweeping, report at the end
                    failures.append((task[:3], repr(exc)))
    else:
        for task in tasks:
            try:
                results.append(_sweep_one(task))
            except Exception as exc:
                failures.append((task[:3], repr(exc)))

    # aggregate per (policy, rate) over seeds; knee from the mean curve
    cell: dict[tuple, list[dict]] = {}
    for r in results:
        cell.setdefault((r["policy"], r["rate"]), []).append(r)
    knees = {}
    for policy in policies:
        pairs = sorted((rate, items) for (p, rate), items in cell.items() if p == policy)
        knee = None
        for rate, items in pairs:
            lat = float(np.mean([i["normalized_latency_ms_per_token"] for i in items]))
            base = float(np.mean([i["unloaded_normalized_ms_per_token"] for i in items]))
            if lat > cfg.run.knee_multiple * base:
                knee = rate
                break
        knees[policy] = knee

    results.sort(key=lambda r: (r["policy"], r["rate"], r["seed"]))
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["policy", "rate", "seed", "normalized_latency_ms_per_token",
                         "throughput_rps", "throughput_tokens_per_s", "completed",
                         "is_knee"])
        for r in results:
            writer.writerow([
                r["policy"], r["rate"], r["seed"],
                repr(r["normalized_latency_ms_per_token"]),
                repr(r["throughput_rps"]), repr(r["throughput_tokens_per_s"]),
                r["completed"], knees[r["policy"]] == r["rate"]])
    _write_json(str(args.output) + ".knees.json",
                {"knee_multiple": cfg.run.knee_multiple, "knees": knees})
    print(f"swept {len(results)} runs -> {args.output}; knees: {knees}")
    if failures:
        for key, err in failures:
            print(f"FAILED {key}: {err}", file=sys.stderr)
        return EXIT_ABORT if any("Livelock" in e for _, e in failures) else EXIT_USAGE
    return EXIT_OK


def cmd_predict_eval(args) -> int:
    cfg = _load_cfg(args)
    trace = load_trace(args.trace)
    usable = [r for r in trace.requests if r.prompt_tokens]
    if len(usable) < 20:
        raise PredictorError("need at least 20 requests with prompt tokens")
    order = rng.stream(args.seed, rng.SPLIT_SHUFFLE).permutation(len(usable))
    split = int(len(usable) * args.train_fraction)
    if split < 10 or split == len(usable):
        raise PredictorError("train/test split leaves too few examples on one side")
    train = [usable[i] for i in order[:split]]
    test = [usable[i] for i in order[split:]]

    pc = cfg.predictor
    regressor = train_fallback([(r.prompt_tokens, r.output_len) for r in train],
                               pc, seed=args.seed)
    embedder = HashingEmbedder(pc.dimension)
    store = VectorStore(pc.dimension, pc.db_capacity)
    for r in train:
        store.add(embedder.embed(r.prompt_tokens), r.output_len)
    retrieval = LengthPredictor(pc, regressor=regressor, embedder=embedder, store=store)
    fallback_only = LengthPredictor(pc, regressor=regressor, embedder=embedder,
                                    store=VectorStore(pc.dimension, pc.db_capacity))

    def evaluate(predictor):
        pairs, latencies, retrieved = [], [], 0
        for r in test:
            t0 = time.perf_counter()
            pred, provenance, _ = predictor.predict(r.prompt_tokens)
            latencies.append((time.perf_counter() - t0) * 1000.0)
            pairs.append((pred, r.output_len))
            retrieved += provenance == "retrieved"
        return pairs, latencies, retrieved

    pairs_r, lat_r, hits = evaluate(retrieval)
    pairs_f, lat_f, _ = evaluate(fallback_only)

    report = {
        "seed": args.seed,
        "bin_width": args.bin_width,
        "train_size": len(train),
        "test_size": len(test),
        "retrieval": {**eval_accuracy(pairs_r, args.bin_width),
                      "retrieved_fraction": hits / len(test)},
        "fallback_only": eval_accuracy(pairs_f, args.bin_width),
        "final_training_loss": regressor.loss_history[-1],
    }
    for section in ("retrieval", "fallback_only"):
        report[section].pop("mean_latency_ms", None)  # wall-clock goes to the sidecar
    _write_json(args.output, report)
    _write_json(str(args.output) + ".timings.json", {
        "note": "wall-clock measurements; not expected to be reproducible",
        "retrieval_mean_latency_ms": float(np.mean(lat_r)),
        "fallback_only_mean_latency_ms": float(np.mean(lat_f)),
    })
    print(f"retrieval: acc={report['retrieval']['accuracy']:.3f} "
          f"err={report['retrieval']['pred_error']:.4f} | fallback-only: "
          f"acc={report['fallback_only']['accuracy']:.3f} "
          f"err={report['fallback_only']['pred_error']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="servesim",
        description="Discrete-event simulator for LLM inference serving policies")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a configuration key (repeatable)")

    p = sub.add_parser("generate", help="synthesize a Poisson request trace")
    p.add_argument("--preset", choices=sorted(PRESETS), default="sharegpt")
    p.add_argument("--pairs-file", help="JSON-lines of input_len/output_len pairs "
                                        "for an empirical distribution")
    p.add_argument("--rate", type=float, required=True, help="requests per second")
    p.add_argument("--duration", type=float, required=True, help="trace length (s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-len", type=int, default=workload.DEFAULT_MAX_LEN)
    p.add_argument("--prompt-salt", type=int, default=2,
                   help="per-request salt tokens in pseudo-prompts (0 = exact families)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("calibrate", help="fit cost coefficients from the executor")
    common(p)
    p.add_argument("--s-grid", default="16,32,64,128,256,512,1024")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0, help="profiling noise (ms)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="simulate one trace under one policy")
    common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--policy", choices=POLICIES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--requests-csv", help="also write per-request records")
    p.add_argument("--event-log", help="also write a JSON-lines event log")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a policy x rate x seed grid")
    common(p)
    p.add_argument("--policies", required=True, help="comma-separated policy names")
    p.add_argument("--rates", required=True, help="comma-separated requests/second")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--preset", choices=sorted(PRESETS), default="sharegpt")
    p.add_argument("--duration", type=float, default=300.0)
    p.add_argument("--max-len", type=int, default=workload.DEFAULT_MAX_LEN)
    p.add_argument("--prompt-salt", type=int, default=2)
    p.add_argument("--jobs", type=int, default=0, help="parallel workers (0 = cpu count)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict-eval", help="evaluate the length predictor on a trace")
    common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--bin-width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_predict_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LivelockError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, ParameterError, TraceFormatError, PredictorError,
            CalibrationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
