"""Command line entry point and latency / footprint benchmarks.

Subcommands: gen-corpus, train, quantize, synth, bench, compare. Reports are
line-delimited JSON; every line has a ``type`` key:

``record``      scale, frames, steps, steps_to_first_chunk, time_to_first_chunk_ms,
                total_ms (medians over ``reps``), reps, chunk, bundle_size
``footprint``   float_bytes, quantized_bytes, ratio, parameters
``flops``       bundle_size, per_step (recurrent/feedforward/output/total),
                frames, steps, recurrent_steps, total
``speedup``     frames, k_base, k_bundled, base_ms, bundled_ms, walltime_reduction,
                recurrent_step_reduction, flop_reduction
``divergence``  what, frames_a, frames_b, rms, rms_first, rms_last, max_abs
``environment`` python, numpy, platform, machine, cpu_count, timer
``summary``     monotone_totals and other derived checks
"""

from __future__ import annotations

import os

# benchmarks are single-threaded; must precede the numpy import
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import logging
import math
import platform
import statistics
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import CorpusConfig, generate, load_corpus, save_corpus, split
from .data import ConfigError, Normalizer
from .losses import SQUARED
from .network import NetworkSpec, NumericError, init_weights, step_flops
from .pipeline import (
    DEFAULT_CHUNK,
    FRAME_DIM,
    emit_features,
    predict_durations,
    read_features,
    synthesize_stream,
    upsample,
)
from .quantstore import LoadedModel, ModelFormatError, encode_model, load_model, save_model
from .trainer import (
    TrainConfig,
    build_acoustic_model,
    build_duration_model,
    default_learning_rate,
    read_config,
    train_config_from,
)

log = logging.getLogger("streamtts")

# rough frame counts for a character, word, sentence and paragraph at 5 ms shift
LENGTH_SCALES = {"char": 10, "word": 60, "sentence": 500, "paragraph": 4400}

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


@dataclass
class LatencyRecord:
    scale: str
    frames: int
    steps: int
    steps_to_first_chunk: int
    time_to_first_chunk_ms: float
    total_ms: float
    reps: int
    chunk: int
    bundle_size: int


@dataclass
class BenchReport:
    records: list[LatencyRecord] = field(default_factory=list)
    footprint: dict | None = None
    flops: list[dict] = field(default_factory=list)
    speedups: list[dict] = field(default_factory=list)
    divergences: list[dict] = field(default_factory=list)
    environment: dict = field(default_factory=lambda: environment())

    @property
    def monotone_totals(self) -> bool:
        totals = [r.total_ms for r in sorted(self.records, key=lambda r: r.frames)]
        return all(a <= b for a, b in zip(totals, totals[1:]))

    def lines(self) -> list[dict]:
        out = [{"type": "environment", **self.environment}]
        out += [{"type": "record", **dataclasses.asdict(r)} for r in self.records]
        if self.footprint is not None:
            out.append({"type": "footprint", **self.footprint})
        out += [{"type": "flops", **f} for f in self.flops]
        out += [{"type": "speedup", **s} for s in self.speedups]
        out += [{"type": "divergence", **d} for d in self.divergences]
        if self.records:
            out.append({"type": "summary", "monotone_totals": self.monotone_totals})
        return out

    def dumps(self) -> str:
        return "".join(json.dumps(line, sort_keys=True) + "\n" for line in self.lines())


def parse_report(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def environment() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "timer": "time.perf_counter",
    }


# ---------------------------------------------------------------- benchmarks


def random_acoustic_model(input_dim: int, bundle_size: int = 1, seed: int = 0) -> LoadedModel:
    """Untrained model with the full acoustic architecture, for timing and footprint."""
    spec = NetworkSpec.acoustic(input_dim, FRAME_DIM, bundle_size)
    return LoadedModel(spec, init_weights(spec, seed), False, Normalizer.identity(input_dim, FRAME_DIM))


def bench_inputs(input_dim: int, seed: int = 0, scales: dict[str, int] | None = None) -> dict[str, np.ndarray]:
    """Frame-level linguistic inputs of each length scale built from random phonemes."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, frames in (LENGTH_SCALES if scales is None else scales).items():
        n_ph = max(1, math.ceil(frames / 8))
        durations = np.full(n_ph, frames // n_ph, dtype=np.int64)
        durations[: frames - int(durations.sum())] += 1
        phon = rng.normal(size=(n_ph, input_dim - 2)).astype(np.float32)
        out[name] = upsample(phon, durations)
    return out


def footprint(model: LoadedModel) -> dict:
    float_bytes = len(encode_model(model.spec, model.weights, False, model.normalizer))
    q_bytes = len(encode_model(model.spec, model.weights, True, model.normalizer))
    return {
        "float_bytes": float_bytes,
        "quantized_bytes": q_bytes,
        "ratio": q_bytes / float_bytes,
        "parameters": model.spec.parameter_count(),
    }


def flop_accounting(spec: NetworkSpec, frames: int) -> dict:
    per_step = step_flops(spec)
    steps = math.ceil(frames / spec.bundle_size)
    n_recurrent = sum(1 for layer in spec.layers if layer.recurrent)
    return {
        "bundle_size": spec.bundle_size,
        "per_step": per_step,
        "frames": frames,
        "steps": steps,
        "recurrent_steps": steps * n_recurrent,
        "total": steps * per_step["total"],
    }


def _timed(model: LoadedModel, inputs: np.ndarray, chunk: int):
    return synthesize_stream(model, inputs, model.spec.bundle_size, chunk).report


def measure_latency(
    model: LoadedModel,
    inputs: dict[str, np.ndarray],
    chunk_size: int = DEFAULT_CHUNK,
    reps: int = 5,
) -> BenchReport:
    """Median time-to-first-chunk and total time per input length, after one warm-up run."""
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    report = BenchReport()
    for name, frames in sorted(inputs.items(), key=lambda kv: len(kv[1])):
        _timed(model, frames, chunk_size)
        runs = [_timed(model, frames, chunk_size) for _ in range(reps)]
        first = runs[0]
        report.records.append(
            LatencyRecord(
                scale=name,
                frames=first.frames,
                steps=first.steps,
                steps_to_first_chunk=first.steps_to_first_chunk,
                time_to_first_chunk_ms=statistics.median(r.time_to_first_chunk_ms for r in runs),
                total_ms=statistics.median(r.total_ms for r in runs),
                reps=reps,
                chunk=chunk_size,
                bundle_size=model.spec.bundle_size,
            )
        )
    report.flops.append(flop_accounting(model.spec, max(len(v) for v in inputs.values())))
    return report


def median_walltime(model: LoadedModel, inputs: np.ndarray, reps: int = 5, chunk: int = DEFAULT_CHUNK) -> float:
    _timed(model, inputs, chunk)
    return statistics.median(_timed(model, inputs, chunk).total_ms for _ in range(reps))


def compare_bundling(
    base: LoadedModel, bundled: LoadedModel, inputs: np.ndarray, reps: int = 5, chunk: int = DEFAULT_CHUNK
) -> dict:
    """Walltime and exact FLOP/step accounting of two bundle sizes on the same input."""
    t_base = median_walltime(base, inputs, reps, chunk)
    t_bundled = median_walltime(bundled, inputs, reps, chunk)
    fa = flop_accounting(base.spec, len(inputs))
    fb = flop_accounting(bundled.spec, len(inputs))
    return {
        "frames": len(inputs),
        "k_base": base.spec.bundle_size,
        "k_bundled": bundled.spec.bundle_size,
        "base_ms": t_base,
        "bundled_ms": t_bundled,
        "walltime_reduction": 1.0 - t_bundled / t_base,
        "recurrent_step_reduction": 1.0 - fb["recurrent_steps"] / fa["recurrent_steps"],
        "flop_reduction": 1.0 - fb["total"] / fa["total"],
    }


def frame_divergence(a: np.ndarray, b: np.ndarray, what: str) -> dict:
    """Per-frame RMS difference between two frame sequences of equal length."""
    n = min(len(a), len(b))
    diff = a[:n].astype(np.float64) - b[:n].astype(np.float64)
    per_frame = np.sqrt((diff**2).mean(1)) if n else np.zeros(0)
    return {
        "what": what,
        "frames_a": len(a),
        "frames_b": len(b),
        "rms": float(np.sqrt((diff**2).mean())) if n else 0.0,
        "rms_first": float(per_frame[: max(1, n // 10)].mean()) if n else 0.0,
        "rms_last": float(per_frame[-max(1, n // 10) :].mean()) if n else 0.0,
        "max_abs": float(np.abs(diff).max()) if n else 0.0,
    }


def quantized_copy(model: LoadedModel) -> LoadedModel:
    """The same model after an int8 save/load round trip."""
    from .quantstore import decode_model

    return decode_model(encode_model(model.spec, model.weights, True, model.normalizer))


# ---------------------------------------------------------------- CLI


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _write_report(report: BenchReport, out: str | None) -> None:
    text = report.dumps()
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def _load(path: str) -> LoadedModel:
    if not Path(path).is_file():
        raise CLIError(f"model file not found: {path}", EXIT_IO)
    return load_model(path)


def cmd_gen_corpus(args) -> int:
    if not args.out:
        raise CLIError("gen-corpus needs --out DIR", EXIT_USAGE)
    cfg = CorpusConfig(
        seed=args.seed,
        n_utterances=args.utterances,
        outlier_rate=args.outlier_rate,
    )
    corpus = generate(cfg)
    manifest = save_corpus(corpus, args.out)
    print(json.dumps({"utterances": len(corpus), "frames": sum(u.n_frames for u in corpus), "manifest": str(manifest)}))
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.corpus or not args.out:
        raise CLIError("train needs --corpus DIR and --out DIR", EXIT_USAGE)
    values = read_config(args.config) if args.config else {}
    if not Path(args.corpus, "manifest.tsv").is_file():
        raise CLIError(f"no corpus manifest in {args.corpus}", EXIT_IO)
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise ConfigError("empty corpus")
    seed = args.seed
    train_set, dev_set, _ = split(corpus, (0.8, 0.1, 0.1), seed)
    frame_dim = corpus[0].acoustic.shape[1]
    cfg = train_config_from(values, frame_dim, K=args.k, seed=seed, **{"loss.kind": args.loss})
    spec = NetworkSpec.acoustic(
        corpus[0].linguistic.shape[1],
        frame_dim,
        cfg.bundle_size,
        relu_units=values.get("relu_units", 128),
        cells=values.get("cells", 128),
        projection=values.get("projection", 64),
        lstm_layers=values.get("lstm_layers", 3),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    acoustic, a_log = build_acoustic_model(train_set, spec, cfg, dev_set)

    kind = cfg.loss.kind if cfg.loss else SQUARED
    d_lr = values.get("duration_learning_rate", default_learning_rate("duration", 1, kind))
    d_spec = NetworkSpec.duration(corpus[0].phoneme_features.shape[1], values.get("duration_cells", 64))
    d_cfg = dataclasses.replace(cfg, learning_rate=d_lr, bundle_size=1)
    duration, d_log = build_duration_model(train_set, d_spec, d_cfg, dev_set)

    a_bytes = save_model(acoustic.spec, acoustic.weights, args.quantize, out / "acoustic.model", acoustic.normalizer)
    d_bytes = save_model(duration.spec, duration.weights, args.quantize, out / "duration.model", duration.normalizer)
    with open(out / "train_log.jsonl", "w") as fh:
        for model_name, entries in (("acoustic", a_log), ("duration", d_log)):
            for entry in entries:
                fh.write(json.dumps({"model": model_name, **entry}) + "\n")
    print(
        json.dumps(
            {
                "acoustic_bytes": a_bytes,
                "duration_bytes": d_bytes,
                "acoustic_final": a_log[-1],
                "duration_final": d_log[-1],
            }
        )
    )
    return EXIT_OK


def cmd_quantize(args) -> int:
    if not args.inp or not args.out:
        raise CLIError("quantize needs --in MODEL and --out MODEL", EXIT_USAGE)
    model = _load(args.inp)
    in_bytes = Path(args.inp).stat().st_size
    out_bytes = save_model(model.spec, model.weights, True, args.out, model.normalizer)
    print(json.dumps({"in_bytes": in_bytes, "out_bytes": out_bytes, "ratio": out_bytes / in_bytes}))
    return EXIT_OK


def _read_phonemes(path: str) -> np.ndarray:
    if not Path(path).is_file():
        raise CLIError(f"phoneme file not found: {path}", EXIT_IO)
    try:
        return read_features(path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_synth(args) -> int:
    if not (args.model and args.duration_model and args.inp and args.out):
        raise CLIError("synth needs --model, --duration-model, --in and --out", EXIT_USAGE)
    acoustic = _load(args.model)
    duration = _load(args.duration_model)
    if args.quantize:
        acoustic, duration = quantized_copy(acoustic), quantized_copy(duration)
    if args.k is not None and args.k != acoustic.spec.bundle_size:
        raise ConfigError(f"--k {args.k} does not match the model bundle size {acoustic.spec.bundle_size}")
    phonemes = _read_phonemes(args.inp)
    if len(phonemes) == 0:
        raise ConfigError("empty phoneme list, nothing to synthesize")
    start = time.perf_counter()
    durations = predict_durations(duration, phonemes)
    frames_in = upsample(phonemes, durations)
    front_ms = (time.perf_counter() - start) * 1e3
    result = synthesize_stream(acoustic, frames_in, acoustic.spec.bundle_size, args.chunk)
    frames = result.frames
    fmt = "text" if args.format == "text" else "bin"
    n_bytes = emit_features(frames, args.out, fmt)
    rep = result.report
    print(
        json.dumps(
            {
                "phonemes": len(phonemes),
                "frames": len(frames),
                "bytes": n_bytes,
                "chunks": rep.chunks,
                "time_to_first_chunk_ms": rep.time_to_first_chunk_ms + front_ms,
                "total_ms": rep.total_ms + front_ms,
            }
        )
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    k = args.k or 1
    if args.model:
        model = _load(args.model)
        if args.k is not None and model.spec.bundle_size != args.k:
            raise ConfigError(f"--k {args.k} does not match the model bundle size {model.spec.bundle_size}")
    else:
        model = random_acoustic_model(args.input_dim, k, args.seed)
    if args.quantize:
        model = quantized_copy(model)
    inputs = bench_inputs(model.spec.input_dim, args.seed)
    report = measure_latency(model, inputs, args.chunk, args.reps)
    report.footprint = footprint(model)
    _write_report(report, args.out)
    return EXIT_OK


def cmd_compare(args) -> int:
    report = BenchReport()
    seed = args.seed
    if args.inp:
        base = _load(args.inp)
        if args.quantized:
            quant = _load(args.quantized)
            q_bytes = Path(args.quantized).stat().st_size
        else:
            quant = quantized_copy(base)
            q_bytes = len(encode_model(quant.spec, quant.weights, True, quant.normalizer))
        f_bytes = len(encode_model(base.spec, base.weights, False, base.normalizer))
        report.footprint = {
            "float_bytes": f_bytes,
            "quantized_bytes": q_bytes,
            "ratio": q_bytes / f_bytes,
            "parameters": base.spec.parameter_count(),
        }
    else:
        base = random_acoustic_model(args.input_dim, 1, seed)
        quant = quantized_copy(base)
        report.footprint = footprint(base)
    inputs = bench_inputs(base.spec.input_dim, seed, {"utterance": args.frames})["utterance"]

    out_f = synthesize_stream(base, inputs, base.spec.bundle_size, args.chunk).frames
    out_q = synthesize_stream(quant, inputs, quant.spec.bundle_size, args.chunk).frames
    report.divergences.append(frame_divergence(out_f, out_q, "float_vs_int8"))

    k = args.k or 4
    if args.bundled:
        bundled = _load(args.bundled)
    else:
        bundled = random_acoustic_model(base.spec.input_dim, k, seed)
    single = base if base.spec.bundle_size == 1 else random_acoustic_model(base.spec.input_dim, 1, seed)
    report.speedups.append(compare_bundling(single, bundled, inputs, args.reps, args.chunk))
    report.flops += [flop_accounting(single.spec, len(inputs)), flop_accounting(bundled.spec, len(inputs))]
    if args.bundled:
        out_b = synthesize_stream(bundled, inputs, bundled.spec.bundle_size, args.chunk).frames
        report.divergences.append(frame_divergence(out_f, out_b, f"k1_vs_k{bundled.spec.bundle_size}"))
    _write_report(report, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamtts", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, fmt=("bin", "text", "json-report")):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--k", type=int, help="frames per network step")
        p.add_argument("--quantize", action="store_true", help="use 8-bit weights")
        p.add_argument("--chunk", type=int, default=DEFAULT_CHUNK, help="frames per emitted chunk")
        p.add_argument("--reps", type=int, default=5, help="timed repetitions (median reported)")
        p.add_argument("--out", help="output path")
        p.add_argument("--format", choices=fmt, default=fmt[0])
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    common(p)
    p.add_argument("--utterances", type=int, default=50)
    p.add_argument("--outlier-rate", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train acoustic and duration models")
    common(p)
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--loss", choices=("squared", "contaminated"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="rewrite a model with 8-bit weights")
    common(p)
    p.add_argument("--in", dest="inp")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("synth", help="synthesize acoustic frames from phoneme features")
    common(p)
    p.add_argument("--in", dest="inp", help="phoneme feature file")
    p.add_argument("--model", help="acoustic model")
    p.add_argument("--duration-model")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="latency at four input lengths")
    common(p, fmt=("json-report",))
    p.add_argument("--model", help="acoustic model (default: untrained full-size model)")
    p.add_argument("--input-dim", type=int, default=29)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="float vs int8 and K=1 vs K>1")
    common(p, fmt=("json-report",))
    p.add_argument("--in", dest="inp", help="float model")
    p.add_argument("--quantized", help="int8 model (default: quantize --in in memory)")
    p.add_argument("--bundled", help="model with K > 1 (default: untrained full-size model)")
    p.add_argument("--frames", type=int, default=2000)
    p.add_argument("--input-dim", type=int, default=29)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.chunk < 1 or args.reps < 1:
            raise ConfigError("--chunk and --reps must be >= 1")
        return args.func(args)
    except CLIError as exc:
        print(f"streamtts {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"streamtts {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ModelFormatError, ValueError) as exc:
        print(f"streamtts {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"streamtts {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
