"""Command-line entry point: genmodel, quantize, stream, eval, bench.

Exit codes: 0 success, 1 usage error, 2 data error.  Every command writes its
outputs and a ``manifest.json`` under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from .bench import run_bench, worker_cap, write_bench_csv, write_latency_plot_csv
from .evalkit import LatencyMetrics, aggregate_report, read_transcripts, score_files, write_report
from .mel import read_raw_f32, read_wav
from .quant import MixedPolicy, PolicyError, QuantConfig, Scheme, boundary_mixed_policy, quantize_model
from .tensorstore import ContainerError, container_size_bytes, read_container, write_container
from .transducer import (
    ModelError,
    StreamingConfig,
    ToyModelSpec,
    Transducer,
    generate_toy_model,
    init_session,
    stream_audio,
)

log = logging.getLogger("edgeasr")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _flags_hash(args: argparse.Namespace) -> str:
    flags = {k: str(v) for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    return hashlib.sha256(json.dumps(flags, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, args: argparse.Namespace, argv: Sequence[str], inputs: Sequence[Path],
                   outputs: Sequence[Path], wall_s: float, extra: dict | None = None) -> Path:
    manifest = {
        "command": ["edgeasr", *argv],
        "subcommand": args.command,
        "seed": getattr(args, "seed", None),
        "flags_sha256": _flags_hash(args),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "wall_clock_s": wall_s,
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _parse_config(text: str) -> StreamingConfig:
    try:
        return StreamingConfig.parse(text)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_model(path: Path, int_matmul: bool = False) -> Transducer:
    try:
        return Transducer(read_container(path), int_matmul=int_matmul)
    except OSError as e:
        raise DataError(f"cannot read model {path}: {e}") from None
    except (ContainerError, ModelError) as e:
        raise DataError(f"{path}: {e}") from None


# ---------------------------------------------------------------------- commands


def cmd_genmodel(args: argparse.Namespace) -> tuple[list[Path], list[Path], dict]:
    try:
        spec = ToyModelSpec(
            n_layers=args.layers,
            d_model=args.d_model,
            n_heads=args.heads,
            conv_kernel=args.conv_kernel,
            vocab_size=args.vocab,
            d_dec=args.d_dec,
            d_joint=args.d_joint,
            ff_mult=args.ff_mult,
            max_symbols_per_step=args.max_symbols,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    container = generate_toy_model(spec, seed=args.seed)
    path = args.out / args.name
    write_container(container, path)
    return [], [path], {"payload_bytes": container_size_bytes(container)}


def cmd_quantize(args: argparse.Namespace) -> tuple[list[Path], list[Path], dict]:
    try:
        container = read_container(args.input)
    except OSError as e:
        raise DataError(f"cannot read {args.input}: {e}") from None
    except ContainerError as e:
        raise DataError(f"{args.input}: {e}") from None
    try:
        spec = ToyModelSpec.from_json(container.metadata["model.spec"])
    except KeyError:
        raise DataError(f"{args.input}: no model.spec metadata") from None

    inputs = [args.input]
    policy = None
    if args.policy == "mixed":
        policy = boundary_mixed_policy(spec.n_layers)
    elif args.policy:
        try:
            policy = MixedPolicy.load(args.policy)
        except OSError as e:
            raise DataError(f"cannot read policy {args.policy}: {e}") from None
        except PolicyError as e:
            raise DataError(str(e)) from None
        inputs.append(Path(args.policy))

    if args.scope == "none":
        scope = lambda name: False  # noqa: E731
    elif args.scope == "all":
        scope = lambda name: True  # noqa: E731
    else:
        names = set(spec.encoder_linear_names())
        scope = names.__contains__
    cfg = QuantConfig(bits=args.bits, block_size=args.block_size, scheme=Scheme(args.scheme))
    out = quantize_model(container, cfg, policy, scope, workers=worker_cap(args.workers))
    path = args.out / args.name
    write_container(out, path)
    extra = {
        "payload_bytes_before": container_size_bytes(container),
        "payload_bytes_after": container_size_bytes(out),
        "tensor_bits": json.loads(out.metadata.get("quant.tensor_bits", "{}")),
    }
    return inputs, [path], extra


def _read_audio(path: Path, fmt: str, sample_rate: int):
    try:
        if fmt == "raw" or (fmt == "auto" and path.suffix.lower() in (".raw", ".f32", ".pcm")):
            return read_raw_f32(path)
        audio, sr = read_wav(path)
    except OSError as e:
        raise DataError(f"cannot read audio {path}: {e}") from None
    except ValueError as e:
        raise DataError(str(e)) from None
    if sr != sample_rate:
        raise DataError(f"{path}: sample rate {sr} Hz, model expects {sample_rate} Hz")
    return audio


def cmd_stream(args: argparse.Namespace) -> tuple[list[Path], list[Path], dict]:
    cfg = _parse_config(args.config)
    model = _load_model(args.model, args.int_matmul)
    if cfg.hops_per_unit != model.mel_cfg.hops_per_unit:
        cfg = StreamingConfig(*cfg.as_tuple(), hops_per_unit=model.mel_cfg.hops_per_unit)

    hyp_lines, timing_rows, summaries = [], [], []
    durations, timings, flush_total = [], [], 0.0
    for audio_path in args.audio:
        audio = _read_audio(audio_path, args.format, model.mel_cfg.sample_rate)
        if audio.size == 0:
            raise DataError(f"{audio_path}: empty audio")
        uid = f"{args.dataset}/{audio_path.stem}" if args.dataset else audio_path.stem
        session = init_session(model, cfg)
        stream_audio(session, audio)
        lat = LatencyMetrics.from_timings(cfg.delay_s, session.chunk_durations, session.chunk_timings,
                                          session.flush_time_s)
        hyp_lines.append(f"{uid}\t{session.text}")
        for i, (d, t) in enumerate(zip(session.chunk_durations, session.chunk_timings)):
            timing_rows.append([uid, i, d, t, d / t])
        summaries.append({"id": uid, "tokens": len(session.transcript), **lat.to_dict()})
        durations += session.chunk_durations
        timings += session.chunk_timings
        flush_total += session.flush_time_s

    overall = LatencyMetrics.from_timings(cfg.delay_s, durations, timings, flush_total)
    hyp_path = args.out / "hyp.tsv"
    hyp_path.write_text("\n".join(hyp_lines) + "\n", encoding="utf-8")
    timing_path = args.out / "timings.csv"
    with timing_path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "chunk", "audio_s", "compute_s", "rtfx"])
        w.writerows(timing_rows)
    summary = {
        "config": list(cfg.as_tuple()),
        "delay_s": cfg.delay_s,
        "history_s": cfg.history_window_s,
        "int_matmul": args.int_matmul,
        "model_size_bytes": args.model.stat().st_size,
        **overall.to_dict(),
        "utterances": summaries,
    }
    summary_path = args.out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2))
    print(f"delay {cfg.delay_s:.2f} s  history {cfg.history_window_s:.1f} s  "
          f"RTFx {overall.rtfx:.2f}  effective latency {overall.effective_latency_s:.3f} s")
    return [args.model, *args.audio], [hyp_path, timing_path, summary_path], {}


def cmd_eval(args: argparse.Namespace) -> tuple[list[Path], list[Path], dict]:
    hyp_file = args.hyps / "hyp.tsv" if args.hyps.is_dir() else args.hyps
    inputs = [args.refs, hyp_file]
    try:
        refs = read_transcripts(args.refs)
        hyps = read_transcripts(hyp_file)
        per_dataset = score_files(refs, hyps)
    except OSError as e:
        raise DataError(str(e)) from None
    except ValueError as e:
        raise DataError(str(e)) from None

    latency, size, config = None, None, {}
    summary_path = hyp_file.parent / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        latency = LatencyMetrics(summary["rtfx"], summary["delay_s"], summary["effective_latency_s"])
        size = summary.get("model_size_bytes")
        config = {"label": ",".join(map(str, summary["config"])), "config": summary["config"]}
        inputs.append(summary_path)
    baseline = args.batch_baseline / 100.0 if args.batch_baseline is not None else None
    try:
        report = aggregate_report(per_dataset, latency, baseline, model_size_bytes=size, config=config)
    except ValueError as e:
        raise DataError(str(e)) from None
    paths = write_report(report, args.out)
    line = f"average WER {100 * report.average_wer:.2f}%"
    if report.bsf is not None:
        line += f"  BSF {report.bsf:.2f}"
    print(line)
    return inputs, paths, {}


def cmd_bench(args: argparse.Namespace) -> tuple[list[Path], list[Path], dict]:
    configs = [_parse_config(c) for c in args.configs.split(";") if c.strip()]
    if not configs:
        raise UsageError("--configs is empty")
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    model = _load_model(args.model, args.int_matmul)
    configs = [StreamingConfig(*c.as_tuple(), hops_per_unit=model.mel_cfg.hops_per_unit) for c in configs]
    rows, _ = run_bench(model, configs, repeat=args.repeat, seconds=args.seconds, seed=args.seed,
                        workers=worker_cap(args.workers))
    bench_path = args.out / "bench.csv"
    write_bench_csv(rows, bench_path)
    plot_path = args.out / "plot_latency.csv"
    write_latency_plot_csv(rows, plot_path)
    for r in rows:
        flag = "  DROPOUT" if r.dropout else ""
        print(f"({r.config})  RTFx {r.rtfx_mean:.2f}  min chunk {r.min_chunk_rtfx:.2f}  "
              f"effective latency {r.effective_latency_s:.3f} s{flag}")
    return [args.model], [bench_path, plot_path], {}


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgeasr", description="Toy streaming transducer toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("genmodel", help="write a seeded random toy model")
    d = ToyModelSpec()
    g.add_argument("--layers", type=int, default=d.n_layers)
    g.add_argument("--d-model", type=int, default=d.d_model)
    g.add_argument("--heads", type=int, default=d.n_heads)
    g.add_argument("--conv-kernel", type=int, default=d.conv_kernel)
    g.add_argument("--vocab", type=int, default=d.vocab_size)
    g.add_argument("--d-dec", type=int, default=d.d_dec)
    g.add_argument("--d-joint", type=int, default=d.d_joint)
    g.add_argument("--ff-mult", type=int, default=d.ff_mult)
    g.add_argument("--max-symbols", type=int, default=d.max_symbols_per_step)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--name", default="model.estm")
    g.set_defaults(func=cmd_genmodel)

    q = sub.add_parser("quantize", help="block-quantize a model container")
    q.add_argument("--in", dest="input", type=Path, required=True)
    q.add_argument("--bits", type=int, choices=(4, 8), default=4)
    q.add_argument("--scheme", choices=[s.value for s in Scheme], default=Scheme.KQUANT.value)
    q.add_argument("--block-size", type=int, default=32)
    q.add_argument("--policy", help="mixed-precision policy JSON file, or 'mixed' for the built-in one")
    q.add_argument("--scope", choices=("encoder", "all", "none"), default="encoder")
    q.add_argument("--workers", type=int, default=None)
    q.add_argument("--name", default="model.estm")
    q.set_defaults(func=cmd_quantize)

    s = sub.add_parser("stream", help="stream audio files through a model")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("audio", type=Path, nargs="+")
    s.add_argument("--format", choices=("auto", "wav", "raw"), default="auto")
    s.add_argument("--config", default="7,10,7", help="chunk,left,shift in 80 ms units")
    s.add_argument("--int-matmul", action="store_true")
    s.add_argument("--dataset", default="", help="prefix utterance ids with DATASET/")
    s.set_defaults(func=cmd_stream)

    e = sub.add_parser("eval", help="score hypotheses against references")
    e.add_argument("--refs", type=Path, required=True)
    e.add_argument("--hyps", type=Path, required=True, help="ID<TAB>text file or a stream output directory")
    e.add_argument("--batch-baseline", type=float, help="batch WER in percent, for BSF")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="RTFx benchmark on synthetic audio")
    b.add_argument("--model", type=Path, required=True)
    b.add_argument("--configs", default="14,2,14;7,10,7;2,35,2;1,70,1", help="';'-separated c,l,s tuples")
    b.add_argument("--repeat", type=int, default=5)
    b.add_argument("--seconds", type=float, default=4.48)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--int-matmul", action="store_true")
    b.add_argument("--workers", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    for sp in (g, q, s, e, b):
        sp.add_argument("--out", type=Path, required=True, help="output directory")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        inputs, outputs, extra = args.func(args)
        write_manifest(args.out, args, argv, inputs, outputs, time.perf_counter() - t0, extra)
    except UsageError as e:
        print(f"edgeasr {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as e:
        print(f"edgeasr {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
