"""Command-line entry point: ``qmlp-ids {synth,train,lower,eval,bench,replay,dse}``.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import attacks, can_ingest, evaluation, qnn_int, qnn_train, replay

log = logging.getLogger("qmlp_ids")


class UsageError(Exception):
    pass


def _interval(text: str) -> tuple[float, float]:
    try:
        a, b = text.split(":")
        return float(a), float(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:STOP seconds, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--window", type=int, default=None,
                        help=f"FIFO window length W (default {can_ingest.DEFAULT_WINDOW}, "
                             "or the model's input width / 10)")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--strict", action="store_true", help="abort on malformed log records")
    common.add_argument("-v", "--verbose", action="store_true")

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--attack", choices=["dos", "fuzzy"], default="dos")
    train_opts.add_argument("--hidden", type=_int_list, default=[64, 32],
                            help="hidden layer widths (default 64,32)")
    train_opts.add_argument("--epochs", type=int, default=30)
    train_opts.add_argument("--batch-size", type=int, default=256)
    train_opts.add_argument("--lr", type=float, default=1e-3)
    train_opts.add_argument("--class-weighting", type=float, default=1.0)
    train_opts.add_argument("--train-fraction", type=float, default=0.7,
                            help="chronological train share of the log (rest is holdout)")

    parser = argparse.ArgumentParser(prog="qmlp-ids", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a labelled synthetic CAN log")
    p.add_argument("--attack", choices=["dos", "fuzzy", "none"], default="dos")
    p.add_argument("--rate", type=float, default=None, help="injection rate, messages/s")
    p.add_argument("--duration", type=float, default=None, help="capture length, seconds")
    p.add_argument("--interval", type=_interval, action="append", default=None,
                   help="attack burst START:STOP in seconds (repeatable)")
    p.add_argument("--profile", type=Path, default=None, help="traffic profile JSON")
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("train", parents=[common, train_opts], help="quantisation-aware training")
    p.add_argument("dataset", type=Path)
    p.add_argument("--bits", type=int, default=4, help="weight and activation bit width")
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("lower", parents=[common], help="lower a checkpoint to the integer model")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--samples", type=int, default=10_000, help="equivalence-check samples")
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="accuracy report for a lowered model")
    p.add_argument("model", type=Path)
    p.add_argument("dataset", type=Path)
    p.add_argument("--attack", choices=["dos", "fuzzy"], default=None)
    p.add_argument("--split", choices=["all", "train", "test"], default="all")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--csv", type=Path, default=None, help="also write the table as CSV")

    p = sub.add_parser("bench", parents=[common], help="per-message latency / throughput")
    p.add_argument("model", type=Path)
    p.add_argument("dataset", type=Path, nargs="?", default=None)
    p.add_argument("--synthetic", type=int, default=None, metavar="N",
                   help="benchmark N synthetic DoS-mix messages instead of a log")
    p.add_argument("--limit", type=int, default=None, help="only the first N messages")

    p = sub.add_parser("replay", parents=[common], help="two-stage streaming replay")
    p.add_argument("model", type=Path)
    p.add_argument("dataset", type=Path)
    p.add_argument("--speed", type=float, default=0.0, help="time scale; 0 = as fast as possible")
    p.add_argument("--queue-depth", type=int, default=64)
    p.add_argument("-o", "--output", type=Path, default=None, help="verdict log CSV")

    p = sub.add_parser("dse", parents=[common, train_opts], help="bit-width sweep")
    p.add_argument("dataset", type=Path)
    p.add_argument("--bits", type=_int_list, default=[2, 3, 4, 8])
    return parser


def _emit_config(args) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    print("config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)


def _window(args, model_dims=None) -> int:
    if model_dims is not None:
        if model_dims[0] % can_ingest.FEATURES_PER_FRAME:
            raise ValueError(f"model input width {model_dims[0]} is not a multiple of "
                             f"{can_ingest.FEATURES_PER_FRAME}")
        implied = model_dims[0] // can_ingest.FEATURES_PER_FRAME
        if args.window is not None and args.window != implied:
            raise UsageError(f"--window {args.window} does not match the model (W={implied})")
        return implied
    w = args.window if args.window is not None else can_ingest.DEFAULT_WINDOW
    if w < 1:
        raise UsageError("--window must be >= 1")
    return w


def _read(args, path: Path, kind=None):
    frames, stats = can_ingest.read_dataset(path, kind, strict=args.strict)
    log.info("read %s: normal=%d attack=%d malformed=%d", path, stats.normal, stats.attack,
             stats.malformed)
    if stats.malformed:
        print(f"warning: skipped {stats.malformed} malformed record(s) in {path}", file=sys.stderr)
    return frames


def _train_config(args) -> qnn_train.TrainConfig:
    return qnn_train.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                 learning_rate=args.lr, seed=args.seed,
                                 class_weighting=args.class_weighting)


def _split_windows(args, frames, window):
    if not 0 < args.train_fraction < 1:
        raise UsageError("--train-fraction must be in (0, 1)")
    tr, te = can_ingest.split_chronological(frames, args.train_fraction)
    return can_ingest.window_dataset(tr, window), can_ingest.window_dataset(te, window)


def cmd_synth(args) -> int:
    profile = attacks.TrafficProfile.from_json(args.profile) if args.profile else attacks.TrafficProfile()
    if args.duration is not None:
        profile = replace(profile, duration=args.duration)
    kind = None if args.attack == "none" else attacks.AttackKind(args.attack)
    config = attacks.SynthConfig(profile, kind, args.rate,
                                 tuple(args.interval) if args.interval else None, args.seed)
    frames = attacks.synthesize(config)
    n = attacks.write_log(frames, args.output)
    n_attack = sum(f.label == can_ingest.Label.ATTACK for f in frames)
    summary = {"output": str(args.output), "frames": n, "attack_frames": n_attack}
    print(json.dumps(summary) if args.json else
          f"wrote {n} frames ({n_attack} attack) to {args.output}")
    return 0


def cmd_train(args) -> int:
    window = _window(args)
    frames = _read(args, args.dataset, args.attack)
    (x_tr, y_tr), (x_te, y_te) = _split_windows(args, frames, window)
    dims = [window * can_ingest.FEATURES_PER_FRAME, *args.hidden, 2]
    model = qnn_train.FakeQuantMlp.init(dims, seed=args.seed, weight_bits=args.bits,
                                        act_bits=args.bits)
    model, trace = qnn_train.train(model, x_tr, y_tr, _train_config(args))
    m = evaluation.metrics(evaluation.confusion(model.predict_codes(x_te), y_te))
    model.metadata.update({
        "attack": args.attack,
        "window": window,
        "bits": args.bits,
        "dataset": args.dataset.name,
        "dataset_sha256": qnn_int.file_sha256(args.dataset),
        "train_fraction": args.train_fraction,
        "loss_trace": trace.loss,
        "holdout": {"windows": int(len(y_te)), **asdict(m), "undefined": list(m.undefined)},
        "final_f1": m.f1,
    })
    qnn_train.save_checkpoint(model, args.output)
    if args.json:
        print(json.dumps({"checkpoint": str(args.output), "holdout": model.metadata["holdout"]}))
    else:
        print(f"trained {dims} ({args.bits}-bit) on {len(y_tr)} windows; "
              f"final loss {trace.loss[-1]:.5f}" if trace.loss else "trained (0 epochs)")
        print(f"holdout ({len(y_te)} windows): precision={m.precision:.4f} recall={m.recall:.4f} "
              f"f1={m.f1:.4f} fnr={m.fnr:.4f}")
        print(f"wrote {args.output}")
    return 0


def cmd_lower(args) -> int:
    model = qnn_train.load_checkpoint(args.checkpoint)
    int_model = qnn_int.lower(model, qnn_int.file_sha256(args.checkpoint))
    int_model.metadata = {k: model.metadata[k] for k in ("attack", "window", "bits", "seed")
                          if k in model.metadata}
    report = qnn_int.verify_equivalence(model, int_model, args.samples, seed=args.seed)
    bounds = qnn_int.accumulator_bounds(int_model)
    if not report.passed:
        print(f"error: {report.mismatches} mismatches in {report.samples} samples; "
              f"refusing to write {args.output}; witness: {report.witnesses[0]}", file=sys.stderr)
        return 1
    if not all(b.fits() for b in bounds):
        print("error: accumulator bounds exceed the 64-bit accumulator", file=sys.stderr)
        return 1
    qnn_int.save_lowered(int_model, args.output)
    if args.json:
        print(json.dumps({"lowered": str(args.output), "samples": report.samples,
                          "mismatches": report.mismatches,
                          "max_logit_error": report.max_logit_error,
                          "accumulator_bounds": [[b.lo, b.hi] for b in bounds]}))
    else:
        print(f"equivalence: {report.samples} samples, {report.mismatches} mismatches "
              f"(max logit error {report.max_logit_error:.3g})")
        print("accumulator bounds: " + ", ".join(f"[{b.lo}, {b.hi}]" for b in bounds))
        print(f"wrote {args.output}")
    return 0


def cmd_eval(args) -> int:
    int_model = qnn_int.load_lowered(args.model)
    window = _window(args, int_model.layer_dims)
    attack = args.attack or int_model.metadata.get("attack")
    frames = _read(args, args.dataset, attack)
    if args.split != "all":
        if not 0 < args.train_fraction < 1:
            raise UsageError("--train-fraction must be in (0, 1)")
        tr, te = can_ingest.split_chronological(frames, args.train_fraction)
        frames = tr if args.split == "train" else te
    result = evaluation.evaluate(int_model, frames, window, attack)
    report = evaluation.eval_report(result)
    if args.csv:
        args.csv.write_text(evaluation.eval_csv(report))
    print(json.dumps(report, sort_keys=True) if args.json else evaluation.format_eval_table(report))
    return 0


def cmd_bench(args) -> int:
    int_model = qnn_int.load_lowered(args.model)
    window = _window(args, int_model.layer_dims)
    if args.synthetic is not None:
        frames = synthetic_stream(args.synthetic, args.seed)
    elif args.dataset is not None:
        frames = _read(args, args.dataset)
    else:
        raise UsageError("bench needs a dataset or --synthetic N")
    if args.limit is not None:
        frames = frames[:args.limit]
    report = evaluation.bench_report(evaluation.bench(int_model, frames, window))
    print(json.dumps(report, sort_keys=True) if args.json else evaluation.format_bench_table(report))
    return 0


def synthetic_stream(n: int, seed: int = 0) -> list[can_ingest.CanFrame]:
    """At least ``n`` frames of DoS-mix synthetic traffic, truncated to ``n``."""
    duration = max(1.0, n / 2900.0)
    frames: list[can_ingest.CanFrame] = []
    while len(frames) < n:
        profile = attacks.TrafficProfile(duration=duration)
        frames = attacks.synthesize(attacks.SynthConfig(profile, attacks.AttackKind.DOS, seed=seed))
        duration *= 1.5
    return frames[:n]


def cmd_replay(args) -> int:
    int_model = qnn_int.load_lowered(args.model)
    window = _window(args, int_model.layer_dims)
    frames = _read(args, args.dataset)
    result = replay.replay(int_model, frames, window, args.speed, args.queue_depth)
    if args.output:
        args.output.write_text(replay.format_verdict_log(result))
    lat = np.array([v.latency_us for v in result.verdicts]) if result.verdicts else np.zeros(1)
    summary = {
        "frames": result.frames,
        "verdicts": len(result.verdicts),
        "attack_verdicts": int(sum(result.predictions)),
        "stalls": result.stalls,
        "dropped": 0,
        "max_queue_depth": result.max_depth,
        "wall_time_s": result.wall_time_s,
        "detection_latency_us": {"mean": float(lat.mean()), "median": float(np.median(lat)),
                                 "p99": float(np.percentile(lat, 99))},
    }
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(f"replayed {result.frames} frames -> {summary['verdicts']} verdicts "
              f"({summary['attack_verdicts']} attack); producer stalls={result.stalls}, dropped=0")
        d = summary["detection_latency_us"]
        print(f"detection latency us: mean={d['mean']:.1f} median={d['median']:.1f} p99={d['p99']:.1f}")
        if args.output:
            print(f"wrote {args.output}")
    return 0


def cmd_dse(args) -> int:
    window = _window(args)
    frames = _read(args, args.dataset, args.attack)
    (x_tr, y_tr), (x_te, y_te) = _split_windows(args, frames, window)
    dims = [window * can_ingest.FEATURES_PER_FRAME, *args.hidden, 2]
    rows = qnn_train.dse_sweep(args.bits, x_tr, y_tr, x_te, y_te, _train_config(args), dims)
    if args.json:
        print(json.dumps({"kind": "dse", "attack": args.attack, "rows": [asdict(r) for r in rows]},
                         sort_keys=True))
    else:
        print(f"{'bits':>4} {'precision':>9} {'recall':>8} {'F1':>8} {'FNR':>8}")
        for r in rows:
            print(f"{r.bits:>4} {r.precision:>9.4f} {r.recall:>8.4f} {r.f1:>8.4f} {r.fnr:>8.4f}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "lower": cmd_lower, "eval": cmd_eval,
    "bench": cmd_bench, "replay": cmd_replay, "dse": cmd_dse,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _emit_config(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
