"""Per-message latency and throughput of the software path, plus a replay run.

    python3 scripts/bench_latency.py [--messages 100000] [--queue-depth 64]
"""

import argparse

import numpy as np

from qmlp_ids import attacks, can_ingest, evaluation, qnn_int, qnn_train, replay
from qmlp_ids.cli import synthetic_stream


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--messages", type=int, default=100_000)
    ap.add_argument("--queue-depth", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    frames = attacks.synthesize(attacks.SynthConfig(kind=attacks.AttackKind.DOS, seed=args.seed))
    tr, _ = can_ingest.split_chronological(frames)
    x, y = can_ingest.window_dataset(tr)
    model, _ = qnn_train.train(qnn_train.FakeQuantMlp.init(seed=args.seed), x, y,
                               qnn_train.TrainConfig(seed=args.seed))
    int_model = qnn_int.lower(model)

    stream = synthetic_stream(args.messages, args.seed)
    res = evaluation.bench(int_model, stream)
    print(evaluation.format_bench_table(evaluation.bench_report(res)))

    r = replay.replay(int_model, stream, queue_depth=args.queue_depth)
    lat = np.array([v.latency_us for v in r.verdicts])
    print(f"\nreplay: {r.frames} frames, {len(r.verdicts)} verdicts, stalls={r.stalls}, "
          f"max depth={r.max_depth}, wall={r.wall_time_s:.2f}s")
    print(f"enqueue->verdict us: median={np.median(lat):.1f} p99={np.percentile(lat, 99):.1f}")


if __name__ == "__main__":
    main()
