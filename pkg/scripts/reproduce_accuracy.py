"""Train, lower and evaluate DoS and Fuzzy detectors; print the accuracy table.

Uses the synthetic fixtures unless --data points at a directory holding
DoS_dataset.csv / Fuzzy_dataset.csv in the Car Hacking CSV layout.

    python3 scripts/reproduce_accuracy.py [--data DIR] [--seed 0] [--epochs 30]
"""

import argparse
import time
from pathlib import Path

from qmlp_ids import attacks, can_ingest, evaluation, qnn_int, qnn_train

LOGS = {"dos": "DoS_dataset.csv", "fuzzy": "Fuzzy_dataset.csv"}


def load(attack, data_dir, seed):
    if data_dir is not None:
        frames, stats = can_ingest.read_dataset(data_dir / LOGS[attack], attack)
        return frames, f"{data_dir / LOGS[attack]} (malformed skipped: {stats.malformed})"
    kind = attacks.AttackKind(attack)
    return attacks.synthesize(attacks.SynthConfig(kind=kind, seed=seed)), "synthetic fixture"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", type=Path, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--bits", type=int, default=4)
    args = ap.parse_args()

    for attack in ("dos", "fuzzy"):
        t0 = time.perf_counter()
        frames, source = load(attack, args.data, args.seed)
        tr, te = can_ingest.split_chronological(frames, 0.7)
        x, y = can_ingest.window_dataset(tr)
        model = qnn_train.FakeQuantMlp.init(seed=args.seed, weight_bits=args.bits, act_bits=args.bits)
        model, _ = qnn_train.train(model, x, y, qnn_train.TrainConfig(epochs=args.epochs, seed=args.seed))
        int_model = qnn_int.lower(model)
        check = qnn_int.verify_equivalence(model, int_model, 10_000, seed=args.seed)
        result = evaluation.evaluate(int_model, te, can_ingest.DEFAULT_WINDOW, attack)
        print(f"\n== {attack}: {source}, {len(frames)} frames, "
              f"{check.mismatches} lowering mismatches, {time.perf_counter() - t0:.1f}s")
        print(evaluation.format_eval_table(evaluation.eval_report(result)))


if __name__ == "__main__":
    main()
