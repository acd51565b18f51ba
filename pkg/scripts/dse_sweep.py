"""Bit-width sweep over several seeds; reports mean holdout F1 with its standard error.

    python3 scripts/dse_sweep.py [--attack fuzzy] [--bits 2,3,4,8] [--seeds 3]
"""

import argparse

import numpy as np

from qmlp_ids import attacks, can_ingest, qnn_train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--attack", choices=["dos", "fuzzy"], default="fuzzy")
    ap.add_argument("--bits", default="2,3,4,8")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()
    bits = [int(b) for b in args.bits.split(",")]

    f1 = {b: [] for b in bits}
    fnr = {b: [] for b in bits}
    for seed in range(args.seeds):
        frames = attacks.synthesize(attacks.SynthConfig(kind=attacks.AttackKind(args.attack), seed=seed))
        tr, te = can_ingest.split_chronological(frames)
        (x_tr, y_tr), (x_te, y_te) = can_ingest.window_dataset(tr), can_ingest.window_dataset(te)
        config = qnn_train.TrainConfig(epochs=args.epochs, seed=seed)
        for row in qnn_train.dse_sweep(bits, x_tr, y_tr, x_te, y_te, config):
            f1[row.bits].append(row.f1)
            fnr[row.bits].append(row.fnr)
            print(f"seed {seed} bits {row.bits}: f1={row.f1:.4f} fnr={row.fnr:.4f}", flush=True)

    print(f"\n{'bits':>4} {'F1 mean':>9} {'sem':>8} {'FNR mean':>9}")
    for b in sorted(bits):
        v = np.array(f1[b])
        sem = v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else float("nan")
        print(f"{b:>4} {v.mean():>9.4f} {sem:>8.4f} {np.mean(fnr[b]):>9.4f}")


if __name__ == "__main__":
    main()
