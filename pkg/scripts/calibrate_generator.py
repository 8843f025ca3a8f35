"""Measure the synthetic generator: class marginals, fail fraction, reference accuracy.

Usage: python3 scripts/calibrate_generator.py [--records 10000] [--seed 0]
"""
import argparse

import numpy as np

from fedlop import experiment as ex
from fedlop.data import EncodedSet, SyntheticConfig, encode_dataset, generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--records", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-centralized", action="store_true")
    args = ap.parse_args()

    cfg = SyntheticConfig(seed=args.seed)
    data = encode_dataset(generate_synthetic(cfg, args.records), cfg.schema())
    frac = data.class_counts() / len(data)
    print("class marginals:", " ".join(f"{p:.3f}" for p in frac))
    print(f"fail fraction: {frac[0]:.3%}")

    if not args.skip_centralized:
        exp = ex.config_from_dict({"federation": {"n_clients": 5}, "data": {"samples_per_client": 2000},
                                   "seeds": {"split": args.seed}})
        sets = ex.prepare_datasets(exp)
        acc = ex.train_centralized(EncodedSet.concat([a for a, _ in sets]),
                                   EncodedSet.concat([b for _, b in sets]), seed=args.seed)
        print(f"centralized reference accuracy: {acc:.3f}")
    return 0 if np.isfinite(frac).all() else 1


if __name__ == "__main__":
    raise SystemExit(main())
