"""Compare strategies on the heterogeneous label-shift preset over several seeds.

Usage: python3 scripts/run_ablation.py [--config configs/heterogeneous.json]
       [--seeds 0,1,2] [--strategies fecmap,fecmap_lsl,fecmap_mpp,fedavg,fedrep] [--tail 20]
"""
import argparse
import csv
import sys

import numpy as np

from fedlop import experiment as ex
from fedlop.federation import run_training


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/heterogeneous.json")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--strategies", default="fecmap,fecmap_lsl,fecmap_mpp,fedavg,fedrep")
    ap.add_argument("--tail", type=int, default=20, help="rounds averaged at the end of each run")
    ap.add_argument("--out", default=None, help="optional CSV with one row per (strategy, seed)")
    args = ap.parse_args()

    base = ex.load_config(args.config).to_dict()
    strategies = args.strategies.split(",")
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        d = dict(base, seeds={"federation": seed, "split": seed})
        d["data"] = dict(base["data"], synthetic=dict(base["data"]["synthetic"], seed=seed))
        sets = ex.prepare_datasets(ex.config_from_dict(d))
        for s in strategies:
            hist = run_training(ex.config_from_dict(dict(d, strategy=s)).federation(), sets)
            acc = [r.mean_accuracy for r in hist.rounds]
            rows.append({"strategy": s, "seed": seed, "final": hist.mean_accuracy,
                         "tail": float(np.mean(acc[-args.tail:]))})
            print(f"seed {seed} {s:12s} final {hist.mean_accuracy:.4f} tail {rows[-1]['tail']:.4f}",
                  flush=True)
    print()
    for s in strategies:
        mine = [r for r in rows if r["strategy"] == s]
        print(f"{s:12s} final {np.mean([r['final'] for r in mine]):.4f}"
              f"  last-{args.tail} {np.mean([r['tail'] for r in mine]):.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
