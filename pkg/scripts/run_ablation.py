"""Ablation table on the synthetic benchmark: every model variant x several seeds.

Writes one JSON line per run to ``<out>/runs.jsonl`` (resumable: finished
runs are skipped) and prints the mean accuracy per variant.

    python3 scripts/run_ablation.py --seeds 7 8 9 --out results/ablation
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from houghlane.pipeline import ABLATIONS, PipelineConfig, train_toy
from houghlane.serialization import append_jsonl, read_jsonl

ORDER = ["baseline", "s_dht", "s_dht_hdec", "m_dht_hdec", "full"]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7, 8, 9])
    ap.add_argument("--ablations", nargs="+", choices=sorted(ABLATIONS), default=ORDER)
    ap.add_argument("--scenes", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", default="results/ablation")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "runs.jsonl"
    done = {(r["ablation"], r["seed"]) for r in read_jsonl(log)} if log.exists() else set()
    for ablation in args.ablations:
        for seed in args.seeds:
            if (ablation, seed) in done:
                continue
            t0 = time.perf_counter()
            res = train_toy(None, PipelineConfig.toy(ablation=ablation, seed=seed), args.epochs, args.scenes)
            row = {"ablation": ablation, "seed": seed, "accuracy": res.final_accuracy,
                   "best_accuracy": max(r["accuracy"] for r in res.trace), "minutes": (time.perf_counter() - t0) / 60}
            append_jsonl(log, row)
            print(json.dumps(row), flush=True)

    rows = [r for r in read_jsonl(log) if r["seed"] in args.seeds]
    print(f"{'variant':<12} {'mean':>6}  per seed")
    for ablation in args.ablations:
        accs = [r["accuracy"] for r in rows if r["ablation"] == ablation]
        if accs:
            print(f"{ablation:<12} {np.mean(accs):6.3f}  {' '.join(f'{a:.3f}' for a in accs)}")


if __name__ == "__main__":
    main()
