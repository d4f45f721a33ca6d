"""Train the toy model once and write the metric trace and checkpoint.

    python3 scripts/train_toy.py --seed 7 --ablation full --out runs/full_7
"""
import argparse
import json
import time
from pathlib import Path

from houghlane.pipeline import ABLATIONS, PipelineConfig, save_model, train_toy
from houghlane.serialization import write_jsonl


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--ablation", choices=sorted(ABLATIONS), default="full")
    ap.add_argument("--scenes", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--difficulty", type=float, default=0.5)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()

    cfg = PipelineConfig.toy(ablation=args.ablation, seed=args.seed, difficulty=args.difficulty)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = train_toy(None, cfg, args.epochs, args.scenes,
                    log=lambda row: print(json.dumps({k: round(v, 4) for k, v in row.items()}), flush=True))
    write_jsonl(out / "trace.jsonl", res.trace)
    save_model(out / "model.hlwt", res.model)
    summary = {"ablation": args.ablation, "seed": args.seed, "accuracy": res.final_accuracy,
               "minutes": (time.perf_counter() - t0) / 60}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
