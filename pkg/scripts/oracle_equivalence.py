"""Where the DHT puts the accumulator maximum for every rasterized pixel-pair line.

    python3 scripts/oracle_equivalence.py --size 16 --bins 16 24 32
"""
import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from checks import oracle_equivalence  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--bins", type=int, nargs="+", default=[16, 24, 32])
    args = ap.parse_args()
    for b in args.bins:
        print(json.dumps({"size": args.size, "bins": b, **oracle_equivalence(args.size, b)}))


if __name__ == "__main__":
    main()
