"""Hash the prototypes of a converged run under each loss-term combination and code width.

    python3 scripts/hashing.py --bits 32 64 128 --terms r+s r+q r+s+q
"""

import argparse
import json
from dataclasses import asdict

from margin_metric.experiments import end_to_end, hash_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bits", type=int, nargs="+", default=[32])
    ap.add_argument("--terms", nargs="+", default=["r+s", "r+q"])
    ap.add_argument("--steps", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    run = end_to_end(seed=args.seed)
    rows = []
    for bits in args.bits:
        for terms in args.terms:
            out = hash_run(run, bits, terms, args.steps, args.seed)
            out["final"] = asdict(out["final"])
            rows.append(out)
    print(json.dumps({"euclidean_map": run.map, "results": rows}, indent=2))


if __name__ == "__main__":
    main()
