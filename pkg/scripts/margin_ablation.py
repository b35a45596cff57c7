"""EMS margin sweep on the noisy synthetic variant, several seeds per margin.

    python3 scripts/margin_ablation.py --margins 1 2 4 8 --seeds 5
"""

import argparse
import json

import numpy as np

from margin_metric.experiments import NOISY, margin_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--margins", type=float, nargs="+", default=[1.0, 4.0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--sigma", type=float, default=NOISY["sigma"])
    ap.add_argument("--anchor-radius", type=float, default=NOISY["anchor_radius"])
    args = ap.parse_args()

    maps = margin_ablation(args.margins, range(args.seeds), args.steps, args.sigma, args.anchor_radius)
    rows = [{"m": m, "mean_map": float(np.mean(v)), "std_map": float(np.std(v)), "per_seed": v}
            for m, v in maps.items()]
    print(json.dumps({"sigma": args.sigma, "anchor_radius": args.anchor_radius, "steps": args.steps,
                      "results": rows}, indent=2))


if __name__ == "__main__":
    main()
