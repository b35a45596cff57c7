"""Hold out classes, train on the rest, and retrieve the held-out sketches.

    python3 scripts/zero_shot.py --holdout 8 9
"""

import argparse
import json

from margin_metric.experiments import zero_shot


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--holdout", type=int, nargs="+", default=[8, 9])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(json.dumps(zero_shot(tuple(args.holdout), args.steps, args.seed), indent=2))


if __name__ == "__main__":
    main()
