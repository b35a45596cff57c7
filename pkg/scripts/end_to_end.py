"""Train EMS on the default synthetic set and report retrieval + distance diagnostics.

    python3 scripts/end_to_end.py --steps 5000 --seed 0 --hist hist.csv
"""

import argparse
import json

from margin_metric.experiments import end_to_end


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--m", type=float, default=4.0)
    ap.add_argument("--hist", help="write the min inter-class distance histogram here")
    ap.add_argument("--table", help="write per-class max intra / min inter distances here")
    args = ap.parse_args()

    run = end_to_end(steps=args.steps, seed=args.seed, m=args.m)
    report = run.extra["report"]
    if args.hist:
        report.write_histogram(args.hist)
    if args.table:
        report.write_rows(args.table)
    print(json.dumps({
        "map": run.map,
        "precision@100": run.extra["precision@100"],
        "p1": run.p1,
        "final_loss": run.final_loss,
        "seconds": round(run.seconds, 2),
        "distances": report.to_dict(),
    }, indent=2))


if __name__ == "__main__":
    main()
