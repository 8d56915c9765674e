"""Rate experiment on ``ou_lines``: coupled L^p sup-errors over an eps grid and the fitted slope.

    python scripts/run_rate_experiment.py --paths 200 --eps 0.2 0.1 0.05 0.025
"""

import argparse
import json

from foliated_averaging.harness import ExperimentConfig, run_rate_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--system", default="ou_lines")
    ap.add_argument("--paths", type=int, default=200)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.2, 0.1, 0.05, 0.025])
    ap.add_argument("--p", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default=None, help="optional output CSV")
    args = ap.parse_args()

    cfg = ExperimentConfig(system=args.system, p=args.p, eps_grid=tuple(args.eps), n_paths=args.paths, seed=args.seed)

    def progress(e, samples):
        print(f"eps={e:g} done", flush=True)

    res = run_rate_experiment(cfg, on_eps=progress)
    for e, v, s in zip(res.eps, res.lp_errors, res.std_errors):
        print(f"eps={e:<8g} L{args.p:g}-sup error {v:.5f} +/- {s:.5f}")
    print(json.dumps(res.summary(), indent=2))
    if args.csv:
        res.to_csv(args.csv)


if __name__ == "__main__":
    main()
