"""Dominance of the maximal solution by the power-law bound over a (p, eps T) grid."""

import argparse

from foliated_averaging.bihari import SWEEP_HEADER, sweep, sweep_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=float, nargs="+", default=[2, 3, 4])
    ap.add_argument("--eps-T", type=float, nargs="+", default=[0.01, 0.05, 0.1])
    ap.add_argument("--m", type=int, default=1000, help="grid intervals on [0, T]")
    args = ap.parse_args()

    rows = sweep_rows(sweep(args.p, args.eps_T, m=args.m))
    print(" ".join(f"{h:>12}" for h in SWEEP_HEADER))
    for row in rows:
        print(" ".join(f"{v:>12.5g}" if isinstance(v, float) else f"{v!s:>12}" for v in row))


if __name__ == "__main__":
    main()
