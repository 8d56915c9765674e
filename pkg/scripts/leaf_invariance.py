"""Unperturbed runs stay on their leaf: report sup |pi(X_t) - pi(x0)| per built-in system."""

import argparse

import numpy as np

from foliated_averaging.foliation import BUILTIN_SYSTEMS, builtin_system
from foliated_averaging.levy import sample_levy_path
from foliated_averaging.marcus import PathRecorder, pad_events, run_batch
from foliated_averaging.rng import RandomStreams


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=200)
    ap.add_argument("--horizon", type=float, default=10.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    streams = RandomStreams(args.seed)
    for name in BUILTIN_SYSTEMS:
        system = builtin_system(name)
        paths = [sample_levy_path(system.nu, args.horizon, streams.generator(i, "leaf")) for i in range(args.paths)]
        times, jumps = pad_events(paths, system.nu.dim)
        x0 = np.tile(system.initial_point, (args.paths, 1))
        rec = PathRecorder()
        run = run_batch(system.leaf_drift, system.leaf_jump, x0, times, jumps, args.horizon, 1e-2, observers=[rec])
        v0 = system.chart.project(system.initial_point)
        worst = max(float(np.max(np.abs(system.chart.project(p.states) - v0))) for p in rec.paths(run))
        print(f"{name:<22} sup |pi(X_t) - pi(x0)| = {worst!r}")


if __name__ == "__main__":
    main()
