#!/usr/bin/env python3
"""Compare maxpressure, fixed-time and random control on the 3x4 arterial grid."""

import argparse

from tsclab.agents import fixed_time_controller, maxpressure_controller, random_controller
from tsclab.metrics import MetricsReport, format_comparison
from tsclab.scenarios import ordering_grid
from tsclab.simcore import SimConfig, run_episode


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--duration", type=int, default=3600)
    args = ap.parse_args()
    for seed in args.seeds:
        network, flow = ordering_grid(seed, args.duration)
        cfg = SimConfig(episode_length=args.duration, seed=seed)
        reports = {
            name: MetricsReport.from_log(run_episode(network, flow, ctrl, cfg), name)
            for name, ctrl in (
                ("maxpressure", maxpressure_controller()),
                ("fixedtime", fixed_time_controller()),
                ("random", random_controller(seed)),
            )
        }
        print(f"seed {seed}: {len(flow)} vehicles")
        print(format_comparison(reports))
        print()


if __name__ == "__main__":
    main()
