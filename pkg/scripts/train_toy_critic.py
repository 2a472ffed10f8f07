#!/usr/bin/env python3
"""Train a critic on random-policy episodes of the toy intersection and evaluate its argmax policy."""

import argparse
from pathlib import Path

from tsclab.agents import critic_controller, random_controller
from tsclab.critic import TrainCfg, train, transitions_from_log
from tsclab.metrics import compute_att
from tsclab.scenarios import toy_intersection
from tsclab.simcore import SimConfig, run_episode


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--collect-seeds", type=int, nargs="+", default=[100, 101, 102, 103, 104])
    ap.add_argument("--eval-seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--gamma", type=float, default=0.8)
    ap.add_argument("--out", type=Path, default=None, help="directory for critic.json and loss_curve.csv")
    args = ap.parse_args()

    transitions = []
    for seed in args.collect_seeds:
        network, flow = toy_intersection(seed)
        episode = run_episode(network, flow, random_controller(seed), SimConfig(seed=seed))
        transitions += transitions_from_log(episode)
    result = train(transitions, TrainCfg(steps=args.steps, gamma=args.gamma, seed=0))
    print(f"{len(transitions)} transitions, final TD loss {result.losses[-1]:.3f}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        result.params.save(args.out / "critic.json")
        result.save_loss_curve(args.out / "loss_curve.csv")

    for seed in args.eval_seeds:
        network, flow = toy_intersection(seed)
        critic = compute_att(run_episode(network, flow, critic_controller(result.params), SimConfig(seed=seed)))
        rnd = compute_att(run_episode(network, flow, random_controller(seed), SimConfig(seed=seed)))
        print(f"seed {seed}: critic ATT {critic:7.2f}  random ATT {rnd:7.2f}  ({1 - critic / rnd:+.0%})")


if __name__ == "__main__":
    main()
