"""A walk through the mini-game flavours.

Prints the first frame of every flavour as text, then for each mini_crossing
flavour the exact optimal return (backward induction on the exported MDP)
next to the best a single repeated action can do.

    python3 demos/flavour_tour.py [seed]
"""

import sys

import numpy as np

from flavorbench.env_suite import (GAMES, best_action_baseline, enumerate_flavours, export_tabular_mdp,
                                   make_env, optimal_return_oracle, wrap_protocol)

GLYPHS = "A#*"  # agent / object / third channel (shields or nothing)


def show(obs):
    rows = []
    for r in range(obs.shape[1]):
        line = ""
        for c in range(obs.shape[2]):
            hits = [GLYPHS[k] for k in range(obs.shape[0]) if obs[k, r, c]]
            line += hits[0] if hits else "."
        rows.append(line)
    return rows


def main(seed=0):
    for game in GAMES:
        flavours = enumerate_flavours(game)
        frames = [show(make_env(f, seed).reset()) for f in flavours]
        print(f"\n{game}")
        print("   ".join(f"{f.tag:<{len(frames[0][0])}}" for f in flavours))
        for lines in zip(*frames):
            print("   ".join(lines))

    print("\nmini_crossing, sticky actions 0.25, 500 frames")
    print(f"{'flavour':8s} {'optimal':>8s} {'best constant':>14s}")
    for f in enumerate_flavours("mini_crossing"):
        env = make_env(f, seed)
        opt = optimal_return_oracle(export_tabular_mdp(env, 0.25), env.spec.frame_limit)
        best, action, _ = best_action_baseline(wrap_protocol(env, 1, 0.25, np.random.default_rng(seed)), 10)
        print(f"{f.tag:8s} {opt:8.2f} {best:10.1f} (a={action})")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
