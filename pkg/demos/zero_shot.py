"""Train on the default crossing flavour, then drop the policy into the others.

A short desk-profile run (30k frames by default) is enough for the agent to
start crossing m0d0.  The same network is then evaluated, unchanged, on
every flavour of the game, and a fine-tune on m1d1 shows how quickly the
transferred weights adapt.

    python3 demos/zero_shot.py [frames] [seed]
"""

import sys

from flavorbench.env_suite import enumerate_flavours
from flavorbench.harness.config import default_config
from flavorbench.protocol import evaluate_policy
from flavorbench.transfer import Checkpoint, TransferScheme, finetune
from flavorbench.dqn_agent import train


def main(frames=30_000, seed=0):
    config = default_config("desk")
    agent = config.agent_with(False)
    settings = config.eval_settings()

    def score(params, arch, flavour):
        return evaluate_policy(params, arch, flavour, 10, settings.epsilon, seed, settings).mean

    print(f"training on mini_crossing:m0d0 for {frames} frames (seed {seed})")
    result = train(agent, "mini_crossing:m0d0", frames, seed, frames // 3)
    for row in result.log:
        print(f"  frame {row.frame:6d}  eps {row.epsilon:.2f}  episodes {row.episodes_completed:2d}  "
              f"mean return {row.episode_return_mean:.1f}")

    print("\nzero-shot returns, 10 episodes each")
    for f in enumerate_flavours("mini_crossing"):
        print(f"  {f.tag}  {score(result.params, result.arch, f):5.1f}")

    budget = frames // 3
    print(f"\nfine-tuning the whole network on m1d1 for {budget} frames")
    tuned, _ = finetune(Checkpoint(result.params, {}, result.arch), TransferScheme.FULL,
                        "mini_crossing:m1d1", agent, budget, seed, budget, regularize=False)
    print(f"  m1d1 before {score(result.params, result.arch, 'mini_crossing:m1d1'):5.1f}"
          f"  after {score(tuned.params, tuned.arch, 'mini_crossing:m1d1'):5.1f}")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:]]
    main(*args)
