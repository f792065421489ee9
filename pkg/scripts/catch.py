"""Train RAM to play Catch, then compare its catch rate with a random policy."""

import argparse
import logging

import numpy as np

from ram.evalviz import eval_catch_rate, random_policy
from ram.experiments import catch_ram, train_catch
from ram.learning import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--frames", type=int, default=500_000)
    p.add_argument("--learning-rate", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--episodes", type=int, default=10_000, help="evaluation episodes")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO)
    cfg = TrainConfig(learning_rate=a.learning_rate, batch_size=a.batch_size, location_weight=0.01,
                      baseline_weight=0.05, episodes_per_epoch=1000, seed=a.seed)
    result = train_catch(catch_ram(), cfg, a.frames)
    gen = np.random.default_rng(a.seed + 1)
    for rep in (eval_catch_rate(result.model, a.episodes, gen),
                eval_catch_rate(random_policy(gen), a.episodes, gen, name="random")):
        print(f"{rep.model}: catch rate {1 - rep.error_rate:.4f} "
              f"[{1 - rep.ci_high:.4f}, {1 - rep.ci_low:.4f}]")


if __name__ == "__main__":
    main()
