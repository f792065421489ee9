"""RAM against the fully connected and convolutional baselines on a generated task."""

import argparse
import logging

from ram.datasets import TASKS, load_mnist
from ram.experiments import fixed_test_set, ordering_runs
from ram.glimpse import RetinaConfig
from ram.learning import TrainConfig
from ram.model import RamConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--task", default="translated60", choices=sorted(TASKS))
    p.add_argument("--models", nargs="+", default=["fc2-64", "fc2-256", "conv2"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--epoch-size", type=int, default=100_000)
    p.add_argument("--data-dir")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO)
    task = TASKS[a.task]
    train, test = load_mnist(a.data_dir, "train"), load_mnist(a.data_dir, "test")
    ram_cfg = RamConfig(retina=RetinaConfig(12, 3), num_glimpses=6, dtype="float32")
    rows = ordering_runs(task, train, fixed_test_set(task, test), ram_cfg, a.models, a.seeds,
                         TrainConfig(epochs=a.epochs, lr_decay=0.9),
                         TrainConfig(epochs=a.epochs),
                         a.epoch_size)
    for row in rows:
        for name, rep in row.items():
            if name != "seed":
                print(f"seed {row['seed']} {rep.text()}")


if __name__ == "__main__":
    main()
