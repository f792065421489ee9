"""Train RAM on centred 28x28 MNIST and report test error with a 95% interval."""

import argparse
import logging

from ram.datasets import TASKS, load_mnist
from ram.experiments import centered_ram, ram_error
from ram.learning import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--glimpses", type=int, default=6)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-dir")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO)
    train, test = load_mnist(a.data_dir, "train"), load_mnist(a.data_dir, "test")
    cfg = TrainConfig(epochs=a.epochs, lr_decay=0.9, seed=a.seed)
    print(ram_error(TASKS["mnist28"], train, test, centered_ram(a.glimpses), cfg).text())


if __name__ == "__main__":
    main()
