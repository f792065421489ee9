"""Test error of RAM on centred MNIST as a function of the glimpse count."""

import argparse
import logging

import numpy as np

from ram.datasets import load_mnist
from ram.experiments import glimpse_sweep
from ram.learning import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--glimpses", type=int, nargs="+", default=[1, 2, 4, 6])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--data-dir")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO)
    train, test = load_mnist(a.data_dir, "train"), load_mnist(a.data_dir, "test")
    reports = glimpse_sweep(train, test, a.glimpses, a.seeds, TrainConfig(epochs=a.epochs, lr_decay=0.9))
    for T in a.glimpses:
        errs = [reports[T, s].error_rate for s in a.seeds]
        print(f"{T} glimpses: mean {100 * np.mean(errs):.2f}%  per seed "
              + " ".join(f"{100 * e:.2f}%" for e in errs))


if __name__ == "__main__":
    main()
