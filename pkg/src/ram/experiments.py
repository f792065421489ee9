"""Training drivers shared by the CLI, the scripts and the acceptance suite.

Every driver is a pure function of its configs and seed: model
initialisation, example placement, fixation noise and minibatch order are
all derived from ``seed``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import TASKS, ImageSet, TaskSpec, TaskStream, generate_fixed_set
from .diffcore import SGDMomentum
from .evalviz import baseline_models, baseline_train_step, evaluate_error
from .learning import EpochMetrics, TrainConfig, clip_gradients, make_optimizer, train_epoch
from .glimpse import RetinaConfig
from .model import RamConfig, RamModel

log = logging.getLogger(__name__)


def stream_rng(seed, purpose):
    """Independent generator per (seed, purpose) so drivers never share streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose]))


ROLLOUT, ORDER, EVAL = 1, 2, 3


@dataclass
class RunResult:
    model: object
    metrics: list = field(default_factory=list)
    test_error: float | None = None


def _decay(optimizer, cfg: TrainConfig):
    optimizer.learning_rate *= cfg.lr_decay


def train_ram(task: TaskSpec, base: ImageSet, ram_cfg: RamConfig, train_cfg: TrainConfig,
              epoch_size=None, on_epoch=None) -> RunResult:
    """Hybrid-loss training of a RAM classifier on a generated task stream."""
    if train_cfg.sigma is not None:
        ram_cfg = replace(ram_cfg, location_sigma=train_cfg.sigma)
    model = RamModel(ram_cfg, seed=train_cfg.seed)
    opt = make_optimizer(model, train_cfg)
    rng = stream_rng(train_cfg.seed, ROLLOUT)
    stream = TaskStream(replace(task, seed=train_cfg.seed), base, epoch_size, seed=train_cfg.seed)
    metrics = []
    for epoch in range(train_cfg.epochs):
        m = train_epoch(model, stream, train_cfg, opt, rng, epoch)
        metrics.append(m)
        log.info("epoch %d loss %.4f train error %.4f", epoch, m.loss, m.train_error)
        if on_epoch is not None:
            on_epoch(model, m)
        _decay(opt, train_cfg)
    return RunResult(model, metrics)


def train_catch(ram_cfg: RamConfig, train_cfg: TrainConfig, frames, on_epoch=None) -> RunResult:
    """REINFORCE on Catch for ``frames`` game frames (23 per episode)."""
    if train_cfg.sigma is not None:
        ram_cfg = replace(ram_cfg, location_sigma=train_cfg.sigma)
    model = RamModel(ram_cfg, seed=train_cfg.seed)
    opt = make_optimizer(model, train_cfg)
    rng = stream_rng(train_cfg.seed, ROLLOUT)
    episodes = -(-int(frames) // ram_cfg.num_glimpses)
    per_epoch = min(train_cfg.episodes_per_epoch, episodes)
    metrics = []
    epoch = 0
    while episodes > 0:
        n = min(per_epoch, episodes)
        m = train_epoch(model, "catch", replace(train_cfg, episodes_per_epoch=n), opt, rng, epoch)
        metrics.append(m)
        log.info("catch epoch %d catch rate %.4f", epoch, m.mean_reward)
        if on_epoch is not None:
            on_epoch(model, m)
        _decay(opt, train_cfg)
        episodes -= n
        epoch += 1
    return RunResult(model, metrics)


def train_baseline(kind, task: TaskSpec, base: ImageSet, train_cfg: TrainConfig, epoch_size=None,
                   dtype="float32", on_epoch=None) -> RunResult:
    """Cross-entropy training of an fc2 / conv2 comparison network on the same stream."""
    model = baseline_models(kind, task.canvas, seed=train_cfg.seed, dtype=dtype)
    opt = SGDMomentum(model.blocks(), train_cfg.learning_rate, train_cfg.momentum)
    stream = TaskStream(replace(task, seed=train_cfg.seed), base, epoch_size, seed=train_cfg.seed)
    metrics = []
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        n = 0
        loss_sum = 0.0
        for images, labels, _ in stream.batches(epoch, train_cfg.batch_size):
            loss = baseline_train_step(model, images, labels)
            clip_gradients(model.blocks(), train_cfg.grad_clip)
            opt.step()
            n += len(labels)
            loss_sum += loss * len(labels)
        m = EpochMetrics(epoch, loss_sum / n, float("nan"), 0.0, 0.0, n, time.perf_counter() - t0)
        metrics.append(m)
        log.info("%s epoch %d loss %.4f", model.name, epoch, loss_sum / n)
        if on_epoch is not None:
            on_epoch(model, m)
        _decay(opt, train_cfg)
    return RunResult(model, metrics)


def fixed_test_set(task: TaskSpec, test_base: ImageSet, limit=None):
    base = test_base if limit is None else test_base.subset(slice(0, limit))
    return generate_fixed_set(task, base)


def evaluate(result: RunResult, task: TaskSpec, test: ImageSet, name, seed=0):
    rep = evaluate_error(result.model, test.images, test.labels, task=task.name, name=name,
                         seed=int(stream_rng(seed, EVAL).integers(2**31)))
    result.test_error = rep.error_rate
    return rep


# ----------------------------------------------------------- protocols --
#
# Fixed recipes shared by scripts/ and the acceptance tests. Each returns
# plain data so callers can print, tabulate or assert on it.

def centered_ram(num_glimpses=6, patch_width=8, num_scales=1, dtype="float32", core_kind="rnn"):
    return RamConfig(retina=RetinaConfig(patch_width, num_scales), num_glimpses=num_glimpses,
                     core_kind=core_kind, dtype=dtype)


def ram_error(task, train, test, ram_cfg, train_cfg, epoch_size=None):
    result = train_ram(task, train, ram_cfg, train_cfg, epoch_size)
    return evaluate(result, task, test, f"ram-{ram_cfg.num_glimpses}", seed=train_cfg.seed)


def baseline_error(kind, task, train, test, train_cfg, epoch_size=None):
    result = train_baseline(kind, task, train, train_cfg, epoch_size)
    return evaluate(result, task, test, kind, seed=train_cfg.seed)


def glimpse_sweep(train, test, glimpse_counts, seeds, train_cfg, task=None):
    """Test error per (glimpse count, seed) under one shared budget."""
    task = task or TASKS["mnist28"]
    out = {}
    for T in glimpse_counts:
        for seed in seeds:
            rep = ram_error(task, train, test, centered_ram(T), replace(train_cfg, seed=seed))
            out[T, seed] = rep
            log.info("%s", rep.text())
    return out


def ordering_runs(task, train, test, ram_cfg, models, seeds, ram_train, baseline_train, epoch_size):
    """RAM versus comparison networks on one generated task; reports per seed."""
    rows = []
    for seed in seeds:
        row = {"seed": seed, "ram": ram_error(task, train, test, ram_cfg, replace(ram_train, seed=seed),
                                             epoch_size)}
        for kind in models:
            row[kind] = baseline_error(kind, task, train, test, replace(baseline_train, seed=seed),
                                       epoch_size)
        log.info("seed %d: %s", seed, {k: v.error_rate for k, v in row.items() if k != "seed"})
        rows.append(row)
    return rows


def catch_ram(dtype="float32"):
    return RamConfig(retina=RetinaConfig(6, 3), core_kind="lstm", num_glimpses=23,
                     num_action_outputs=3, dtype=dtype)
