"""Policy-gradient training for the attention model.

Locations are trained only by REINFORCE with a learned per-step baseline;
the classification head, core and glimpse network additionally receive the
cross-entropy gradient of the final prediction. Every gradient is that of a
loss to be minimised, averaged over the ``M`` episodes of a batch.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ConfigError, NonFiniteError, SGDMomentum, StateError, cross_entropy_loss
from .envs import CatchEnv, ClassificationEnv
from .model import EpisodeTrace, RamModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 20
    epochs: int = 30
    sigma: float | None = None
    seed: int = 0
    lr_decay: float = 1.0
    location_weight: float = 0.01
    baseline_weight: float = 1.0
    grad_clip: float | None = 5.0
    episodes_per_epoch: int = 10000

    def __post_init__(self):
        if not self.learning_rate >= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError(f"invalid training config {self}")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")


@dataclass
class SearchSpace:
    learning_rate: tuple = (1e-3, 1e-1)
    sigma: tuple = (0.03, 0.3)
    trials: int = 8

    def __post_init__(self):
        for name in ("learning_rate", "sigma"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"search range {name}={lo, hi} is empty or non-positive")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")

    def sample(self, rng):
        return {"learning_rate": _log_uniform(rng, *self.learning_rate),
                "sigma": _log_uniform(rng, *self.sigma)}


def _log_uniform(rng, lo, hi):
    u = rng.uniform(math.log(lo), math.log(hi))
    return lo if lo == hi else float(math.exp(u))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_error: float
    mean_reward: float
    mean_abs_advantage: float
    episodes: int = 0
    wall_seconds: float = field(default=0.0, compare=False)
    val_error: float = float("nan")


# ------------------------------------------------------- gradient terms --

def policy_mean_grads(scores, advantages):
    """Per-episode loss gradient w.r.t. a Gaussian mean, ``-score * (R - b) / M``.

    ``scores`` is ``d log pi / d mean`` with the episode axis first after any
    leading step axes; its negated sum over episodes is the REINFORCE ascent
    direction.
    """
    M = scores.shape[-2]
    return -(advantages[..., None] * scores) / M


def reinforce_head_grads(trace: EpisodeTrace, *, reinforce_actions=False, use_baseline=True):
    """Head gradients of ``-1/M sum_i sum_t log pi(u_t) (R_t - b_t)`` and of
    the baseline regression loss ``1/M sum (R_t - b_t)^2``.

    The last location sample is never sensed, so it carries no signal.
    """
    if trace.baselines is None:
        raise StateError("trace has no baseline predictions")
    T, M = trace.num_steps, trace.batch_size
    adv = trace.returns - trace.baselines if use_baseline else trace.returns.copy()
    d_means = policy_mean_grads(trace.loc_scores, adv)
    d_means[T - 1] = 0.0
    d_logits = [None] * T
    if reinforce_actions:
        for t in range(T):
            probs = trace.action_probs[t]
            onehot = np.zeros_like(probs)
            onehot[np.arange(M), trace.actions[t]] = 1.0
            d_logits[t] = -(onehot - probs) * adv[t][:, None] / M
    d_baselines = 2.0 * (trace.baselines - trace.returns) / M
    return d_means, d_logits, d_baselines


def hybrid_head_grads(trace: EpisodeTrace, labels):
    """Cross-entropy of the final class distribution; returns ``(loss, d_logits)``."""
    probs = trace.final_probs
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise ValueError(f"label out of range for {probs.shape[1]} classes")
    loss, dl = cross_entropy_loss(probs, labels)
    M = trace.batch_size
    d_logits = [None] * trace.num_steps
    d_logits[-1] = dl / M
    return loss / M, d_logits


def reinforce_gradients(model: RamModel, trace, *, reinforce_actions=False, use_baseline=True):
    d_means, d_logits, d_base = reinforce_head_grads(
        trace, reinforce_actions=reinforce_actions, use_baseline=use_baseline)
    model.backward(trace, d_means=d_means, d_logits=d_logits if reinforce_actions else None,
                   d_baselines=d_base)


def hybrid_loss_gradients(model: RamModel, trace, labels):
    loss, d_logits = hybrid_head_grads(trace, labels)
    model.backward(trace, d_logits=d_logits)
    return loss


def accumulate_gradients(model: RamModel, trace, labels=None, *, reinforce_actions=False,
                         location_weight=1.0, baseline_weight=1.0):
    """Both terms in a single backward pass. Returns the cross-entropy (or 0).

    ``location_weight`` scales the location-policy term only and
    ``baseline_weight`` the baseline regression only, which amounts to a
    separate learning rate for the baseline head. The task signal
    (cross-entropy, or REINFORCE on game actions) keeps unit weight.
    """
    d_means, d_logits, d_base = reinforce_head_grads(trace, reinforce_actions=reinforce_actions)
    if location_weight != 1.0:
        d_means *= location_weight
    if baseline_weight != 1.0:
        d_base *= baseline_weight
    loss = 0.0
    if labels is not None:
        loss, d_ce = hybrid_head_grads(trace, labels)
        d_logits = [a if b is None else (b if a is None else a + b) for a, b in zip(d_logits, d_ce)]
    model.backward(trace, d_means=d_means, d_logits=d_logits, d_baselines=d_base)
    return loss


def clip_gradients(blocks, max_norm):
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.square(b.grad, dtype=np.float64).sum()) for b in blocks))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for b in blocks:
            b.grad *= scale
    return total


def _check_finite(model, step_desc):
    for b in model.blocks():
        if not np.all(np.isfinite(b.value)):
            raise NonFiniteError(f"parameter {b.name!r} became non-finite at {step_desc}")


# ----------------------------------------------------------------- epochs --

def make_optimizer(model, cfg: TrainConfig):
    return SGDMomentum(model.blocks(), cfg.learning_rate, cfg.momentum)


def train_classification_epoch(model: RamModel, optimizer, batches, rng, epoch=0,
                               location_weight=1.0, baseline_weight=1.0, grad_clip=None):
    """One pass over ``batches`` of ``(images, labels, ids)``."""
    t0 = time.perf_counter()
    T = model.cfg.num_glimpses
    n = wrong = 0
    loss_sum = reward_sum = adv_sum = 0.0
    for step, (images, labels, ids) in enumerate(batches):
        env = ClassificationEnv(images, labels, T, model.cfg.num_action_outputs)
        trace = model.rollout(env, rng, episode_ids=ids)
        loss = accumulate_gradients(model, trace, labels, location_weight=location_weight,
                                    baseline_weight=baseline_weight)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at epoch {epoch} batch {step}")
        clip_gradients(optimizer.blocks, grad_clip)
        optimizer.step()
        _check_finite(model, f"epoch {epoch} batch {step}")
        B = len(labels)
        n += B
        loss_sum += loss * B
        reward = trace.rewards[-1]
        reward_sum += reward.sum()
        wrong += int(B - reward.sum())
        adv_sum += np.abs(trace.returns - trace.baselines).mean(axis=0).sum()
    return EpochMetrics(epoch, loss_sum / max(n, 1), wrong / max(n, 1), reward_sum / max(n, 1),
                        adv_sum / max(n, 1), n, time.perf_counter() - t0)


def train_catch_epoch(model: RamModel, optimizer, episodes, batch_size, rng, epoch=0,
                      location_weight=1.0, baseline_weight=1.0, grad_clip=None):
    t0 = time.perf_counter()
    n = 0
    reward_sum = adv_sum = 0.0
    step = 0
    while n < episodes:
        B = min(batch_size, episodes - n)
        env = CatchEnv(B, rng)
        trace = model.rollout(env, rng)
        accumulate_gradients(model, trace, reinforce_actions=True, location_weight=location_weight,
                             baseline_weight=baseline_weight)
        clip_gradients(optimizer.blocks, grad_clip)
        optimizer.step()
        _check_finite(model, f"epoch {epoch} batch {step}")
        n += B
        step += 1
        reward_sum += trace.rewards.sum()
        adv_sum += np.abs(trace.returns - trace.baselines).mean(axis=0).sum()
    rate = reward_sum / n
    return EpochMetrics(epoch, 0.0, 1.0 - rate, rate, adv_sum / n, n, time.perf_counter() - t0)


def train_epoch(model, source, cfg: TrainConfig, optimizer, rng, epoch=0):
    """Dispatch on the source: a ``TaskStream`` for images or ``"catch"``."""
    kw = dict(location_weight=cfg.location_weight, baseline_weight=cfg.baseline_weight,
              grad_clip=cfg.grad_clip)
    if source == "catch":
        return train_catch_epoch(model, optimizer, cfg.episodes_per_epoch, cfg.batch_size, rng, epoch, **kw)
    return train_classification_epoch(
        model, optimizer, source.batches(epoch, cfg.batch_size), rng, epoch, **kw)


# ------------------------------------------------------------ search ----

class SearchError(RuntimeError):
    def __init__(self, message, trials):
        super().__init__(message)
        self.trials = trials


def random_search(space: SearchSpace, objective, seed=0, workers=1):
    """Sample ``space.trials`` configurations and keep the lowest objective.

    ``objective(params, trial_seed)`` returns a validation error; a trial that
    raises :class:`NonFiniteError` is logged as diverged. Returns
    ``(best_params, trial_rows)``.
    """
    rng = np.random.default_rng(seed)
    params = [space.sample(rng) for _ in range(space.trials)]
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=space.trials)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_safe_objective, [objective] * len(params), params, seeds))
    else:
        results = [_safe_objective(objective, p, s) for p, s in zip(params, seeds)]
    rows = []
    for i, (p, s, (value, status)) in enumerate(zip(params, seeds, results)):
        rows.append({"trial": i, "seed": s, **p, "val_error": value, "status": status})
        log.info("trial %d %s -> %s (%s)", i, p, value, status)
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise SearchError("all search trials diverged", rows)
    best = min(ok, key=lambda r: (r["val_error"], r["trial"]))
    return {k: best[k] for k in params[0]}, rows


def _safe_objective(objective, params, seed):
    try:
        value = float(objective(params, seed))
    except NonFiniteError:
        return float("nan"), "diverged"
    if not math.isfinite(value):
        return float("nan"), "diverged"
    return value, "ok"
