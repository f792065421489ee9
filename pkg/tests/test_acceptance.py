"""Acceptance gate: one test per criterion, each at its stated tolerance.

The training criteria (4, 5, 6, 7, 9b) are full runs and take hours on one
CPU; they carry the ``slow`` marker so ``pytest -m "not slow"`` skips them.
A pass/fail line per criterion is printed in the terminal summary.
"""

import math
import statistics

import numpy as np
import pytest

from oracles import (
    BANDIT_MEAN,
    BANDIT_SIGMA,
    bandit_exact_gradient,
    bandit_terms,
    brute_force_glimpse,
    fit_bandit_baseline,
    numeric_gradient,
    relative_error,
    unrolled_model_errors,
    variance_with_se,
)
from ram.cli import main as cli_main
from ram.datasets import TASKS, load_mnist, train_validation_split
from ram.diffcore import LSTMCell, LstmState, Linear, cross_entropy_loss, gaussian_logprob, rect_forward, softmax
from ram.envs import ClassificationEnv, catch_reset, catch_step, greedy_tracker
from ram.evalviz import (
    Conv2,
    FC2,
    baseline_models,
    eval_catch_rate,
    random_policy,
    reconstruct_glimpse,
    render_glimpse_path,
    wilson_interval,
)
from ram.experiments import (
    baseline_error,
    catch_ram,
    centered_ram,
    fixed_test_set,
    glimpse_sweep,
    ordering_runs,
    train_catch,
    train_ram,
    evaluate,
)
from ram.glimpse import RetinaConfig, build_glimpse
from ram.learning import TrainConfig
from ram.model import RamConfig, RamModel

SEEDS = (0, 1, 2)

# Shared recipes. The RAM recipe is the one used for every classification run.
RAM_TRAIN = TrainConfig(learning_rate=0.01, batch_size=20, epochs=30, lr_decay=0.9,
                        location_weight=0.01, grad_clip=5.0)
BASELINE_TRAIN = TrainConfig(learning_rate=0.01, batch_size=20, epochs=10, grad_clip=5.0)
SWEEP_EPOCHS = 6
ORDERING_EPOCHS = 10
ORDERING_EPOCH_SIZE = 100_000
CATCH_FRAMES = 500_000
CATCH_TRAIN = TrainConfig(learning_rate=0.02, batch_size=10, location_weight=0.01, baseline_weight=0.05,
                          grad_clip=5.0, episodes_per_epoch=1000)
CATCH_EVAL_EPISODES = 10_000


@pytest.fixture(scope="module")
def mnist():
    # data is a hard requirement of the gate, so a missing copy fails rather than skips
    train, _ = train_validation_split(load_mnist(None, "train"))
    return train, load_mnist(None, "test")


# ------------------------------------------------------------------ 1 --

def _op_instances(gen):
    """Yield (name, analytic, numeric) triples for randomly sized primitives."""
    kind = gen.integers(0, 6)
    if kind == 0:
        n_in, n_out, b = gen.integers(1, 6, 3)
        layer = Linear("fc", n_in, n_out, gen)
        x = gen.standard_normal((b, n_in))
        w = gen.standard_normal((b, n_out))
        f = lambda: float((rect_forward(layer.forward(x)[0])[0] * w).sum())
        y, c = layer.forward(x)
        _, mask = rect_forward(y)
        dx = layer.backward(w * mask, c)
        yield "affine+rect", dx, numeric_gradient(f, x)
        yield "affine+rect W", layer.W.grad, numeric_gradient(f, layer.W.value)
    elif kind == 1:
        k, b = gen.integers(2, 7), gen.integers(1, 5)
        z = gen.standard_normal((b, k)) * 3
        t = gen.integers(0, k, b)
        f = lambda: cross_entropy_loss(softmax(z), t)[0]
        yield "softmax+cross-entropy", cross_entropy_loss(softmax(z), t)[1], numeric_gradient(f, z)
    elif kind == 2:
        n_in, hid, b = gen.integers(1, 5, 3)
        cell = LSTMCell("lstm", n_in, hid, gen)
        x, h, c = gen.standard_normal((b, n_in)), gen.standard_normal((b, hid)), gen.standard_normal((b, hid))
        wh, wc = gen.standard_normal((b, hid)), gen.standard_normal((b, hid))
        f = lambda: float((lambda s: (s.hidden * wh).sum() + (s.cell * wc).sum())(cell.step(x, LstmState(h, c))[0]))
        _, cache = cell.step(x, LstmState(h, c))
        dx, dh, dc = cell.backward_step(wh, wc, cache)
        yield "lstm dx", dx, numeric_gradient(f, x)
        yield "lstm dh", dh, numeric_gradient(f, h)
        yield "lstm dc", dc, numeric_gradient(f, c)
        yield "lstm Wh", cell.Wh.grad, numeric_gradient(f, cell.Wh.value)
    elif kind == 3:
        b = gen.integers(1, 5)
        sigma = float(gen.uniform(0.05, 1.0))
        mean = gen.standard_normal((b, 2))
        sample = mean + sigma * gen.standard_normal((b, 2))
        f = lambda: float(gaussian_logprob(sample, mean, sigma)[0].sum())
        yield "gaussian score", gaussian_logprob(sample, mean, sigma)[1], numeric_gradient(f, mean)
    else:
        model = FC2(9, 4, n_out=3, seed=int(gen.integers(1000))) if kind == 4 else \
            Conv2(9, filters=2, kernel=3, stride=2, hidden=4, n_out=3, seed=int(gen.integers(1000)))
        x = gen.random((2, 3, 3)) if kind == 4 else gen.random((2, 9, 9))
        t = gen.integers(0, 3, 2)
        f = lambda: cross_entropy_loss(model.forward(x)[0], t)[0]
        probs, cache = model.forward(x)
        model.backward(cross_entropy_loss(probs, t)[1], cache)
        for blk in model.blocks():
            yield f"{model.name} {blk.name}", blk.grad, numeric_gradient(f, blk.value)


def test_criterion_01_gradient_integrity():
    gen = np.random.default_rng(2024)
    worst = 0.0
    instances = 0
    for _ in range(40):
        for name, a, n in _op_instances(gen):
            err = relative_error(a, n)
            assert err < 1e-4, (name, err)
            worst = max(worst, err)
        instances += 1
    for seed in range(10):
        for kind in ("rnn", "lstm"):
            errors = unrolled_model_errors(kind, seed=seed, steps=3)
            assert max(errors.values()) < 1e-4, (kind, seed, errors)
            worst = max(worst, max(errors.values()))
            instances += 1
    assert instances >= 50
    print(f"{instances} instances, worst relative error {worst:.2e}")


# ------------------------------------------------------------------ 2 --

def test_criterion_02_sensor_oracle():
    gen = np.random.default_rng(7)
    straddling = 0
    for _ in range(1000):
        h, w = gen.integers(8, 64, 2)
        cfg = RetinaConfig(int(gen.integers(2, 13)), int(gen.integers(1, 4)))
        image = gen.random((h, w))
        loc = gen.uniform(-1, 1, 2) if gen.random() < 0.5 else gen.choice([-1, 1], 2) * gen.uniform(0.8, 1.1, 2)
        cx, cy = (np.clip(loc, -1, 1) + 1) / 2 * (np.array([w, h]) - 1)
        half = cfg.max_width / 2
        straddling += cx - half < 0 or cy - half < 0 or cx + half > w or cy + half > h
        assert np.array_equal(build_glimpse(image, loc, cfg),
                              brute_force_glimpse(image, loc, cfg.patch_width, cfg.num_scales))
    assert straddling >= 300
    print(f"1000 triples bit-equal, {straddling} straddling the border")


# ------------------------------------------------------------------ 3 --

def test_criterion_03_reinforce_estimator():
    n = 100_000
    exact = bandit_exact_gradient(BANDIT_MEAN, BANDIT_SIGMA)
    plain = bandit_terms(n, seed=11)
    est = plain.mean(axis=0)
    se = plain.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(est - exact) <= 3 * se), (est, exact, se)

    b = fit_bandit_baseline(seed=12)
    with_base = bandit_terms(n, seed=13, baseline=b)
    est_b = with_base.mean(axis=0)
    se_b = with_base.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(est_b - exact) <= 3 * se_b)

    v0, s0 = variance_with_se(plain)
    v1, s1 = variance_with_se(with_base)
    z = (v0 - v1) / np.sqrt(s0**2 + s1**2)
    z99 = statistics.NormalDist().inv_cdf(0.99)
    assert np.all(z > z99), z
    print(f"exact {exact}, estimate {est} (se {se}); variance {v0} -> {v1}, z {z}")


# ------------------------------------------------------------------ 4 --

@pytest.mark.slow
def test_criterion_04_centered_mnist(mnist):
    train, test = mnist
    task = TASKS["mnist28"]
    result = train_ram(task, train, centered_ram(6), RAM_TRAIN)
    rep = evaluate(result, task, test, "ram-6", seed=RAM_TRAIN.seed)
    print(rep.text())
    assert rep.error_rate <= 0.05


# ------------------------------------------------------------------ 5 --

@pytest.mark.slow
def test_criterion_05_glimpse_count_trend(mnist):
    train, test = mnist
    cfg = TrainConfig(**{**RAM_TRAIN.__dict__, "epochs": SWEEP_EPOCHS})
    reports = glimpse_sweep(train, test, (1, 2, 4, 6), SEEDS, cfg)
    mean = {T: float(np.mean([reports[T, s].error_rate for s in SEEDS])) for T in (1, 2, 4, 6)}
    print("mean test error by glimpse count:", {T: f"{100 * e:.2f}%" for T, e in mean.items()})
    assert mean[1] >= mean[2] >= mean[4]
    assert mean[6] < mean[2]


# --------------------------------------------------------------- 6, 7 --

def _ordering(mnist, task_name, models):
    train, test = mnist
    task = TASKS[task_name]
    ram_cfg = RamConfig(retina=RetinaConfig(12, 3), num_glimpses=6, dtype="float32")
    ram_train = TrainConfig(**{**RAM_TRAIN.__dict__, "epochs": ORDERING_EPOCHS})
    base_train = TrainConfig(**{**BASELINE_TRAIN.__dict__, "epochs": ORDERING_EPOCHS})
    rows = ordering_runs(task, train, fixed_test_set(task, test), ram_cfg, models, SEEDS, ram_train,
                         base_train, ORDERING_EPOCH_SIZE)
    for row in rows:
        print(f"seed {row['seed']}: " + "; ".join(
            f"{k} {100 * r.error_rate:.2f}% [{100 * r.ci_low:.2f}, {100 * r.ci_high:.2f}]"
            for k, r in row.items() if k != "seed"))
    return rows


@pytest.mark.slow
def test_criterion_06_translated_ordering(mnist):
    rows = _ordering(mnist, "translated60", ["fc2-64"])
    wins = sum(r["ram"].error_rate < r["fc2-64"].error_rate for r in rows)
    assert wins == 3


@pytest.mark.slow
def test_criterion_07_cluttered_ordering(mnist):
    rows = _ordering(mnist, "cluttered60", ["fc2-64", "fc2-256", "conv2"])
    wins = sum(all(r["ram"].error_rate < r[k].error_rate for k in ("fc2-64", "fc2-256", "conv2"))
               for r in rows)
    assert wins >= 2


# ------------------------------------------------------------------ 8 --

def test_criterion_08_bandwidth_limit():
    retina = RetinaConfig(12, 3)
    ram60 = RamModel(RamConfig(retina=retina), seed=0)
    ram100 = RamModel(RamConfig(retina=retina), seed=0)
    gen = np.random.default_rng(0)
    # the same model senses both canvas sizes
    for side in (60, 100):
        tr = ram60.rollout(ClassificationEnv(gen.random((2, side, side)), [0, 1], 2), gen)
        assert tr.glimpses.shape[-1] == retina.size
    assert ram60.num_parameters() == ram100.num_parameters()
    assert ram60.multiplies_per_glimpse() == ram100.multiplies_per_glimpse()
    c60, c100 = baseline_models("conv2", 60), baseline_models("conv2", 100)
    assert c100.fc_fan_in > c60.fc_fan_in
    print(f"ram params {ram60.num_parameters()}, multiplies/glimpse {ram60.multiplies_per_glimpse()}; "
          f"conv2 fc fan-in {c60.fc_fan_in} -> {c100.fc_fan_in}")


# ------------------------------------------------------------------ 9 --

def test_criterion_09a_tracker_solves_catch():
    rep = eval_catch_rate(greedy_tracker, 10_000, np.random.default_rng(99))
    print(f"tracker catch rate {1 - rep.error_rate}")
    assert rep.error_rate == 0.0


@pytest.mark.slow
def test_criterion_09b_catch_learning():
    result = train_catch(catch_ram(), CATCH_TRAIN, CATCH_FRAMES)
    gen = np.random.default_rng(12345)
    ram = eval_catch_rate(result.model, CATCH_EVAL_EPISODES, gen)
    rand = eval_catch_rate(random_policy(gen), CATCH_EVAL_EPISODES, gen, name="random")
    rate, rand_rate = 1 - ram.error_rate, 1 - rand.error_rate
    lo = 1 - ram.ci_high
    print(f"ram catch rate {rate:.4f} (95% lower bound {lo:.4f}); random {rand_rate:.4f}")
    assert rate >= 3 * rand_rate
    assert lo > rand_rate


# ----------------------------------------------------------------- 10 --

def test_criterion_10_rendering(tmp_path):
    gen = np.random.default_rng(5)
    cfg = RamConfig(retina=RetinaConfig(6, 3), glimpse_feature_dim=16, glimpse_output_dim=16,
                    core_dim=16, num_glimpses=5, location_sigma=0.4)
    model = RamModel(cfg, seed=3)
    images = gen.random((6, 40, 40))
    trace = model.rollout(ClassificationEnv(images, gen.integers(0, 10, 6), 5), gen)
    trace.dump(tmp_path / "trace.jsonl")
    for i in range(6):
        fig = render_glimpse_path(trace, i, images[i], cfg.retina)
        assert len(fig.panels) == 1 + trace.num_steps
        for t in range(trace.num_steps):
            rho = brute_force_glimpse(images[i], trace.sense_locs[t, i], 6, 3)
            upscaled = reconstruct_glimpse(rho, trace.sense_locs[t, i], (40, 40), cfg.retina)
            assert np.array_equal(fig.panels[t + 1], upscaled)


# ----------------------------------------------------------------- 11 --

def test_criterion_11_reproducibility(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[task]\nname = cluttered60\ntrain_limit = 400\ntest_limit = 100\nepoch_size = 400\n"
                   "[model]\npatch_width = 12\nnum_scales = 3\ncore_dim = 32\n"
                   "[train]\nepochs = 2\n"
                   f"[paths]\nout_dir = {tmp_path / 'a'}\n")
    assert cli_main(["train", "--config", str(ini), "--workers", "1", "--seed", "3"]) == 0
    manifest = tmp_path / "a" / "manifest.ini"
    assert cli_main(["train", "--config", str(manifest), "--workers", "1", "--out", str(tmp_path / "b")]) == 0
    for name in ("model.ramckpt", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
