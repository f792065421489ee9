import math

import numpy as np
import pytest

from oracles import (
    BANDIT_MEAN,
    BANDIT_SIGMA,
    bandit_exact_gradient,
    bandit_terms,
    fit_bandit_baseline,
    gauss_hermite_expectation,
)
from ram.diffcore import ConfigError, NonFiniteError, ParamBlock
from ram.envs import ClassificationEnv
from ram.glimpse import RetinaConfig
from ram.learning import (
    SearchError,
    SearchSpace,
    TrainConfig,
    accumulate_gradients,
    clip_gradients,
    hybrid_head_grads,
    make_optimizer,
    random_search,
    train_classification_epoch,
)
from ram.model import RamConfig, RamModel


def test_quadrature_oracle_on_known_moments():
    m, s = np.array([0.3, -1.0]), 0.5
    assert gauss_hermite_expectation(lambda a, b: a * a, m, s) == pytest.approx(0.09 + 0.25, rel=1e-12)
    assert gauss_hermite_expectation(lambda a, b: np.exp(b), m, s) == pytest.approx(math.exp(-1 + 0.125), rel=1e-12)


def test_bandit_estimate_is_unbiased():
    exact = bandit_exact_gradient(BANDIT_MEAN, BANDIT_SIGMA)
    terms = bandit_terms(20000, seed=5, baseline=4.0)
    est = terms.mean(axis=0)
    se = terms.std(axis=0, ddof=1) / math.sqrt(len(terms))
    assert np.all(np.abs(est - exact) < 3 * se)


def test_fitted_baseline_approaches_mean_reward():
    b = fit_bandit_baseline(seed=2)
    from oracles import bandit_reward
    expected = gauss_hermite_expectation(bandit_reward, BANDIT_MEAN, BANDIT_SIGMA)
    assert b == pytest.approx(expected, abs=0.05)


def test_hybrid_loss_matches_cross_entropy(rng):
    cfg = RamConfig(retina=RetinaConfig(4, 1), glimpse_feature_dim=6, glimpse_output_dim=6,
                    core_dim=6, num_glimpses=2)
    m = RamModel(cfg)
    tr = m.rollout(ClassificationEnv(rng.random((4, 10, 10)), [0, 1, 2, 3], 2), rng)
    loss, d_logits = hybrid_head_grads(tr, [0, 1, 2, 3])
    p = tr.final_probs[np.arange(4), [0, 1, 2, 3]]
    assert loss == pytest.approx(-np.log(p).mean())
    assert d_logits[0] is None
    with pytest.raises(ValueError):
        hybrid_head_grads(tr, [0, 1, 2, 10])


def test_location_weight_scales_only_policy_term(rng):
    cfg = RamConfig(retina=RetinaConfig(4, 1), glimpse_feature_dim=6, glimpse_output_dim=6,
                    core_dim=6, num_glimpses=3)
    m = RamModel(cfg)
    tr = m.rollout(ClassificationEnv(rng.random((4, 10, 10)), [0, 1, 2, 3], 3), rng)
    grads = {}
    for w in (1.0, 0.5):
        m.zero_grad()
        accumulate_gradients(m, tr, location_weight=w)
        grads[w] = {b.name: b.grad.copy() for b in m.blocks()}
    np.testing.assert_allclose(grads[0.5]["location.W"], 0.5 * grads[1.0]["location.W"])
    np.testing.assert_array_equal(grads[0.5]["baseline.W"], grads[1.0]["baseline.W"])


def test_baseline_weight_scales_only_baseline_head(rng):
    cfg = RamConfig(retina=RetinaConfig(4, 1), glimpse_feature_dim=6, glimpse_output_dim=6,
                    core_dim=6, num_glimpses=3)
    m = RamModel(cfg)
    tr = m.rollout(ClassificationEnv(rng.random((4, 10, 10)), [0, 1, 2, 3], 3), rng)
    grads = {}
    for w in (1.0, 0.25):
        m.zero_grad()
        accumulate_gradients(m, tr, baseline_weight=w)
        grads[w] = {b.name: b.grad.copy() for b in m.blocks()}
    for name, g in grads[1.0].items():
        if name.startswith("baseline"):
            np.testing.assert_allclose(grads[0.25][name], 0.25 * g)
        else:
            np.testing.assert_array_equal(grads[0.25][name], g)


def test_clip_gradients_global_norm():
    a = ParamBlock("a", np.zeros((1, 2)))
    b = ParamBlock("b", np.zeros((1, 1)))
    a.grad[...] = [[3.0, 0.0]]
    b.grad[...] = [[4.0]]
    assert clip_gradients([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [[0.6, 0.0]])
    np.testing.assert_allclose(b.grad, [[0.8]])
    clip_gradients([a, b], None)
    np.testing.assert_allclose(b.grad, [[0.8]])


def test_short_training_reduces_loss():
    gen = np.random.default_rng(0)
    # two classes that differ by which half of the image is lit
    images = np.zeros((200, 8, 8))
    labels = gen.integers(0, 2, 200)
    images[labels == 0, :, :4] = 1.0
    images[labels == 1, :, 4:] = 1.0
    cfg = RamConfig(retina=RetinaConfig(8, 1), glimpse_feature_dim=16, glimpse_output_dim=16,
                    core_dim=16, num_glimpses=2, num_action_outputs=2)
    m = RamModel(cfg, seed=0)
    opt = make_optimizer(m, TrainConfig(learning_rate=0.05))
    batches = [(images[i:i + 20], labels[i:i + 20], np.arange(i, i + 20)) for i in range(0, 200, 20)]
    first = train_classification_epoch(m, opt, batches, gen, 0, location_weight=0.01, grad_clip=5.0)
    for e in range(1, 5):
        last = train_classification_epoch(m, opt, batches, gen, e, location_weight=0.01, grad_clip=5.0)
    assert last.loss < first.loss and last.train_error < 0.1


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(sigma=-1.0)


def test_search_space_is_log_uniform_and_degenerate_safe():
    gen = np.random.default_rng(0)
    space = SearchSpace((1e-4, 1e-1), (0.1, 0.1), trials=1)
    draws = np.array([space.sample(gen)["learning_rate"] for _ in range(4000)])
    assert np.all((draws >= 1e-4) & (draws <= 1e-1))
    # a quarter of the log range lies below 10**-3.25
    assert np.mean(draws < 10**-3.25) == pytest.approx(0.25, abs=0.03)
    assert space.sample(gen)["sigma"] == 0.1
    with pytest.raises(ConfigError):
        SearchSpace((0.0, 1.0))


def test_random_search_picks_minimum():
    space = SearchSpace((1e-3, 1e-1), (0.05, 0.2), trials=6)
    best, rows = random_search(space, lambda p, s: abs(math.log10(p["learning_rate"]) + 2), seed=3)
    assert len(rows) == 6
    assert best["learning_rate"] == min(rows, key=lambda r: r["val_error"])["learning_rate"]


def _diverge_if_high(p, s):
    if p["learning_rate"] > 0.01:
        raise NonFiniteError("boom")
    return p["learning_rate"]


def test_random_search_logs_divergence():
    _, rows = random_search(SearchSpace((1e-3, 1e-1), (0.1, 0.1), trials=8), _diverge_if_high, seed=0)
    assert {"ok", "diverged"} <= {r["status"] for r in rows}
    with pytest.raises(SearchError) as exc:
        random_search(SearchSpace((0.05, 0.1), (0.1, 0.1), trials=3), _diverge_if_high)
    assert len(exc.value.trials) == 3


def test_parallel_search_matches_serial():
    space = SearchSpace((1e-3, 1e-1), (0.05, 0.2), trials=4)
    _, serial = random_search(space, _diverge_if_high, seed=1, workers=1)
    _, parallel = random_search(space, _diverge_if_high, seed=1, workers=2)
    key = lambda rows: [(r["learning_rate"], r["status"], r["val_error"] if r["status"] == "ok" else None)
                        for r in rows]
    assert key(serial) == key(parallel)
