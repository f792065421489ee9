"""The recurrent attention model: glimpse network, recurrent core, Gaussian
location policy, action head and a per-step baseline head.

Rollouts are batched: one call runs ``B`` episodes in lock-step and returns a
single :class:`EpisodeTrace` whose arrays are indexed ``[t, episode, ...]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import (
    ConfigError,
    DimensionError,
    LSTMCell,
    LstmState,
    Linear,
    StateError,
    gaussian_logprob,
    rect_backward,
    rect_forward,
    softmax,
)
from .glimpse import BatchSensor, RetinaConfig

CORE_KINDS = ("rnn", "lstm")


@dataclass
class RamConfig:
    retina: RetinaConfig = field(default_factory=RetinaConfig)
    glimpse_feature_dim: int = 128
    glimpse_output_dim: int = 256
    core_dim: int = 256
    core_kind: str = "rnn"
    num_glimpses: int = 6
    location_sigma: float = 0.1
    num_action_outputs: int = 10
    discount: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.retina, dict):
            self.retina = RetinaConfig(**self.retina)
        dims = (self.glimpse_feature_dim, self.glimpse_output_dim, self.core_dim,
                self.num_glimpses, self.num_action_outputs)
        if min(dims) < 1:
            raise ConfigError(f"dimensions and num_glimpses must be >= 1: {self}")
        if self.core_kind not in CORE_KINDS:
            raise ConfigError(f"core_kind must be one of {CORE_KINDS}, got {self.core_kind!r}")
        if not self.location_sigma > 0:
            raise ConfigError(f"location_sigma must be positive, got {self.location_sigma}")
        if not 0 < self.discount <= 1:
            raise ConfigError(f"discount must lie in (0, 1], got {self.discount}")


@dataclass
class EpisodeTrace:
    """A batch of ``B`` episodes of ``T`` steps.

    Step ``t`` (0-based) senses at ``sense_locs[t]``, updates the core to
    ``hidden[t]``, predicts ``baselines[t]`` and samples the next location
    ``locs[t]`` from ``N(loc_means[t], sigma^2)``. ``sense_locs[0]`` is the
    uniformly random first fixation. ``actions[t] == -1`` means no
    environment action at that step.
    """

    sense_locs: np.ndarray      # (T, B, 2)
    raw_locs: np.ndarray        # (T, B, 2) unclamped samples
    locs: np.ndarray            # (T, B, 2) clamped samples
    loc_means: np.ndarray       # (T, B, 2)
    loc_logprobs: np.ndarray    # (T, B)
    loc_scores: np.ndarray      # (T, B, 2) d log pi / d mean
    glimpses: np.ndarray        # (T, B, D)
    hidden: np.ndarray          # (T, B, H)
    baselines: np.ndarray       # (T, B)
    actions: np.ndarray         # (T, B) int
    action_logprobs: np.ndarray  # (T, B)
    action_probs: list          # per step (B, K) or None
    rewards: np.ndarray         # (T, B)
    returns: np.ndarray         # (T, B)
    sigma: float
    episode_ids: np.ndarray = None
    caches: list = field(default=None, repr=False)

    @property
    def num_steps(self):
        return self.rewards.shape[0]

    @property
    def batch_size(self):
        return self.rewards.shape[1]

    @property
    def final_probs(self):
        return self.action_probs[-1]

    def step_records(self, i):
        """Per-step dicts for episode ``i`` (one JSON line each in a dump)."""
        eid = int(self.episode_ids[i]) if self.episode_ids is not None else i
        for t in range(self.num_steps):
            yield {
                "episode": eid,
                "t": t + 1,
                "sense_loc": self.sense_locs[t, i].tolist(),
                "loc": self.locs[t, i].tolist(),
                "loc_mean": self.loc_means[t, i].tolist(),
                "loc_logprob": float(self.loc_logprobs[t, i]),
                "action": int(self.actions[t, i]),
                "action_logprob": float(self.action_logprobs[t, i]),
                "baseline": float(self.baselines[t, i]),
                "reward": float(self.rewards[t, i]),
                "return": float(self.returns[t, i]),
            }

    def dump(self, path):
        with open(path, "w") as fh:
            for i in range(self.batch_size):
                for rec in self.step_records(i):
                    fh.write(json.dumps(rec) + "\n")


def discounted_returns(rewards, gamma):
    """``R_t = sum_{t' >= t} gamma^(t'-t) r_t'`` along axis 0."""
    out = np.zeros_like(rewards, dtype=np.float64)
    running = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


class RamModel:
    def __init__(self, cfg: RamConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = np.dtype(cfg.dtype)
        F, G, H = cfg.glimpse_feature_dim, cfg.glimpse_output_dim, cfg.core_dim
        self.dtype = dt
        self.retina_fc = Linear("glimpse.retina", cfg.retina.size, F, rng, dt)
        self.loc_fc = Linear("glimpse.location", 2, F, rng, dt)
        self.what_fc = Linear("glimpse.what", F, G, rng, dt)
        self.where_fc = Linear("glimpse.where", F, G, rng, dt)
        if cfg.core_kind == "rnn":
            self.core_h = Linear("core.hidden", H, H, rng, dt)
            self.core_g = Linear("core.input", G, H, rng, dt)
        else:
            self.lstm = LSTMCell("core.lstm", G, H, rng, dt)
        self.location_head = Linear("location", H, 2, rng, dt)
        self.action_head = Linear("action", H, cfg.num_action_outputs, rng, dt)
        self.baseline_head = Linear("baseline", H, 1, rng, dt)

    # -------------------------------------------------------- parameters --

    def layers(self):
        core = [self.core_h, self.core_g] if self.cfg.core_kind == "rnn" else [self.lstm]
        return [self.retina_fc, self.loc_fc, self.what_fc, self.where_fc, *core,
                self.location_head, self.action_head, self.baseline_head]

    def blocks(self):
        return [b for layer in self.layers() for b in layer.blocks()]

    def num_parameters(self):
        return sum(b.value.size for b in self.blocks())

    def multiplies_per_glimpse(self):
        """Multiply count of one glimpse-network + core + heads step."""
        n = sum(layer.W.value.size for layer in [self.retina_fc, self.loc_fc, self.what_fc,
                                                   self.where_fc, self.location_head,
                                                   self.action_head, self.baseline_head])
        if self.cfg.core_kind == "rnn":
            n += self.core_h.W.value.size + self.core_g.W.value.size
        else:
            n += self.lstm.Wx.value.size + self.lstm.Wh.value.size
        return n

    def zero_grad(self):
        for b in self.blocks():
            b.zero_grad()

    # -------------------------------------------------------- sub-networks --

    def glimpse_network_forward(self, rho, l):
        if rho.shape[-1] != self.cfg.retina.size:
            raise DimensionError(f"glimpse of size {rho.shape[-1]}, retina expects {self.cfg.retina.size}")
        a, c_rho = self.retina_fc.forward(rho)
        hg, m_hg = rect_forward(a)
        a, c_l = self.loc_fc.forward(l)
        hl, m_hl = rect_forward(a)
        a1, c_what = self.what_fc.forward(hg)
        a2, c_where = self.where_fc.forward(hl)
        g, m_g = rect_forward(a1 + a2)
        return g, (c_rho, m_hg, c_l, m_hl, c_what, c_where, m_g)

    def glimpse_network_backward(self, dg, cache):
        c_rho, m_hg, c_l, m_hl, c_what, c_where, m_g = cache
        da = rect_backward(dg, m_g)
        dhg = self.what_fc.backward(da, c_what)
        dhl = self.where_fc.backward(da, c_where)
        self.retina_fc.backward(rect_backward(dhg, m_hg), c_rho)
        self.loc_fc.backward(rect_backward(dhl, m_hl), c_l)

    def initial_state(self, batch=None):
        shape = (self.cfg.core_dim,) if batch is None else (batch, self.cfg.core_dim)
        if self.cfg.core_kind == "rnn":
            return np.zeros(shape, self.dtype)
        return LstmState(np.zeros(shape, self.dtype), np.zeros(shape, self.dtype))

    def core_step(self, h_prev, g):
        """Rectifier core ``h = Rect(Linear(h_prev) + Linear(g))``."""
        if self.cfg.core_kind != "rnn":
            raise ConfigError("core_step needs core_kind='rnn'")
        a1, c1 = self.core_h.forward(h_prev)
        a2, c2 = self.core_g.forward(g)
        h, m = rect_forward(a1 + a2)
        return h, (c1, c2, m)

    def core_step_lstm(self, state: LstmState, g):
        if self.cfg.core_kind != "lstm":
            raise ConfigError("core_step_lstm needs core_kind='lstm'")
        return self.lstm.step(g, state)

    def core_forward(self, state, g):
        if self.cfg.core_kind == "rnn":
            return self.core_step(state, g)
        return self.core_step_lstm(state, g)

    def core_backward(self, dstate, cache):
        """Returns ``(dstate_prev, dg)``; for the LSTM ``dstate`` is ``(dh, dc)``."""
        if self.cfg.core_kind == "rnn":
            c1, c2, m = cache
            da = rect_backward(dstate, m)
            return self.core_h.backward(da, c1), self.core_g.backward(da, c2)
        dh, dc = dstate
        dg, dh_prev, dc_prev = self.lstm.backward_step(dh, dc, cache)
        return (dh_prev, dc_prev), dg

    @staticmethod
    def hidden_of(state):
        return state.hidden if isinstance(state, LstmState) else state

    def location_mean(self, h):
        return self.location_head.forward(h)

    def location_policy_sample(self, h, rng, sigma=None):
        """Sample ``l ~ N(Linear(h), sigma^2 I)``; returns ``(l, log_prob, mean, raw, cache)``."""
        sigma = self.cfg.location_sigma if sigma is None else sigma
        mean, cache = self.location_mean(h)
        raw = mean + sigma * rng.standard_normal(mean.shape)
        logp, _ = gaussian_logprob(raw, mean, sigma)
        return np.clip(raw, -1.0, 1.0), logp, mean, raw, cache

    def action_distribution(self, h):
        logits, cache = self.action_head.forward(h)
        return softmax(logits), cache

    def baseline_predict(self, h):
        """Scalar value estimate per episode. The core is not trained through it."""
        b, cache = self.baseline_head.forward(h)
        return b[..., 0], cache

    # ------------------------------------------------------------ rollout --

    def rollout(self, env, rng, *, deterministic=False, replay=None, episode_ids=None):
        """Run ``env.num_steps`` steps for a batch of episodes.

        ``deterministic`` uses the location mean and the argmax action.
        ``replay`` (an :class:`EpisodeTrace`) reuses its first fixation,
        raw location samples and actions, so the trace can be re-evaluated
        under different parameters.
        """
        cfg = self.cfg
        T, B = env.num_steps, env.batch_size
        sigma = cfg.location_sigma
        frames = env.reset()
        sensor = BatchSensor(frames.astype(self.dtype, copy=False), cfg.retina)

        if replay is not None:
            l_prev = replay.sense_locs[0].astype(self.dtype)
        else:
            l_prev = rng.uniform(-1.0, 1.0, size=(B, 2)).astype(self.dtype)
        state = self.initial_state(B)

        rec = {k: [] for k in ("sense", "raw", "locs", "means", "logp", "score", "glimpse",
                               "hidden", "base", "act", "alogp", "probs", "rew")}
        caches = []
        for t in range(T):
            if not getattr(env, "static", True) and t > 0:
                sensor = BatchSensor(env.observe().astype(self.dtype, copy=False), cfg.retina)
            rho = sensor(l_prev)
            g, gcache = self.glimpse_network_forward(rho, l_prev)
            state, ccache = self.core_forward(state, g)
            h = self.hidden_of(state)
            b, bcache = self.baseline_predict(h)
            mean, lcache = self.location_mean(h)
            if replay is not None:
                raw = replay.raw_locs[t].astype(self.dtype)
            elif deterministic:
                raw = mean.copy()
            else:
                raw = mean + sigma * rng.standard_normal(mean.shape)
            logp, score = gaussian_logprob(raw, mean, sigma)
            l_t = np.clip(raw, -1.0, 1.0)

            acts_now = env.acts_every_step or t == T - 1
            probs = acache = None
            action = np.full(B, -1)
            alogp = np.zeros(B)
            if acts_now:
                probs, acache = self.action_distribution(h)
                if replay is not None:
                    action = replay.actions[t]
                elif deterministic or not env.acts_every_step:
                    action = probs.argmax(axis=1)
                else:
                    action = _sample_categorical(probs, rng)
                alogp = np.log(np.maximum(probs[np.arange(B), action], 1e-300))
            result = env.step(action if acts_now else None)

            rec["sense"].append(l_prev)
            rec["raw"].append(raw)
            rec["locs"].append(l_t)
            rec["means"].append(mean)
            rec["logp"].append(logp)
            rec["score"].append(score)
            rec["glimpse"].append(rho)
            rec["hidden"].append(h)
            rec["base"].append(b)
            rec["act"].append(action)
            rec["alogp"].append(alogp)
            rec["probs"].append(probs)
            rec["rew"].append(result.reward)
            caches.append((gcache, ccache, bcache, lcache, acache))
            l_prev = l_t

        rewards = np.stack(rec["rew"]).astype(np.float64)
        return EpisodeTrace(
            sense_locs=np.stack(rec["sense"]),
            raw_locs=np.stack(rec["raw"]),
            locs=np.stack(rec["locs"]),
            loc_means=np.stack(rec["means"]),
            loc_logprobs=np.stack(rec["logp"]),
            loc_scores=np.stack(rec["score"]),
            glimpses=np.stack(rec["glimpse"]),
            hidden=np.stack(rec["hidden"]),
            baselines=np.stack(rec["base"]),
            actions=np.stack(rec["act"]),
            action_logprobs=np.stack(rec["alogp"]),
            action_probs=rec["probs"],
            rewards=rewards,
            returns=discounted_returns(rewards, cfg.discount),
            sigma=sigma,
            episode_ids=np.arange(B) if episode_ids is None else np.asarray(episode_ids),
            caches=caches,
        )

    # ----------------------------------------------------------- backward --

    def backward(self, trace: EpisodeTrace, d_means=None, d_logits=None, d_baselines=None):
        """Backpropagate per-step head gradients through time.

        ``d_means`` ``(T, B, 2)`` and ``d_logits`` (list of ``(B, K)`` or
        ``None`` per step) flow into the core and glimpse networks.
        ``d_baselines`` ``(T, B)`` only reaches the baseline head.
        """
        if trace.caches is None:
            raise StateError("trace has no caches; it cannot be backpropagated")
        T, B = trace.num_steps, trace.batch_size
        H = self.cfg.core_dim
        lstm = self.cfg.core_kind == "lstm"
        dh_next = np.zeros((B, H), self.dtype)
        dc_next = np.zeros((B, H), self.dtype)
        for t in range(T - 1, -1, -1):
            gcache, ccache, bcache, lcache, acache = trace.caches[t]
            dh = dh_next
            if d_means is not None:
                dh = dh + self.location_head.backward(d_means[t].astype(self.dtype, copy=False), lcache)
            if d_logits is not None and d_logits[t] is not None:
                dh = dh + self.action_head.backward(d_logits[t].astype(self.dtype, copy=False), acache)
            if d_baselines is not None:
                self.baseline_head.backward(d_baselines[t][:, None].astype(self.dtype, copy=False), bcache)
            if lstm:
                (dh_next, dc_next), dg = self.core_backward((dh, dc_next), ccache)
            else:
                dh_next, dg = self.core_backward(dh, ccache)
            self.glimpse_network_backward(dg, gcache)


def _sample_categorical(probs, rng):
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1)


def config_to_dict(cfg: RamConfig):
    return asdict(cfg)
