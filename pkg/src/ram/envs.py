"""Episodic environments. Every environment runs a batch of independent
episodes in lock-step; a single episode is a batch of one.

Interface used by the rollout:

* ``batch_size``, ``num_steps``, ``acts_every_step``, ``num_actions``
* ``reset()`` and ``observe()`` return the current frames ``(B, H, W)``
* ``step(action)`` returns an :class:`EnvStepResult`
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ProtocolError(RuntimeError):
    pass


@dataclass
class EnvStepResult:
    observation: np.ndarray
    reward: np.ndarray
    terminal: np.ndarray


class ClassificationEnv:
    """Static image; the only reward is 1 at the last step for a correct label."""

    acts_every_step = False

    def __init__(self, images, labels, num_steps, num_classes=10):
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        self.images = images
        self.labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        self.num_steps = int(num_steps)
        self.num_actions = num_classes
        self.batch_size = len(self.images)
        self.static = True
        self.t = 0

    def reset(self):
        self.t = 0
        return self.images

    def observe(self):
        return self.images

    def step(self, action=None):
        if self.t >= self.num_steps:
            raise ProtocolError("step after terminal; call reset()")
        self.t += 1
        terminal = self.t == self.num_steps
        reward = np.zeros(self.batch_size)
        if terminal:
            if action is None:
                raise ProtocolError("final step needs a classification action")
            reward = (np.asarray(action) == self.labels).astype(np.float64)
        return EnvStepResult(self.images, reward, np.full(self.batch_size, terminal))


def classification_env(image, label, num_steps):
    return ClassificationEnv(image, label, num_steps)


# ----------------------------------------------------------------- catch ----

SCREEN = 24
PADDLE_START = 11
LEFT, RIGHT, NOOP = 0, 1, 2
ACTION_DELTA = np.array([-1, 1, 0])


@dataclass(frozen=True)
class CatchState:
    """Vectorised game state; every field has shape ``(B,)``."""

    ball_row: np.ndarray
    ball_col: np.ndarray
    ball_dx: np.ndarray
    paddle_col: np.ndarray

    @property
    def terminal(self):
        return self.ball_row >= SCREEN - 1


def catch_render_frame(state: CatchState):
    B = len(state.ball_row)
    frames = np.zeros((B, SCREEN, SCREEN))
    idx = np.arange(B)
    frames[idx, state.ball_row, state.ball_col] = 1.0
    frames[idx, SCREEN - 1, state.paddle_col] = 1.0
    frames[idx, SCREEN - 1, state.paddle_col + 1] = 1.0
    return frames


def catch_reset(rng, n=1):
    state = CatchState(
        ball_row=np.zeros(n, dtype=np.int64),
        ball_col=rng.integers(0, SCREEN, size=n),
        ball_dx=rng.integers(-1, 2, size=n),
        paddle_col=np.full(n, PADDLE_START, dtype=np.int64),
    )
    return state, catch_render_frame(state)


def catch_step(state: CatchState, action):
    """Advance one frame. Returns ``(new_state, EnvStepResult)``."""
    if np.any(state.terminal):
        raise ProtocolError("step after terminal; call catch_reset()")
    action = np.broadcast_to(np.asarray(action, dtype=np.int64), state.ball_row.shape)
    paddle = np.clip(state.paddle_col + ACTION_DELTA[action], 0, SCREEN - 2)
    col = state.ball_col + state.ball_dx
    dx = state.ball_dx.copy()
    low, high = col < 0, col > SCREEN - 1
    col = np.where(low, -col, np.where(high, 2 * (SCREEN - 1) - col, col))
    dx = np.where(low | high, -dx, dx)
    new = CatchState(state.ball_row + 1, col, dx, paddle)
    terminal = new.terminal
    caught = (col == paddle) | (col == paddle + 1)
    reward = (terminal & caught).astype(np.float64)
    return new, EnvStepResult(catch_render_frame(new), reward, terminal)


def landing_column(state: CatchState):
    """Column where each ball reaches the bottom row, by simulating reflections."""
    col, dx = state.ball_col.copy(), state.ball_dx.copy()
    remaining = SCREEN - 1 - state.ball_row
    for k in range(int(remaining.max(initial=0))):
        active = remaining > k
        nxt = col + dx
        low, high = nxt < 0, nxt > SCREEN - 1
        nxt = np.where(low, -nxt, np.where(high, 2 * (SCREEN - 1) - nxt, nxt))
        dx = np.where(active & (low | high), -dx, dx)
        col = np.where(active, nxt, col)
    return col


def greedy_tracker(state: CatchState):
    """Oracle-state policy: move the paddle toward the predicted landing column."""
    target = landing_column(state)
    # the paddle covers {p, p+1}
    return np.where(target > state.paddle_col + 1, RIGHT, np.where(target < state.paddle_col, LEFT, NOOP))


class CatchEnv:
    """A batch of Catch games, each exactly one ball drop long."""

    acts_every_step = True
    num_actions = 3
    num_steps = SCREEN - 1

    def __init__(self, batch_size, rng):
        self.batch_size = batch_size
        self.rng = rng
        self.static = False
        self.state = None
        self.frames = None
        self.history = []

    def reset(self):
        self.state, self.frames = catch_reset(self.rng, self.batch_size)
        self.history = [self.frames]
        return self.frames

    def observe(self):
        return self.frames

    def step(self, action):
        if self.state is None:
            raise ProtocolError("reset() before step()")
        self.state, result = catch_step(self.state, action)
        self.frames = result.observation
        self.history.append(self.frames)
        return result
