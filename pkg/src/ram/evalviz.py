"""Evaluation reports, the fully-connected / convolutional comparison
networks, and glimpse-path figures written as binary PPM."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffcore import ConfigError, Linear, cross_entropy_loss, rect_backward, rect_forward, softmax
from .envs import CatchEnv, ClassificationEnv, catch_reset, catch_step
from .glimpse import RetinaConfig, loc_to_pixel
from .model import EpisodeTrace, RamModel

# Published test errors (percent) keyed by (task, model); catch rate for Catch.
REFERENCE_ERRORS = {
    ("mnist28", "fc2-256"): 1.35,
    ("mnist28", "ram-1"): 42.85,
    ("mnist28", "ram-2"): 6.27,
    ("mnist28", "ram-3"): 2.7,
    ("mnist28", "ram-4"): 1.73,
    ("mnist28", "ram-5"): 1.55,
    ("mnist28", "ram-6"): 1.29,
    ("mnist28", "ram-7"): 1.47,
    ("translated60", "fc2-64"): 7.56,
    ("translated60", "fc2-256"): 3.7,
    ("translated60", "conv2"): 2.31,
    ("translated60", "ram-4"): 2.29,
    ("translated60", "ram-6"): 1.86,
    ("translated60", "ram-8"): 1.84,
    ("cluttered60", "fc2-64"): 28.96,
    ("cluttered60", "fc2-256"): 13.2,
    ("cluttered60", "conv2"): 7.83,
    ("cluttered60", "ram-4"): 7.1,
    ("cluttered60", "ram-6"): 5.88,
    ("cluttered60", "ram-8"): 5.23,
    ("cluttered100", "conv2"): 16.51,
    ("cluttered100", "ram-4"): 14.95,
    ("cluttered100", "ram-6"): 11.58,
    ("cluttered100", "ram-8"): 10.83,
}
REFERENCE_CATCH_RATE = 0.85


def wilson_interval(successes, n, z=1.959963984540054):
    if n <= 0:
        raise ValueError("n must be positive")
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    # the bounds at k = 0 and k = n are exactly 0 and 1; keep rounding from crossing them
    lo = 0.0 if successes == 0 else max(center - half, 0.0)
    hi = 1.0 if successes == n else min(center + half, 1.0)
    return lo, hi


@dataclass
class EvalReport:
    task: str
    model: str
    error_rate: float
    episode_count: int
    ci_low: float
    ci_high: float
    wall_seconds: float = 0.0
    reference: float | None = None

    def __post_init__(self):
        if not 0 <= self.error_rate <= 1 or self.episode_count <= 0:
            raise ValueError(f"invalid report {self}")

    @property
    def half_width(self):
        return (self.ci_high - self.ci_low) / 2

    def text(self):
        ref = "" if self.reference is None else f" (reference {self.reference})"
        return (f"{self.task} {self.model}: error {100 * self.error_rate:.2f}% "
                f"[{100 * self.ci_low:.2f}, {100 * self.ci_high:.2f}] over {self.episode_count}{ref}")

    CSV_HEADER = "task,model,error_rate,episode_count,ci_low,ci_high,reference"

    def csv_row(self):
        ref = "" if self.reference is None else repr(self.reference)
        return f"{self.task},{self.model},{self.error_rate!r},{self.episode_count},{self.ci_low!r},{self.ci_high!r},{ref}"


def _report(task, name, wrong, n, t0, reference=None):
    lo, hi = wilson_interval(wrong, n)
    return EvalReport(task, name, wrong / n, n, lo, hi, time.perf_counter() - t0, reference)


# ---------------------------------------------------------- evaluation --

def predict_labels(model, images, *, seed=0, batch_size=500):
    """Deterministic predictions: mean locations and argmax for the RAM."""
    if not isinstance(model, RamModel):
        return np.concatenate([model.predict(images[i:i + batch_size])
                               for i in range(0, len(images), batch_size)])
    rng = np.random.default_rng(seed)
    out = []
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size]
        env = ClassificationEnv(x, np.zeros(len(x), dtype=np.int64), model.cfg.num_glimpses,
                                model.cfg.num_action_outputs)
        trace = model.rollout(env, rng, deterministic=True)
        out.append(trace.actions[-1])
    return np.concatenate(out)


def evaluate_error(model, images, labels, *, task="task", name="model", seed=0, batch_size=500):
    t0 = time.perf_counter()
    if isinstance(model, RamModel) and images.shape[1] < model.cfg.retina.patch_width:
        raise ConfigError("image smaller than the retina")
    pred = predict_labels(model, images, seed=seed, batch_size=batch_size)
    wrong = int((pred != labels).sum())
    return _report(task, name, wrong, len(labels), t0, REFERENCE_ERRORS.get((task, name)))


def eval_catch_rate(policy, episodes, rng, *, name="ram", batch_size=500):
    """Fraction of caught balls. ``policy`` is a :class:`RamModel` (sampled
    locations and actions) or a callable ``state -> actions`` with oracle state."""
    t0 = time.perf_counter()
    caught = 0
    done = 0
    while done < episodes:
        B = min(batch_size, episodes - done)
        if isinstance(policy, RamModel):
            trace = policy.rollout(CatchEnv(B, rng), rng)
            caught += int(trace.rewards.sum())
        else:
            state, _ = catch_reset(rng, B)
            total = np.zeros(B)
            while not np.all(state.terminal):
                state, res = catch_step(state, policy(state))
                total += res.reward
            caught += int(total.sum())
        done += B
    rep = _report("catch", name, episodes - caught, episodes, t0)
    rep.reference = REFERENCE_CATCH_RATE
    return rep


def random_policy(rng):
    def act(state):
        return rng.integers(0, 3, size=len(state.ball_row))
    return act


# ------------------------------------------------------------ baselines --

class FC2:
    """Two rectifier hidden layers and a softmax output."""

    def __init__(self, n_in, hidden, n_out=10, seed=0, dtype="float64"):
        rng = np.random.default_rng(seed)
        dt = np.dtype(dtype)
        self.dtype = dt
        self.name = f"fc2-{hidden}"
        self.layers = [Linear("fc1", n_in, hidden, rng, dt), Linear("fc2", hidden, hidden, rng, dt),
                       Linear("out", hidden, n_out, rng, dt)]

    def blocks(self):
        return [b for l in self.layers for b in l.blocks()]

    def num_parameters(self):
        return sum(b.value.size for b in self.blocks())

    def forward(self, images):
        x = images.reshape(len(images), -1).astype(self.dtype, copy=False)
        caches = []
        for i, layer in enumerate(self.layers):
            x, c = layer.forward(x)
            m = None
            if i < len(self.layers) - 1:
                x, m = rect_forward(x)
            caches.append((c, m))
        return softmax(x), caches

    def backward(self, dlogits, caches):
        d = dlogits
        for layer, (c, m) in zip(reversed(self.layers), reversed(caches)):
            if m is not None:
                d = rect_backward(d, m)
            d = layer.backward(d, c)

    def predict(self, images):
        return self.forward(images)[0].argmax(axis=1)


class Conv2:
    """One convolution layer (valid, strided) then one rectifier fully-connected
    layer and a softmax output."""

    def __init__(self, canvas, filters=8, kernel=10, stride=5, hidden=256, n_out=10, seed=0,
                 dtype="float64"):
        rng = np.random.default_rng(seed)
        dt = np.dtype(dtype)
        self.dtype = dt
        self.name = "conv2"
        self.kernel, self.stride = kernel, stride
        self.out_side = conv_output_size(canvas, kernel, stride)
        self.conv = Linear("conv", kernel * kernel, filters, rng, dt)
        self.fc = Linear("fc", self.out_side ** 2 * filters, hidden, rng, dt)
        self.out = Linear("out", hidden, n_out, rng, dt)

    def blocks(self):
        return self.conv.blocks() + self.fc.blocks() + self.out.blocks()

    def num_parameters(self):
        return sum(b.value.size for b in self.blocks())

    @property
    def fc_fan_in(self):
        return self.fc.n_in

    def _patches(self, images):
        k, s = self.kernel, self.stride
        win = sliding_window_view(images, (k, k), axis=(1, 2))[:, ::s, ::s]
        B = len(images)
        return np.ascontiguousarray(win).reshape(B * self.out_side ** 2, k * k).astype(self.dtype, copy=False)

    def forward(self, images):
        B = len(images)
        a, c_conv = self.conv.forward(self._patches(images))
        a, m_conv = rect_forward(a)
        x = a.reshape(B, -1)
        a, c_fc = self.fc.forward(x)
        a, m_fc = rect_forward(a)
        logits, c_out = self.out.forward(a)
        return softmax(logits), (c_conv, m_conv, c_fc, m_fc, c_out)

    def backward(self, dlogits, cache):
        c_conv, m_conv, c_fc, m_fc, c_out = cache
        d = rect_backward(self.out.backward(dlogits, c_out), m_fc)
        d = self.fc.backward(d, c_fc)
        d = rect_backward(d.reshape(m_conv.shape), m_conv)
        self.conv.backward(d, c_conv)

    def predict(self, images):
        return self.forward(images)[0].argmax(axis=1)


def conv_output_size(side, kernel, stride):
    return (side - kernel) // stride + 1


def baseline_models(kind, canvas, *, seed=0, dtype="float64"):
    """``fc2-64``, ``fc2-256`` or ``conv2`` for a square ``canvas``."""
    if kind in ("fc2-64", "fc2-256"):
        return FC2(canvas * canvas, int(kind.split("-")[1]), seed=seed, dtype=dtype)
    if kind == "conv2":
        return Conv2(canvas, hidden=86 if canvas >= 100 else 256, seed=seed, dtype=dtype)
    raise ConfigError(f"unknown baseline kind {kind!r}")


def baseline_train_step(model, images, labels):
    """Accumulate the mean cross-entropy gradient of one minibatch; returns the loss."""
    probs, cache = model.forward(images)
    loss, dl = cross_entropy_loss(probs, labels)
    model.backward(dl / len(labels), cache)
    return loss / len(labels)


# -------------------------------------------------------------- figures --

GREEN = (0, 255, 0)
RED = (255, 0, 0)


@dataclass
class PathFigure:
    raster: np.ndarray                       # (H, (1+T) W, 3) uint8
    panels: list = field(default_factory=list)  # float images, panel 0 is the source
    path: list = field(default_factory=list)    # fixation pixels (px, py)

    def save(self, path):
        write_ppm(path, self.raster)


def write_ppm(path, rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def reconstruct_glimpse(glimpse, l, shape, cfg: RetinaConfig):
    """Place each scale's pooled patch back on a black canvas, coarse first,
    upscaled by pixel replication."""
    H, W = shape
    canvas = np.zeros((H, W))
    px, py = loc_to_pixel(l, W, H)
    g = cfg.patch_width
    for s in reversed(range(cfg.num_scales)):
        w = cfg.scale_width(s)
        block = glimpse[s * g * g:(s + 1) * g * g].reshape(g, g)
        up = np.repeat(np.repeat(block, 1 << s, axis=0), 1 << s, axis=1)
        top, left = py - w // 2, px - w // 2
        r0, r1 = max(top, 0), min(top + w, H)
        c0, c1 = max(left, 0), min(left + w, W)
        if r0 < r1 and c0 < c1:
            canvas[r0:r1, c0:c1] = up[r0 - top:r1 - top, c0 - left:c1 - left]
    return canvas


def _gray_rgb(img):
    v = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return np.repeat(v[..., None], 3, axis=2)


def _line(p0, p1):
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _put(rgb, x, y, color):
    if 0 <= y < rgb.shape[0] and 0 <= x < rgb.shape[1]:
        rgb[y, x] = color


def _circle(rgb, cx, cy, r, color, filled):
    for y in range(cy - r, cy + r + 1):
        for x in range(cx - r, cx + r + 1):
            d2 = (x - cx) ** 2 + (y - cy) ** 2
            if d2 <= r * r + r and (filled or d2 >= (r - 1) * (r - 1) + (r - 1)):
                _put(rgb, x, y, color)


def render_glimpse_path(trace: EpisodeTrace, index, source, cfg: RetinaConfig, correct=True):
    """Source with its fixation path, then one reconstruction per glimpse."""
    H, W = source.shape
    T = trace.num_steps
    color = GREEN if correct else RED
    panel0 = _gray_rgb(source)
    pts = [tuple(int(v) for v in loc_to_pixel(trace.sense_locs[t, index], W, H)) for t in range(T)]
    for a, b in zip(pts, pts[1:]):
        for x, y in _line(a, b):
            _put(panel0, x, y, color)
    r = max(1, min(H, W) // 20)
    _circle(panel0, *pts[0], r, color, filled=True)
    _circle(panel0, *pts[-1], r + 1, color, filled=False)
    panels = [source.astype(np.float64)]
    tiles = [panel0]
    for t in range(T):
        rec = reconstruct_glimpse(trace.glimpses[t, index].astype(np.float64),
                                  trace.sense_locs[t, index], (H, W), cfg)
        panels.append(rec)
        tiles.append(_gray_rgb(rec))
    return PathFigure(np.concatenate(tiles, axis=1), panels, pts)


def figure_filename(task, epoch, index):
    return f"{task}_{epoch}_{index}.ppm"


def preview_grid(images, cols=4):
    """Tile grayscale images into one RGB raster with 1-pixel gray separators."""
    n = len(images)
    rows = -(-n // cols)
    h, w = images.shape[1:]
    grid = np.full((rows * (h + 1) + 1, cols * (w + 1) + 1), 0.5)
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        grid[1 + r * (h + 1):1 + r * (h + 1) + h, 1 + c * (w + 1):1 + c * (w + 1) + w] = img
    return _gray_rgb(grid)
