"""Command-line entry point: ``ram train|eval|search|render|generate-preview``.

Exit codes: 0 success, 1 runtime failure, 2 bad config or arguments,
3 missing data.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, parse_config
from .datasets import FIXED_EPOCH, TEST_SEED, DataMissingError, FormatError, generate_batch, load_mnist, train_validation_split
from .diffcore import ConfigError, load_checkpoint, save_checkpoint
from .envs import CatchEnv, ClassificationEnv
from .evalviz import (
    EvalReport,
    evaluate_error,
    baseline_models,
    eval_catch_rate,
    figure_filename,
    preview_grid,
    random_policy,
    render_glimpse_path,
    write_ppm,
)
from .experiments import EVAL, RunResult, evaluate, stream_rng, fixed_test_set, train_baseline, train_catch, train_ram
from .learning import SearchError, random_search
from .model import RamModel

log = logging.getLogger("ram")

EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 1, 2, 3
METRIC_FIELDS = ("epoch", "loss", "train_error", "val_error", "mean_reward", "mean_abs_advantage",
                 "episodes")


# ------------------------------------------------------------- helpers --

def _limit(s, n):
    return s if not n else s.subset(slice(0, n))


def load_data(cfg: ExperimentConfig):
    data_dir = cfg.paths.data_dir or None
    train, val = train_validation_split(load_mnist(data_dir, "train"))
    test = load_mnist(data_dir, "test")
    return _limit(train, cfg.task.train_limit), _limit(val, cfg.task.test_limit), _limit(test, cfg.task.test_limit)


def build_model(cfg: ExperimentConfig):
    if cfg.model.kind == "ram":
        return RamModel(cfg.ram_config(), seed=cfg.seed)
    return baseline_models(cfg.model.kind, cfg.task_spec().canvas, seed=cfg.seed, dtype=cfg.model.dtype)


def run_training(cfg: ExperimentConfig, train, val=None):
    """Train per ``cfg``; with ``val`` each epoch also records validation error."""
    tcfg = cfg.train_config()
    if cfg.is_catch:
        return train_catch(cfg.ram_config(), tcfg, cfg.task.frames)
    spec = cfg.task_spec()
    on_epoch = None
    if val is not None:
        val_set = fixed_test_set(spec, val)

        def on_epoch(model, m):
            m.val_error = evaluate_error(model, val_set.images, val_set.labels, seed=cfg.seed).error_rate

    if cfg.model.kind == "ram":
        return train_ram(spec, train, cfg.ram_config(), tcfg, cfg.task.epoch_size or None, on_epoch)
    return train_baseline(cfg.model.kind, spec, train, tcfg, cfg.task.epoch_size or None, cfg.model.dtype,
                          on_epoch)


def write_metrics(out: Path, metrics):
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for m in metrics:
            w.writerow([m.epoch, repr(float(m.loss)), repr(float(m.train_error)), repr(float(m.val_error)),
                        repr(float(m.mean_reward)), repr(float(m.mean_abs_advantage)), m.episodes])
    # wall-clock time varies run to run, so it lives apart from the metrics
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "wall_seconds"))
        for m in metrics:
            w.writerow([m.epoch, f"{m.wall_seconds:.3f}"])


def _out_dir(cfg, args):
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------ commands --

def cmd_train(cfg: ExperimentConfig, args):
    out = _out_dir(cfg, args)
    (out / "manifest.ini").write_text(cfg.to_ini())
    train = val = None
    if not cfg.is_catch:
        train, val, _ = load_data(cfg)
    result = run_training(cfg, train, val)
    write_metrics(out, result.metrics)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ramckpt"
    save_checkpoint(ckpt, result.model.blocks())
    print(f"trained {cfg.model.kind} on {cfg.task.name}: {len(result.metrics)} epochs, checkpoint {ckpt}")
    return 0


def _load_trained(cfg, args):
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.paths.out_dir) / "model.ramckpt"
    if not ckpt.exists():
        raise DataMissingError(f"checkpoint {ckpt} not found")
    model = build_model(cfg)
    load_checkpoint(ckpt, model.blocks())
    return model


def cmd_eval(cfg: ExperimentConfig, args):
    model = _load_trained(cfg, args)
    out = _out_dir(cfg, args)
    if cfg.is_catch:
        rng = stream_rng(cfg.seed, EVAL)
        n = cfg.task.test_limit or 10000
        reports = [eval_catch_rate(model, n, rng, name="ram"),
                   eval_catch_rate(random_policy(rng), n, rng, name="random")]
        for r in reports:
            print(f"catch {r.model}: catch rate {1 - r.error_rate:.4f} "
                  f"[{1 - r.ci_high:.4f}, {1 - r.ci_low:.4f}] over {r.episode_count}")
    else:
        _, _, test = load_data(cfg)
        spec = cfg.task_spec()
        name = f"ram-{cfg.model.num_glimpses}" if cfg.model.kind == "ram" else cfg.model.kind
        reports = [evaluate(RunResult(model), spec, fixed_test_set(spec, test), name, seed=cfg.seed)]
        print(reports[0].text())
    with open(out / "eval.csv", "w") as fh:
        fh.write(EvalReport.CSV_HEADER + "\n")
        for r in reports:
            fh.write(r.csv_row() + "\n")
    return 0


def search_objective(cfg_ini, params, seed):
    """One search trial: short training, then validation error."""
    cfg = parse_config(cfg_ini)
    cfg.meta.seed = seed
    cfg.train.learning_rate = params["learning_rate"]
    cfg.model.location_sigma = params["sigma"]
    cfg.train.epochs = cfg.search.epochs
    train, val, _ = load_data(cfg)
    if cfg.is_catch:
        result = run_training(cfg, None)
        rep = eval_catch_rate(result.model, 1000, stream_rng(seed, EVAL))
        return rep.error_rate
    result = run_training(cfg, train)
    spec = cfg.task_spec()
    rep = evaluate(result, spec, fixed_test_set(spec, val), "trial", seed=seed)
    return rep.error_rate


def cmd_search(cfg: ExperimentConfig, args):
    out = _out_dir(cfg, args)
    objective = partial(search_objective, cfg.to_ini())
    try:
        best, rows = random_search(cfg.search_space(), objective, seed=cfg.seed, workers=args.workers)
    except SearchError as exc:
        _write_search(out, exc.trials)
        raise
    _write_search(out, rows)
    cfg.train.learning_rate = best["learning_rate"]
    cfg.model.location_sigma = best["sigma"]
    (out / "best.ini").write_text(cfg.to_ini())
    print(f"best: {json.dumps(best)}")
    return 0


def _write_search(out, rows):
    with open(out / "search.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_render(cfg: ExperimentConfig, args):
    model = _load_trained(cfg, args)
    if not isinstance(model, RamModel):
        raise ConfigError("render needs a ram model")
    out = _out_dir(cfg, args)
    rng = stream_rng(cfg.seed, EVAL)
    count = 8
    if cfg.is_catch:
        env = CatchEnv(count, rng)
        trace = model.rollout(env, rng)
        # the panel shows the frame the first fixation was taken on
        frames = env.history[0]
        correct = trace.rewards.sum(axis=0) > 0
    else:
        _, _, test = load_data(cfg)
        spec = cfg.task_spec()
        images, labels = generate_batch(spec, test, np.arange(count), TEST_SEED, FIXED_EPOCH)
        trace = model.rollout(ClassificationEnv(images, labels, model.cfg.num_glimpses), rng,
                              deterministic=True)
        frames = images
        correct = trace.actions[-1] == labels
    for i in range(count):
        fig = render_glimpse_path(trace, i, frames[i], model.cfg.retina, bool(correct[i]))
        fig.save(out / figure_filename(cfg.task.name, cfg.train.epochs, i))
    print(f"wrote {count} figures to {out}")
    return 0


def cmd_generate_preview(cfg: ExperimentConfig, args):
    out = _out_dir(cfg, args)
    if cfg.is_catch:
        raise ConfigError("generate-preview needs an image task")
    _, _, test = load_data(cfg)
    spec = cfg.task_spec()
    images, _ = generate_batch(spec, test, np.arange(16), cfg.seed, 0)
    path = out / f"{cfg.task.name}_preview.ppm"
    write_ppm(path, preview_grid(images))
    print(f"wrote {path}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "search": cmd_search, "render": cmd_render,
            "generate-preview": cmd_generate_preview}


def make_parser():
    p = argparse.ArgumentParser(prog="ram", description="Recurrent attention model experiments")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--checkpoint")
        s.add_argument("--out")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.meta = replace(cfg.meta, seed=args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataMissingError, FileNotFoundError) as exc:
        print(f"missing data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FormatError as exc:
        print(f"bad data file: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
