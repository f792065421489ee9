import csv

import pytest

from ram.cli import main
from ram.config import parse_config
from ram.diffcore import ConfigError

TINY = """
[task]
name = {task}
train_limit = 60
test_limit = 40
epoch_size = 60
frames = 460
[model]
num_glimpses = 2
core_dim = 8
glimpse_feature_dim = 8
glimpse_output_dim = 8
patch_width = 6
num_scales = {scales}
core_kind = {core}
[train]
epochs = 2
episodes_per_epoch = 10
[search]
trials = 2
epochs = 1
[paths]
data_dir = {data}
out_dir = {out}
"""


def write_cfg(tmp_path, data, task="translated60", scales=2, core="rnn", name="c.ini"):
    path = tmp_path / name
    path.write_text(TINY.format(task=task, scales=scales, core=core, data=data, out=tmp_path / "out"))
    return path


def test_config_round_trip():
    cfg = parse_config("[train]\nlearning_rate = 0.003\n[meta]\nseed = 9\n")
    again = parse_config(cfg.to_ini())
    assert again == cfg and again.train.learning_rate == 0.003 and again.seed == 9


@pytest.mark.parametrize("text", ["[train]\nlr = 1\n", "[bogus]\n", "[train]\nepochs = many\n",
                                  "[task]\nname = imagenet\n", "[model]\nkind = mlp\n"])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_unknown_key_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[train]\nlearning_rat = 0.1\n")
    assert main(["train", "--config", str(p)]) == 2
    assert "learning_rat" in capsys.readouterr().err


def test_missing_data_exits_3(tmp_path):
    p = write_cfg(tmp_path, tmp_path / "nowhere")
    assert main(["train", "--config", str(p)]) == 3


def test_train_eval_render_preview(tmp_path, mnist_dir):
    cfg = write_cfg(tmp_path, mnist_dir)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg)]) == 0
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert "wall_seconds" in (out / "timing.csv").read_text()
    assert "[meta]" in (out / "manifest.ini").read_text()
    assert main(["eval", "--config", str(cfg)]) == 0
    assert (out / "eval.csv").read_text().startswith("task,model,error_rate")
    assert main(["render", "--config", str(cfg)]) == 0
    assert len(list(out.glob("translated60_2_*.ppm"))) == 8
    assert main(["generate-preview", "--config", str(cfg)]) == 0
    assert (out / "translated60_preview.ppm").exists()


def test_manifest_rerun_is_bit_identical(tmp_path, mnist_dir):
    cfg = write_cfg(tmp_path, mnist_dir)
    assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "a")]) == 0
    manifest = tmp_path / "a" / "manifest.ini"
    assert main(["train", "--config", str(manifest), "--out", str(tmp_path / "b")]) == 0
    for f in ("model.ramckpt", "metrics.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_search_writes_trials(tmp_path, mnist_dir):
    cfg = write_cfg(tmp_path, mnist_dir)
    assert main(["search", "--config", str(cfg)]) == 0
    assert "[train]" in (tmp_path / "out" / "best.ini").read_text()
    text = (tmp_path / "out" / "search.csv").read_text().splitlines()
    assert text[0].startswith("trial,seed,learning_rate,sigma,val_error,status") and len(text) == 3


def test_catch_train_and_eval(tmp_path, mnist_dir):
    cfg = write_cfg(tmp_path, mnist_dir, task="catch", scales=3, core="lstm")
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["eval", "--config", str(cfg)]) == 0
    assert "random" in (tmp_path / "out" / "eval.csv").read_text()
    assert main(["render", "--config", str(cfg)]) == 0


def test_catch_rejects_baseline_models():
    with pytest.raises(ConfigError):
        parse_config("[task]\nname = catch\n[model]\nkind = conv2\n")
