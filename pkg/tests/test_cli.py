"""End-to-end CLI runs: every subcommand, artifact layout, exit codes."""

import json

import pytest

from nestvit.cli import main
from nestvit.config import load_run_config

TINY_YAML = """\
kind: classifier
model:
  image_size: 8
  patch_size: 2
  channels: 3
  num_classes: 4
  dims: [4, 4]
  heads: [2, 2]
  repeats: [1, 1]
  ffn_ratio: 4
  aggregation: conv_ln_maxpool@image
  drop_path_rate: 0.0
train:
  base_lr: 3.0e-4
  total_batch_size: 8
  warmup_epochs: 1
  total_epochs: 2
  seed: 0
data:
  source: synth
  n_train: 16
  n_test: 8
  seed: 0
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """A tiny config plus one trained run directory shared by read-only
    subcommand tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY_YAML)
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_train_artifacts_and_stdout(tiny, tmp_path, capsys):
    cfg, _ = tiny
    out = tmp_path / "run2"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("# ") and "16 train / 8 eval images" in lines[0]
    assert lines[1] == "epoch,lr,train_loss,train_acc,eval_acc"
    assert lines[2].startswith("0,")
    assert lines[-1].startswith("final,")
    for name in ("config.yaml", "metrics.csv", "model.ckpt", "loss.png"):
        assert (out / name).is_file(), name
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,lr,train_loss,train_acc,eval_acc"
    assert len(metrics) == 3                     # header + 2 epochs
    # the persisted config replays: normalization stats were resolved
    rc = load_run_config(out / "config.yaml")
    assert rc.model.image_size == 8
    assert rc.data.mean is not None and len(rc.data.mean) == 3


def test_eval_uses_checkpoint(tiny, capsys):
    cfg, run = tiny
    assert main(["eval", "--config", str(cfg),
                 "--ckpt", str(run / "model.ckpt")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("eval_acc,0.")


def test_eval_checkpoint_param_mismatch(tiny, capsys):
    _, run = tiny
    assert main(["eval", "--preset", "nest-micro",
                 "--ckpt", str(run / "model.ckpt")]) == 3
    assert "parameters" in capsys.readouterr().err


def test_interpret_gradcat(tiny, tmp_path, capsys):
    cfg, run = tiny
    out = tmp_path / "g"
    assert main(["interpret", "gradcat", "--config", str(cfg),
                 "--ckpt", str(run / "model.ckpt"), "--index", "3",
                 "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "label," in stdout and "predicted," in stdout
    doc = json.loads((out / "gradcat.json").read_text())
    assert set(doc) == {"target_class", "leaf_block", "steps", "region"}
    assert len(doc["steps"]) == 1                # 2 hierarchies -> 1 step
    step = doc["steps"][0]
    assert step["hierarchy"] == 1 and step["index"] in range(4)
    assert doc["region"]["side"] == 4            # one halving of an 8px image


def test_interpret_cam(tiny, tmp_path, capsys):
    cfg, run = tiny
    out = tmp_path / "c"
    assert main(["interpret", "cam", "--config", str(cfg),
                 "--ckpt", str(run / "model.ckpt"), "--class", "2",
                 "--upsample", "8", "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "target_class,2" in stdout
    assert "cam_mean," in stdout and "cam_minmax," in stdout
    for name in ("cam.pgm", "cam_8.pgm", "cam.png"):
        assert (out / name).is_file(), name
    assert (out / "cam.pgm").read_bytes().startswith(b"P5")


def test_interpret_bbox(tiny, tmp_path, capsys):
    cfg, run = tiny
    out = tmp_path / "b"
    assert main(["interpret", "bbox", "--config", str(cfg),
                 "--ckpt", str(run / "model.ckpt"), "--threshold", "0.4",
                 "--out", str(out)]) == 0
    doc = json.loads((out / "bbox.json").read_text())
    assert set(doc) == {"target_class", "threshold", "bbox", "area"}
    assert doc["threshold"] == 0.4
    if doc["bbox"] is not None:
        x0, y0, x1, y1 = doc["bbox"]                 # inclusive corners
        assert 0 <= x0 <= x1 < 8 and 0 <= y0 <= y1 < 8
        assert doc["area"] == (x1 - x0 + 1) * (y1 - y0 + 1)
    assert (out / "bbox.png").is_file()
    assert json.loads(capsys.readouterr().out.splitlines()[-1]) == doc


def test_interpret_index_out_of_range(tiny, capsys):
    cfg, run = tiny
    assert main(["interpret", "gradcat", "--config", str(cfg),
                 "--ckpt", str(run / "model.ckpt"), "--index", "99"]) == 4
    assert "--index 99" in capsys.readouterr().err


def test_generate_samples(tmp_path, capsys):
    out = tmp_path / "gen"
    assert main(["generate", "--preset", "gen-micro", "--batch", "2",
                 "--out", str(out)]) == 0
    captured = capsys.readouterr()
    lines = captured.out.splitlines()
    assert lines[0] == "blocks,1,4,16,64"
    assert lines[1] == f"samples,2,{out}"
    assert "freshly initialized" in captured.err
    for name in ("sample_0.ppm", "sample_1.ppm", "samples.png", "config.yaml"):
        assert (out / name).is_file(), name
    header = (out / "sample_0.ppm").read_bytes()
    assert header.startswith(b"P6\n16 16\n255\n")


def test_generate_rejects_classifier_config(tiny, capsys):
    cfg, _ = tiny
    assert main(["generate", "--config", str(cfg)]) == 3
    assert "generator config" in capsys.readouterr().err


def test_bench_reports_rate(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["bench", "--preset", "nest-micro", "--iters", "1",
                 "--warmup", "0", "--batch", "2"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("images_per_second,")
    assert float(out.split(",")[1]) > 0


def test_bench_rejects_zero_iters(capsys):
    assert main(["bench", "--preset", "nest-micro", "--iters", "0"]) == 3
    assert "iters must be >= 1" in capsys.readouterr().err


def test_params_plain_and_expect_paper(capsys):
    assert main(["params", "--preset", "nest-micro"]) == 0
    assert capsys.readouterr().out == "nest-micro,3140\n"

    assert main(["params", "--preset", "nest-t-imagenet",
                 "--expect-paper"]) == 0
    fields = capsys.readouterr().out.strip().split(",")
    assert fields[:3] == ["nest-t-imagenet", "17057608", "17000000"]
    assert fields[4] == "within 2% tolerance"

    assert main(["params", "--preset", "nest-t-cifar", "--expect-paper"]) == 1
    assert "OUTSIDE 2% tolerance" in capsys.readouterr().out

    assert main(["params", "--preset", "nest-micro", "--expect-paper"]) == 3
    assert "no published parameter target" in capsys.readouterr().err


def test_ablate_runs_each_variant(tiny, tmp_path, capsys):
    cfg, _ = tiny
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg), "--epochs", "1",
                 "--variants", "conv_ln_maxpool,subsample_2x2",
                 "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "variant,train_acc,eval_acc"
    assert lines[1].startswith("conv_ln_maxpool,")
    assert lines[2].startswith("subsample_2x2,")
    assert lines[3] == f"ablation,2,{out}"
    csv = (out / "ablation.csv").read_text().splitlines()
    assert csv[0] == "variant,train_acc,eval_acc" and len(csv) == 3
    assert (out / "ablation.png").is_file()


def test_usage_errors(tmp_path, capsys, monkeypatch):
    # neither --config nor --preset
    assert main(["params"]) == 3
    assert "one of --config or --preset" in capsys.readouterr().err
    # both at once
    cfg = tmp_path / "t.yaml"
    cfg.write_text(TINY_YAML)
    assert main(["params", "--config", str(cfg), "--preset", "nest-micro"]) == 3
    assert "mutually exclusive" in capsys.readouterr().err
    # unknown preset
    assert main(["params", "--preset", "nest-xl"]) == 3
    assert "unknown preset" in capsys.readouterr().err
    # CIFAR-10 config without a data directory
    monkeypatch.delenv("NEST_CIFAR10_DIR", raising=False)
    assert main(["eval", "--preset", "nest-t-cifar"]) == 4
    assert "NEST_CIFAR10_DIR" in capsys.readouterr().err
    # argparse handles unknown commands / flags with exit 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_seed_and_epoch_overrides(tiny, tmp_path, capsys):
    cfg, _ = tiny
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--out", str(out),
                 "--epochs", "1", "--seed", "7"]) == 0
    assert len((out / "metrics.csv").read_text().splitlines()) == 2
    rc = load_run_config(out / "config.yaml")
    assert rc.train.total_epochs == 1
    assert rc.train.seed == 7 and rc.data.seed == 7
    capsys.readouterr()
