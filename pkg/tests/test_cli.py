import csv

import numpy as np
import pytest

from softprune import graph as G
from softprune.checkpoint import load_checkpoint, save_checkpoint
from softprune.cli import main
from softprune.prune import PruneConfig, apply_mask, select_mask, write_mask

SMALL = """
[experiment]
preset = {preset}
out = {out}
seed = 1

[data]
classes = 4
per_class = 15
channels = 2
height = 6
width = 6

[train]
epochs = 3
batch_size = 16
learning_rate = 0.05
checkpoint_every = 1

[prune]
rate = 0.5
"""


def write_config(tmp_path, preset="srfp", extra="", name="c.ini"):
    path = tmp_path / name
    path.write_text(SMALL.format(preset=preset, out=tmp_path / f"out_{preset}") + extra)
    return path


def read_rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def test_train_writes_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    out = tmp_path / "out_srfp"
    for name in ("reports.csv", "schedule.csv", "mask.txt", "final.ckpt"):
        assert (out / name).is_file()
    assert len(list((out / "checkpoints").iterdir())) == 3
    rows = read_rows(out / "reports.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert float(rows[0]["accuracy_drop"]) == 0.0
    assert "final test accuracy" in capsys.readouterr().out


def test_train_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "reports.csv").read_bytes() == (tmp_path / "b" / "reports.csv").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_presets_differ_only_in_schedule(tmp_path):
    for preset in ("sfp", "asrfp"):
        assert main(["train", "--config", str(write_config(tmp_path, preset, name=f"{preset}.ini"))]) == 0
    sfp = read_rows(tmp_path / "out_sfp" / "reports.csv")
    asrfp = read_rows(tmp_path / "out_asrfp" / "reports.csv")
    # same seed, data and first epoch of training; only alpha and rate differ
    assert sfp[0]["train_loss"] == asrfp[0]["train_loss"]
    assert sfp[0]["test_accuracy_before_prune"] == asrfp[0]["test_accuracy_before_prune"]
    assert [float(r["alpha"]) for r in sfp] == [0.0, 0.0, 0.0]
    assert float(asrfp[0]["alpha"]) == 1.0 and float(asrfp[0]["prune_rate"]) == 0.0


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path)
    cfg.write_text(cfg.read_text().replace("rate = 0.5", "rate = 0.5\nlearning_rat = 3"))
    assert main(["train", "--config", str(cfg)]) == 2
    assert "prune.learning_rat" in capsys.readouterr().err


def test_preset_constraint(tmp_path, capsys):
    cfg = write_config(tmp_path, "sfp", extra="\n[decay]\nkind = exponential\n")
    assert main(["schedule", "--config", str(cfg)]) == 2
    assert "decay.kind" in capsys.readouterr().err


def test_missing_dataset_names_key(tmp_path, capsys):
    cfg = write_config(tmp_path)
    text = cfg.read_text().replace("classes = 4", f"source = csv\ntrain_csv = {tmp_path / 'nope.csv'}\n"
                                   f"test_csv = {tmp_path / 'nope.csv'}\nclasses = 4")
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg)]) != 0
    assert "data.train_csv" in capsys.readouterr().err


def test_flops(capsys):
    assert main(["flops", "--arch", "resnet56", "--rate", "0.2"]) == 0
    out = capsys.readouterr().out
    pruned = float(out.split("pruned ")[-1].rstrip("%\n"))
    total = float(out.split("pruned FLOPs")[1].split()[0])
    assert abs(pruned - 28.4) <= 1.0 and total == pytest.approx(8.98e7, rel=0.02)

    main(["flops", "--arch", "resnet110", "--rate", "0.4"])
    assert abs(float(capsys.readouterr().out.split("pruned ")[-1].rstrip("%\n")) - 52.3) <= 1.0
    main(["flops", "--arch", "resnet20"])
    assert "pruned 0.00%" in capsys.readouterr().out


def test_flops_unknown_arch(capsys):
    assert main(["flops", "--arch", "vgg16"]) == 2
    assert "vgg16" in capsys.readouterr().err


def schedule_rows(tmp_path, capsys, extra, preset):
    cfg = write_config(tmp_path, preset, extra=extra)
    cfg.write_text(cfg.read_text().replace("epochs = 3", "epochs = 11"))
    assert main(["schedule", "--config", str(cfg)]) == 0
    capsys.readouterr()
    return read_rows(tmp_path / f"out_{preset}" / "schedule.csv")


def test_schedule_linear(tmp_path, capsys):
    rows = schedule_rows(tmp_path, capsys, "\n[decay]\nkind = linear\n", "srfp")
    assert len(rows) == 11
    assert float(rows[5]["alpha"]) == 0.5


def test_schedule_constant_zero(tmp_path, capsys):
    rows = schedule_rows(tmp_path, capsys, "", "sfp")
    assert all(float(r["alpha"]) == 0.0 for r in rows)


def test_compact_then_eval(tmp_path, capsys):
    cfg = write_config(tmp_path)
    model = G.make_toy_cnn((4, 8), classes=4, input_shape=(2, 6, 6), pool=2).init_params(3)
    mask = select_mask(model, PruneConfig(0.5))
    save_checkpoint(tmp_path / "m.ckpt", model)
    write_mask(tmp_path / "mask.txt", mask)
    assert main(["compact", "--checkpoint", str(tmp_path / "m.ckpt"), "--mask", str(tmp_path / "mask.txt"),
                 "--out", str(tmp_path / "small.ckpt")]) == 0
    small = load_checkpoint(tmp_path / "small.ckpt")
    assert small.params["conv2"]["weight"].shape == (4, 2, 3, 3)

    masked = model.copy()
    apply_mask(masked, mask, 0.0)
    x = np.random.default_rng(0).random((100, 2, 6, 6))
    a, b = G.forward(masked, x)[0], G.forward(small, x)[0]
    assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(a)

    capsys.readouterr()
    main(["eval", "--checkpoint", str(tmp_path / "small.ckpt"), "--config", str(cfg)])
    acc_small = capsys.readouterr().out
    main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--config", str(cfg), "--mask", str(tmp_path / "mask.txt")])
    assert capsys.readouterr().out == acc_small


def test_compact_mismatched_mask(tmp_path, capsys):
    model = G.make_toy_cnn((4, 8), classes=4, input_shape=(2, 6, 6)).init_params(0)
    save_checkpoint(tmp_path / "m.ckpt", model)
    (tmp_path / "mask.txt").write_text("layer1.0.conv1: 0\n")
    assert main(["compact", "--checkpoint", str(tmp_path / "m.ckpt"), "--mask", str(tmp_path / "mask.txt"),
                 "--out", str(tmp_path / "x.ckpt")]) == 1
    assert "StateError" in capsys.readouterr().err
