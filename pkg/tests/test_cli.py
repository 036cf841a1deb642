import json
import os

import numpy as np
import pytest
from PIL import Image

from lanepe import lane_net
from lanepe.cli import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    RunManifest,
    TrainSettings,
    UsageError,
    cmd_ablate,
    cmd_eval,
    cmd_generate,
    cmd_train,
    cmd_visualize,
    main,
    parse_config_text,
    prediction_overlay,
    to_gray,
)
from lanepe.synthetic_data import SceneSpec

FAST = dict(epochs=2, batch_size=4, resa_iterations=2, encoder_channels=(4, 8))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cmd_generate(root, 10, SceneSpec(seed=3, image_noise=0.05))
    return root


def data_files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_config_text_format():
    cfg = parse_config_text("# comment\nepochs = 5\nvariant = ape  # trailing\nlr=0.1\nname = plain text\n")
    assert cfg == {"epochs": 5, "variant": "ape", "lr": 0.1, "name": "plain text"}
    with pytest.raises(UsageError, match=":2:"):
        parse_config_text("a = 1\nbroken line\n")


def test_settings_layering(tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("epochs = 7\nlr = 0.5\n")
    s = TrainSettings.from_layers({"epochs": 3}, parse_config_text(conf.read_text()), {"lr": 0.01})
    assert (s.epochs, s.lr, s.batch_size, s.threshold_px) == (7, 0.01, 12, 20.0)
    with pytest.raises(UsageError, match="unknown setting"):
        TrainSettings.from_layers({"epoch": 3})
    with pytest.raises(UsageError, match="variant"):
        TrainSettings(variant="coord")


def test_generate_contract(dataset, tmp_path):
    assert len(list((dataset / "images").iterdir())) == 10
    assert len(list((dataset / "masks").iterdir())) == 10
    assert len((dataset / "labels.json").read_text().splitlines()) == 10
    m = RunManifest.read(dataset / "manifest.json")
    assert m.command == "generate" and m.extra["count"] == 10 and m.seed == 3

    again = tmp_path / "again"
    cmd_generate(again, 10, SceneSpec(seed=3, image_noise=0.05))
    assert data_files(again) == data_files(dataset)


def test_generate_empty(tmp_path):
    cmd_generate(tmp_path, 0)
    assert (tmp_path / "labels.json").read_text() == ""
    assert RunManifest.read(tmp_path / "manifest.json").extra["count"] == 0


def test_generate_cli_errors(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("num_lanes = 9\n")
    assert main(["generate", "--out", str(tmp_path / "d"), "--count", "2", "--spec", str(spec)]) == EXIT_USAGE
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["generate", "--out", str(blocker / "sub"), "--count", "1"]) == EXIT_DATA


def test_train_deterministic_and_outputs(dataset, tmp_path):
    s = TrainSettings(variant="rpe_ape", **FAST)
    a = cmd_train(dataset, tmp_path / "a", s)
    b = cmd_train(dataset, tmp_path / "b", s)
    assert a.series[-1]["loss"] == b.series[-1]["loss"]
    assert a.final_accuracy == b.final_accuracy
    rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,accuracy" and len(rows) == 3
    assert (tmp_path / "a" / "checkpoint.npz").is_file()
    assert a.extra["train_scenes"] == 8 and a.extra["val_scenes"] == 2


def test_train_zero_epochs_is_initialisation(dataset, tmp_path):
    s = TrainSettings(variant="ape", **{**FAST, "epochs": 0})
    cmd_train(dataset, tmp_path, s)
    state = lane_net.load_checkpoint(tmp_path / "checkpoint.npz")
    init = lane_net.build(state.net.cfg)
    for k, t in init.parameters().items():
        np.testing.assert_array_equal(state.net.parameters()[k].data, t.data)


def test_train_manifest_rerun_via_cli(dataset, tmp_path):
    args = ["train", "--data", str(dataset), "--out", str(tmp_path / "a"), "--epochs", "2", "--variant", "ape", "--seed", "4"]
    conf = tmp_path / "fast.txt"
    conf.write_text("batch_size = 4\nresa_iterations = 2\nencoder_channels = [4, 8]\n")
    assert main([*args, "--config", str(conf)]) == EXIT_OK
    first = RunManifest.read(tmp_path / "a" / "manifest.json")
    assert first.config["batch_size"] == 4 and first.seed == 4
    assert main(["train", "--manifest", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == EXIT_OK
    second = RunManifest.read(tmp_path / "b" / "manifest.json")
    assert second.final_accuracy == first.final_accuracy
    assert second.series == first.series


def test_train_usage_and_data_errors(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--variant", "coord"]) == EXIT_USAGE
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["train", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_train_rejects_mask_label_mismatch(tmp_path):
    cmd_generate(tmp_path, 2, SceneSpec(num_lanes=2))
    mask_path = tmp_path / "masks" / "00000.pgm"
    m = np.asarray(Image.open(mask_path)).copy()
    m[0, 0] = 5
    Image.fromarray(m).save(mask_path, format="PPM")
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--epochs", "0"]) == EXIT_DATA


def test_eval_bypass_and_threshold_zero(dataset, tmp_path):
    assert cmd_eval(dataset / "labels.json", 0, bypass=True).accuracy == 1.0
    out = tmp_path / "r.json"
    assert main(["eval", "--labels", str(dataset / "labels.json"), "--bypass", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["accuracy"] == 1.0


def test_eval_errors(dataset, tmp_path):
    assert main(["eval", "--labels", str(tmp_path / "nope.json"), "--bypass"]) == EXIT_DATA
    bad = tmp_path / "bad.json"
    bad.write_text('{"lanes": [[1]], "h_samples": [1, 2], "raw_file": "x"}\n')
    assert main(["eval", "--labels", str(bad), "--bypass"]) == EXIT_DATA
    assert main(["eval", "--labels", str(dataset / "labels.json")]) == EXIT_USAGE


def test_eval_checkpoint_resolves_images_from_label_dir(dataset, tmp_path, monkeypatch):
    cmd_train(dataset, tmp_path / "run", TrainSettings(**FAST))
    monkeypatch.chdir(tmp_path)
    report = cmd_eval(dataset / "labels.json", 20, checkpoint=tmp_path / "run" / "checkpoint.npz")
    assert len(report.per_clip) == 10 and 0 <= report.accuracy <= 1


def test_ablate_shape_and_errors(dataset, tmp_path):
    rows = cmd_ablate(dataset, tmp_path, [0], TrainSettings(**FAST))
    assert [r.name for r in rows] == ["no-RESA", "RESA", "RESA+APE"]
    assert all(np.isfinite(r.mean) and r.sd == 0.0 for r in rows)
    csv_lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(csv_lines) == 4 and csv_lines[0].startswith("setting,mean,sd,seed0")
    assert "RESA+APE" in (tmp_path / "ablation.txt").read_text()
    with pytest.raises(UsageError):
        cmd_ablate(dataset, tmp_path, [], TrainSettings(**FAST))
    assert main(["ablate", "--data", str(dataset), "--out", str(tmp_path), "--seeds"]) == EXIT_USAGE


def test_gray_normalisation():
    assert (to_gray(np.full((3, 4, 2), 5.0)) == 128).all()
    g = to_gray(np.arange(6.0).reshape(2, 3, 1))
    assert g.min() == 0 and g.max() == 255
    over = prediction_overlay(np.ones((2, 2, 3)), np.array([[0, 1], [0, 0]]))
    assert over.tolist() == [[127, 255], [127, 127]]


def test_visualize_stage_count_and_zero_net(dataset, tmp_path):
    cfg = lane_net.NetworkConfig(variant="rpe_ape", encoder_channels=(4, 8), resa=lane_net.ResaConfig(iterations=2))
    state = lane_net.new_train_state(lane_net.build(cfg))
    for t in state.net.parameters().values():
        t.data[:] = 0.0
    lane_net.save_checkpoint(tmp_path / "zero.npz", state)
    paths = cmd_visualize(tmp_path / "zero.npz", dataset / "images" / "00000.png", tmp_path / "vis")
    assert [p.name for p in paths] == ["01_encoder.png", "02_resa.png", "03_position.png", "04_decoder.png", "05_prediction.png"]
    for p in paths[:-1]:
        assert (np.asarray(Image.open(p)) == 128).all()
    assert main(["visualize", "--checkpoint", str(tmp_path / "zero.npz"), "--image", str(tmp_path / "none.png"),
                 "--out", str(tmp_path / "v2")]) == EXIT_DATA


def test_train_writes_only_declared_outputs(dataset, tmp_path):
    cmd_train(dataset, tmp_path, TrainSettings(**FAST))
    assert sorted(os.listdir(tmp_path)) == ["checkpoint.npz", "manifest.json", "metrics.csv"]
