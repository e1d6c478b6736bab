import json

import numpy as np
import pytest
import yaml
from PIL import Image

from vlgrasp.cli import main, read_depth, read_image
from vlgrasp.datasynth import load_dataset

from conftest import tiny_model_config


def _config(tmp_path, task="res", **extra):
    cfg = {"model": tiny_model_config(task, use_depth=task != "res").to_dict(), "lr": 1e-3, "schedule": "constant",
           "batch_size": 4, "max_steps": 3, **extra}
    path = tmp_path / f"{task}.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen-data", "--count", "10", "--seed", "4", "--out", str(out)]) == 0
    return out


def test_gen_data_writes_splits(dataset, capsys):
    man = json.loads((dataset / "manifest.json").read_text())
    assert man["count"] == 10 and man["splits"] == {"train": 8, "val": 1, "test": 1}
    assert len(load_dataset(dataset, "train")) == 8


def test_gen_data_with_spec_file(tmp_path):
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({"num_objects": 3, "duplicates": 2, "split_fractions": [0.5, 0.5, 0.0]}))
    assert main(["gen-data", "--spec", str(spec), "--count", "4", "--out", str(tmp_path / "d")]) == 0
    assert len(load_dataset(tmp_path / "d", "val")) == 2
    spec.write_text(yaml.safe_dump({"colour": "red"}))
    assert main(["gen-data", "--spec", str(spec), "--count", "4", "--out", str(tmp_path / "e")]) == 2


def test_train_eval_audit_predict(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    assert main(["train", "--task", "res", "--config", str(_config(tmp_path)), "--data", str(dataset),
                 "--seed", "1", "--out", str(out)]) == 0
    ckpt = out / "checkpoint.npz"
    assert ckpt.exists() and len(json.loads((out / "losses.json").read_text())) == 3

    report = tmp_path / "report.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--split", "train", "--json", str(report)]) == 0
    assert json.loads(report.read_text())["samples"] == 8

    capsys.readouterr()
    assert main(["audit", "--checkpoint", str(ckpt)]) == 0
    text = capsys.readouterr().out
    assert "tunable / frozen" in text and "bitwise identical" in text

    sample = load_dataset(dataset, "test")[0]
    img = tmp_path / "scene.png"
    Image.fromarray((sample.image * 255).round().astype(np.uint8)).save(img)
    assert main(["predict", "--checkpoint", str(ckpt), "--image", str(img), "--text", sample.expression,
                 "--out", str(tmp_path / "pred")]) == 0
    assert (tmp_path / "pred" / "scene_mask.png").exists()
    assert (tmp_path / "pred" / "predictions.jsonl").read_text().startswith('{"sample_id": "scene"')


def test_train_on_synthetic_config_with_depth(tmp_path):
    cfg = _config(tmp_path, "rga", rga_actions=4, synthetic={"count": 4, "seed": 2})
    out = tmp_path / "rga"
    assert main(["train", "--task", "rga", "--config", str(cfg), "--out", str(out)]) == 0
    depth = tmp_path / "depth.npy"
    np.save(depth, np.full((64, 64), 0.6, np.float32))
    img = tmp_path / "scene.npy"
    np.save(img, np.random.default_rng(0).random((64, 64, 3)).astype(np.float32))
    assert main(["predict", "--checkpoint", str(out / "checkpoint.npz"), "--image", str(img), "--text",
                 "the red cube", "--out", str(tmp_path / "p")]) == 3  # depth missing
    assert main(["predict", "--checkpoint", str(out / "checkpoint.npz"), "--image", str(img), "--depth",
                 str(depth), "--text", "the red cube", "--out", str(tmp_path / "p")]) == 0
    # generated data is not stored with the checkpoint, so eval needs --data
    assert main(["eval", "--checkpoint", str(out / "checkpoint.npz")]) == 2


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("lr: [1, 2\n")
    assert main(["train", "--task", "res", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(yaml.safe_dump({"learning_rate": 1.0, "synthetic": {"count": 2}}))
    assert main(["train", "--task", "res", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(yaml.safe_dump({"lr": 1e-3}))
    assert main(["train", "--task", "res", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--task", "res", "--config", str(tmp_path / "missing.yaml"), "--out", "o"]) == 2
    assert main(["train", "--task", "rgs", "--config", str(_config(tmp_path, "res", synthetic={"count": 2})),
                 "--out", str(tmp_path / "o")]) == 2  # rgs without depth


def test_runtime_errors_exit_3(tmp_path):
    assert main(["audit", "--checkpoint", str(tmp_path / "none.npz")]) == 3
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not an archive")
    assert main(["eval", "--checkpoint", str(junk), "--data", str(tmp_path)]) == 3


def test_image_and_depth_readers(tmp_path):
    d = (np.arange(16, dtype=np.uint16).reshape(4, 4) * 100)
    Image.fromarray(d).save(tmp_path / "d.png")
    assert np.allclose(read_depth(tmp_path / "d.png"), d / 1000.0)
    np.save(tmp_path / "i.npy", np.full((2, 2, 3), 255.0))
    assert np.allclose(read_image(tmp_path / "i.npy"), 1.0)


def test_bad_arguments_exit_with_usage():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--task", "xyz", "--config", "c", "--out", "o"])
    assert exc.value.code == 2
