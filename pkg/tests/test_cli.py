import hashlib
import json
import shutil

import numpy as np
import pytest
from PIL import Image

from gsdeform.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from gsdeform.data import dataset_digest
from gsdeform.training import TrainConfig

SYNTH = ["synth", "--preset", "sphere-translate", "--frames", "4", "--resolution", "16"]
TRAIN_FLAGS = ["--iters", "6", "--warmup", "3", "--n-init", "40", "--densify-from", "4", "--densify-until", "100", "--densify-interval", "2"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(SYNTH + ["--out", str(data), "--seed", "1"]) == EXIT_OK
    out = root / "run"
    assert main(["train", "--data", str(data), "--out", str(out)] + TRAIN_FLAGS) == EXIT_OK
    return data, out


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(SYNTH + ["--out", str(tmp_path / name), "--seed", "1"]) == EXIT_OK
    assert dataset_digest(tmp_path / "a") == dataset_digest(tmp_path / "b")
    assert (tmp_path / "a" / "transforms_train.json").exists()


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth"])
    assert exc.value.code == EXIT_USAGE
    assert "--out" in capsys.readouterr().err


def test_unknown_preset_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--preset", "nope", "--out", "x"])
    assert exc.value.code == EXIT_USAGE


def test_train_writes_outputs(run):
    _, out = run
    for name in ("final.gsdw", "final.json", "metrics.csv", "config.txt", "train_renders.json"):
        assert (out / name).exists()
    rows = (out / "metrics.csv").read_text().splitlines()
    iters = [int(r.split(",")[0]) for r in rows[1:]]
    assert iters == sorted(iters)


def test_train_zero_iterations_from_config_file(run, tmp_path):
    data, _ = run
    cfg = tmp_path / "c.txt"
    cfg.write_text("n_init = 30\nseed = 4  # comment\n")
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--config", str(cfg), "--iters", "0"]) == 0
    meta = json.loads((tmp_path / "o" / "final.json").read_text())
    assert meta["iteration"] == 0 and meta["config"]["seed"] == 4


def test_train_rejects_unknown_config_key(run, tmp_path):
    data, _ = run
    cfg = tmp_path / "c.txt"
    cfg.write_text("bogus = 1\n")
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == EXIT_USAGE


def test_train_missing_dataset_is_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_every_config_key_has_a_flag():
    from gsdeform.cli import build_parser

    help_text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for key in TrainConfig.keys():
        assert f"--{key.replace('_', '-')}" in help_text
    assert "--lambda" in help_text


def test_render_matches_logged_train_hash(run, tmp_path):
    data, out = run
    logged = json.loads((out / "train_renders.json").read_text())
    entry = logged["1"]
    png = tmp_path / "r.png"
    assert main(["render", str(out / "final.gsdw"), "--time", str(entry["t"]), "--camera", "1", "--out", str(png)]) == 0
    pixels = np.asarray(Image.open(png).convert("RGB"), dtype=np.uint8)
    assert hashlib.sha256(pixels.tobytes()).hexdigest() == entry["sha256"]


def test_render_is_byte_deterministic(run, tmp_path):
    _, out = run
    for name in ("a.png", "b.png"):
        assert main(["render", str(out / "final.gsdw"), "--time", "0", "--out", str(tmp_path / name)]) == 0
    assert sha(tmp_path / "a.png") == sha(tmp_path / "b.png")


def test_render_several_times_and_raw(run, tmp_path):
    _, out = run
    dest = tmp_path / "frames"
    assert main(["render", str(out / "final.gsdw"), "--time", "0", "0.5", "--raw", "--out", str(dest)]) == 0
    assert sorted(p.name for p in dest.iterdir()) == ["t_0.0000.npy", "t_0.0000.png", "t_0.5000.npy", "t_0.5000.png"]
    assert np.load(dest / "t_0.5000.npy").shape == (16, 16, 3)


def test_render_from_pose_file(run, tmp_path):
    data, out = run
    doc = json.loads((data / "transforms_train.json").read_text())
    pose = tmp_path / "pose.json"
    pose.write_text(json.dumps({"transform_matrix": doc["frames"][0]["transform_matrix"],
                                "camera_angle_x": doc["camera_angle_x"], "width": 24, "height": 20}))
    assert main(["render", str(out / "final.gsdw"), "--time", "0.1", "--pose", str(pose), "--out", str(tmp_path / "p.png")]) == 0
    assert Image.open(tmp_path / "p.png").size == (24, 20)


@pytest.mark.parametrize("t", ["1.5", "-0.1", "nan"])
def test_render_time_out_of_range(run, tmp_path, t):
    _, out = run
    code = main(["render", str(out / "final.gsdw"), "--time", t, "--out", str(tmp_path / "x.png")])
    assert code == EXIT_USAGE
    assert not (tmp_path / "x.png").exists()


def test_render_bad_camera_index(run, tmp_path):
    _, out = run
    assert main(["render", str(out / "final.gsdw"), "--time", "0", "--camera", "99", "--out", str(tmp_path / "x.png")]) == EXIT_USAGE


def test_eval_writes_table_and_csv(run, tmp_path, capsys):
    data, out = run
    csv_path = tmp_path / "e.csv"
    assert main(["eval", str(out / "final.gsdw"), str(data), "--out", str(csv_path)]) == 0
    printed = capsys.readouterr().out
    assert "mean" in printed
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "name,t,psnr,ssim" and len(lines) > 1


def test_eval_empty_test_split(run, tmp_path, capsys):
    data, out = run
    bare = tmp_path / "bare"
    shutil.copytree(data, bare)
    (bare / "transforms_test.json").unlink()
    assert main(["eval", str(out / "final.gsdw"), str(bare)]) == EXIT_OK
    assert "nothing to evaluate" in capsys.readouterr().out


def test_eval_resolution_mismatch(run, tmp_path, capsys):
    _, out = run
    other = tmp_path / "big"
    assert main(SYNTH[:-1] + ["24", "--out", str(other)]) == 0
    assert main(["eval", str(out / "final.gsdw"), str(other)]) == EXIT_DATA
    assert "trained at 16x16" in capsys.readouterr().err


def test_resume_continues_iterations(run, tmp_path):
    data, out = run
    dest = tmp_path / "more"
    assert main(["train", "--data", str(data), "--out", str(dest), "--resume", str(out / "final.gsdw"), "--iters", "8"]) == 0
    assert json.loads((dest / "final.json").read_text())["iteration"] == 8


def test_thread_cap_validation(run, tmp_path, monkeypatch):
    monkeypatch.setenv("GSD_THREADS", "zero")
    assert main(SYNTH + ["--out", str(tmp_path / "d")]) == EXIT_USAGE
