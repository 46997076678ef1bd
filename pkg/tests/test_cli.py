import csv
import json

import numpy as np
import pytest

from social_mamba.cli import cli_dispatch
from social_mamba.io import read_scenes
from social_mamba.model import ModelConfig, SocialMamba
from social_mamba.training import load_checkpoint, save_checkpoint

TINY_MODEL = ["--d-model", "8", "--d-state", "4", "--conv-kernel", "2", "--expand", "1", "--k", "3",
              "--t-obs", "4", "--t-pred", "3", "--max-agents", "4"]
TINY_TRAIN = ["--epochs", "2", "--batch-size", "4", "--val-fraction", "0.25"]


@pytest.fixture
def scene_file(tmp_path):
    path = tmp_path / "scenes.jsonl"
    code = cli_dispatch(["generate", "--out", str(path), "--n-scenes", "8", "--t-obs", "4", "--t-pred", "3",
                         "--min-agents", "2", "--max-agents", "3", "--seed", "2"])
    assert code == 0
    return path


def test_generate_is_seeded(tmp_path, scene_file):
    again = tmp_path / "again.jsonl"
    cli_dispatch(["generate", "--out", str(again), "--n-scenes", "8", "--t-obs", "4", "--t-pred", "3",
                  "--min-agents", "2", "--max-agents", "3", "--seed", "2"])
    assert again.read_bytes() == scene_file.read_bytes()
    assert len(read_scenes(scene_file)) == 8


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 4\nsynth:\n  n_scenes: 3\n  t_obs: 4\n  t_pred: 2\n")
    out = tmp_path / "s.jsonl"
    assert cli_dispatch(["generate", "--config", str(cfg), "--out", str(out), "--n-scenes", "5"]) == 0
    scenes = read_scenes(out)
    assert len(scenes) == 5 and scenes[0].t_pred == 2


def test_train_then_eval(tmp_path, scene_file, capsys):
    out = tmp_path / "run"
    assert cli_dispatch(["train", "--scenes", str(scene_file), "--out-dir", str(out), *TINY_MODEL,
                         *TINY_TRAIN]) == 0
    with open(out / "loss.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    csv_path = tmp_path / "eval.csv"
    assert cli_dispatch(["eval", "--checkpoint", str(out / "checkpoint.json"), "--scenes", str(scene_file),
                         "--csv", str(csv_path)]) == 0
    assert "minADE_3=" in capsys.readouterr().out
    assert csv_path.read_text().splitlines()[0] == "scene_id,min_ade,min_fde"


def test_ablate_without_ego_and_goal(tmp_path, scene_file, capsys):
    out = tmp_path / "abl"
    code = cli_dispatch(["ablate", "--scenes", str(scene_file), "--out-dir", str(out), "--no-ego", "--no-goal",
                         *TINY_MODEL, *TINY_TRAIN])
    assert code == 0
    assert "streams=temporal " in capsys.readouterr().out
    model = load_checkpoint(str(out / "checkpoint.json"))
    assert model.config.streams == ["temporal"]
    assert (out / "eval.csv").exists()


def test_eval_of_zero_heads_reports_ego_displacement(tmp_path, scene_file, capsys):
    model = SocialMamba(ModelConfig(d_model=8, d_state=4, conv_kernel=2, expand=1, k=3, t_obs=4, t_pred=3))
    model.decoder.zero_heads()
    ckpt = tmp_path / "zero.json"
    save_checkpoint(str(ckpt), model)
    csv_path = tmp_path / "e.csv"
    assert cli_dispatch(["eval", "--checkpoint", str(ckpt), "--scenes", str(scene_file), "--csv", str(csv_path)]) == 0
    with open(csv_path) as f:
        rows = {r["scene_id"]: r for r in csv.DictReader(f)}
    for scene in read_scenes(scene_file):
        ego = next(a for a in scene.agents if a.agent_id == scene.ego_id).positions
        expected = np.linalg.norm(ego[-1] - ego[scene.t_obs - 1])
        assert float(rows[scene.scene_id]["min_fde"]) == pytest.approx(expected, rel=1e-12)


def test_bench_and_plots(tmp_path, scene_file):
    bench = tmp_path / "b.csv"
    assert cli_dispatch(["bench", "--out", str(bench), "--agent-counts", "4", "8", "--reps", "3",
                         "--d-model", "8", "--d-state", "4", "--n-heads", "2"]) == 0
    assert cli_dispatch(["plot", "--csv", str(bench), "--out", str(tmp_path / "b.png")]) == 0
    assert (tmp_path / "b.png").read_bytes()[:4] == b"\x89PNG"
    run = tmp_path / "run"
    cli_dispatch(["train", "--scenes", str(scene_file), "--out-dir", str(run), *TINY_MODEL, *TINY_TRAIN])
    assert cli_dispatch(["plot", "--csv", str(run / "loss.csv"), "--out", str(tmp_path / "l.png")]) == 0


def test_malformed_scene_file_names_the_line(tmp_path, scene_file, capsys):
    lines = scene_file.read_text().splitlines()
    lines[3] = lines[3][:-5]
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    code = cli_dispatch(["train", "--scenes", str(bad), *TINY_MODEL, *TINY_TRAIN, "--out-dir", str(tmp_path)])
    assert code != 0
    assert "line 4" in capsys.readouterr().err


def test_unknown_flag_and_unknown_setting(tmp_path, capsys):
    assert cli_dispatch(["generate", "--out", str(tmp_path / "x"), "--bogus"]) != 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"n_scenes": 1, "wat": 3}}))
    assert cli_dispatch(["generate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1
    assert "wat" in capsys.readouterr().err


def test_missing_file_is_a_clean_error(tmp_path, capsys):
    assert cli_dispatch(["eval", "--checkpoint", str(tmp_path / "none.json"), "--scenes", "x"]) == 1
    assert "error" in capsys.readouterr().err
