from __future__ import annotations

import json
import math

import numpy as np
import pytest
import tomli

from temt.cli import EXIT_CONFIG, EXIT_OK, main
from temt.envgen import parse_environment, parse_episode
from temt.train import LearningCurve

SMOKE = """
[env]
topology = "square4"
width = 2
height = 3
n_stim = 3
seed = 4
episode_T = 30

[model]
n_g = 16
d_k = 8
gate_hidden = 8

[train]
batch_size = 4
envs_per_batch = 4
T = 20
steps = {steps}
eval_interval = {interval}
eval_envs = 8
eval_T = 20

[analysis]
n_steps = 300
n_shuffles = 5
n_perm = 20
"""


def write_config(tmp_path, steps=4, interval=2, name="smoke.toml"):
    path = tmp_path / name
    path.write_text(SMOKE.format(steps=steps, interval=interval))
    return str(path)


def test_generate_writes_parseable_files(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "g")]) == EXIT_OK
    env = parse_environment((tmp_path / "g" / "env_000.txt").read_bytes())
    ep = parse_episode((tmp_path / "g" / "episode_000.txt").read_bytes())
    assert env.n_nodes == 6 and ep.length == 30
    np.testing.assert_array_equal(ep.observations, env.stimulus_of[ep.node_trace])
    assert "env 0: 6 nodes" in capsys.readouterr().out
    man = tomli.loads((tmp_path / "g" / "manifest.toml").read_text())
    assert man["manifest"]["command"] == "generate" and man["env"]["seed"] == 4


def test_generate_is_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    for d in ("a", "b"):
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / d)]) == EXIT_OK
    for f in ("env_000.txt", "episode_000.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generate_family_shares_structure(tmp_path):
    path = tmp_path / "fam.toml"
    path.write_text(SMOKE.format(steps=1, interval=1).replace("episode_T = 30", "episode_T = 30\nn_envs = 3")
                    .replace("n_stim = 3", "n_stim = 45").replace("width = 2", "width = 5"))
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "f")]) == EXIT_OK
    envs = [parse_environment((tmp_path / "f" / f"env_{i:03d}.txt").read_bytes()) for i in range(3)]
    for e in envs[1:]:
        np.testing.assert_array_equal(e.adjacency, envs[0].adjacency)
    stims = {tuple(e.stimulus_of) for e in envs}
    assert len(stims) == 3


def test_verify_prints_summary_and_passes(capsys):
    assert main(["verify"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == \
        "equivalence max dev < 1e-9: PASS; gradcheck rel err < 1e-4: PASS"


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nbatchsize = 3\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "unknown keys: batchsize" in capsys.readouterr().err
    bad.write_text("[env]\ntopology = \"tri3\"\n")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    bad.write_text("not toml [")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["train", "--config", write_config(tmp_path), "--steps", "-1", "--out", str(tmp_path / "x")]) \
        == EXIT_CONFIG


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "e"),
                 "--checkpoint", str(tmp_path / "none.temt")]) == EXIT_CONFIG
    assert "checkpoint not found" in capsys.readouterr().err


def test_checkpoint_config_mismatch_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path, steps=0)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == EXIT_OK
    other = tmp_path / "other.toml"
    other.write_text(SMOKE.format(steps=0, interval=1).replace("n_g = 16", "n_g = 12"))
    assert main(["eval", "--config", str(other), "--out", str(tmp_path / "e"),
                 "--checkpoint", str(tmp_path / "t" / "checkpoint.temt")]) == EXIT_CONFIG
    assert "n_g" in capsys.readouterr().err


def test_eval_untrained_checkpoint_is_at_chance(tmp_path):
    cfg = tmp_path / "default.toml"
    cfg.write_text("[train]\nsteps = 0\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == EXIT_OK
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "e"),
                 "--checkpoint", str(tmp_path / "t" / "checkpoint.temt")]) == EXIT_OK
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    sigma = math.sqrt(m["chance"] * (1 - m["chance"]) / m["zero_shot_steps"])
    assert abs(m["zero_shot_accuracy"] - m["chance"]) < 3 * sigma


def test_train_smoke_loss_decreases(tmp_path):
    cfg = write_config(tmp_path, steps=200, interval=50)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == EXIT_OK
    curve = LearningCurve.from_csv((tmp_path / "t" / "curve.csv").read_text())
    loss = curve.column("loss")
    assert [r["step"] for r in curve.rows] == [0, 50, 100, 150, 200]
    assert loss[-1] < loss[0]
    timing = (tmp_path / "t" / "timing.csv").read_text().splitlines()
    assert timing[0] == "step,wall_time" and len(timing) == 6


def test_manifest_replays_curve_bit_exactly(tmp_path):
    cfg = write_config(tmp_path, steps=6, interval=3)
    assert main(["train", "--config", cfg, "--seed", "11", "--out", str(tmp_path / "a")]) == EXIT_OK
    manifest = tmp_path / "a" / "manifest.toml"
    man = tomli.loads(manifest.read_text())
    assert man["manifest"]["seeds"]["train"] == 11 and man["train"]["init_seed"] == 11
    assert main(["train", "--config", str(manifest), "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "curve.csv").read_bytes() == (tmp_path / "b" / "curve.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.temt").read_bytes() == (tmp_path / "b" / "checkpoint.temt").read_bytes()


def test_analyze_writes_reports(tmp_path):
    path = tmp_path / "an.toml"
    path.write_text(SMOKE.format(steps=2, interval=2).replace("width = 2", "width = 5").replace("height = 3", "height = 5")
                    .replace("n_stim = 3", "n_stim = 10"))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "t")]) == EXIT_OK
    with pytest.warns(UserWarning):
        code = main(["analyze", "--config", str(path), "--out", str(tmp_path / "a"),
                     "--checkpoint", str(tmp_path / "t" / "checkpoint.temt")])
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "a" / "analysis.json").read_text())
    assert rep["position_unit"]["units"] == 16
    assert {"shuffle_p", "place_score_median"} <= set(rep["memory_neuron"])
    assert "position_corr" in rep["remapping"]
    assert (tmp_path / "a" / "position_unit" / "scores.csv").read_text().startswith("unit,source,grid_score")
    assert (tmp_path / "a" / "position_unit" / "position_unit_0000.pgm").exists()
