"""Command-line interface: artifacts, determinism, exit codes."""
import csv
import json
import shutil

import numpy as np
import pytest

from filterfusion import simenv, trainer
from filterfusion.cli import ExperimentConfig, main, update_manifest
from filterfusion.fusion import build_architecture
from filterfusion.task import TASKS

TINY_TRAIN = {
    "schedule": [2, 3], "epochs": 1, "steps_per_epoch": 2, "batch_size": 2,
    "pretrain_steps": 6, "measurement_steps": 6, "n_particles": 8,
}


def _write_config(path, **overrides):
    cfg = {"task": "push", "n_traj": 5, "n_steps": 24, "n_test": 2,
           "seed": 0, "out_dir": str(path.parent),
           "train": {**trainer.TrainConfig().to_dict(), **TINY_TRAIN}}
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> pretrain -> train, shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    config = _write_config(root / "exp.json")
    train_data = root / "train.dfds"
    test_data = root / "test.dfds"
    assert main(["generate", "--task", "push", "--traj", "5", "--steps",
                 "24", "--blackout", "0.4", "--seed", "7", "--out",
                 str(train_data)]) == 0
    assert main(["generate", "--task", "push", "--traj", "2", "--steps",
                 "24", "--blackout", "0.4", "--seed", "8", "--out",
                 str(test_data)]) == 0
    run = root / "run"
    assert main(["pretrain", "--data", str(train_data), "--arch",
                 "crossmodal-ekf", "--config", str(config), "--out",
                 str(run)]) == 0
    assert main(["train", "--data", str(train_data), "--arch",
                 "crossmodal-ekf", "--init", str(run / "pretrained.dfck"),
                 "--config", str(config), "--out", str(run)]) == 0
    return root


# ---------------------------------------------------------------------------
# generate


def test_generate_file_echoes_flags_and_prints_fractions(tmp_path, capsys):
    out = tmp_path / "d.dfds"
    rc = main(["generate", "--task", "push", "--traj", "3", "--steps", "10",
               "--blackout", "0.4", "--seed", "7", "--out", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "contact fraction" in printed
    assert "blackout fraction" in printed
    ds = simenv.read_dataset(out)
    assert ds.task.name == "push"
    assert len(ds.trajectories) == 3
    assert ds.trajectories[0].n_steps == 10


def test_generate_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.dfds", tmp_path / "b.dfds"
    flags = ["generate", "--task", "door", "--traj", "2", "--steps", "8",
             "--blackout", "0.2", "--seed", "3", "--out"]
    assert main(flags + [str(a)]) == 0
    assert main(flags + [str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# exit codes


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["generate", "--task", "bogus", "--traj", "1", "--steps",
                 "2", "--out", str(tmp_path / "x.dfds")]) == 1
    assert "invalid choice" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["generate"]) == 1


def test_runtime_errors_exit_two(tmp_path, capsys):
    rc = main(["pretrain", "--data", str(tmp_path / "missing.dfds"),
               "--arch", "feature-ekf", "--out", str(tmp_path / "run")])
    assert rc == 2
    assert "not found" in capsys.readouterr().err


def test_blackout_out_of_range_exits_two(tmp_path, capsys):
    rc = main(["generate", "--task", "push", "--traj", "1", "--steps", "2",
               "--blackout", "1.5", "--out", str(tmp_path / "x.dfds")])
    assert rc == 2
    assert "outside" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# pretrain / train


def test_pipeline_writes_checkpoints_logs_and_manifest(pipeline):
    run = pipeline / "run"
    for name in ("pretrained.dfck", "trained.dfck", "train_state.dfck",
                 "loss_log.json", "pretrain_log.json"):
        assert (run / name).exists(), name
    manifest = json.loads((run / "manifest.json").read_text())
    assert "trained.dfck" in manifest
    assert "loss_log.json" in manifest
    history = json.loads((run / "loss_log.json").read_text())
    assert [h["length"] for h in history] == [2, 3]
    ckpt = trainer.load_checkpoint(run / "trained.dfck")
    assert ckpt.meta["architecture"] == "crossmodal-ekf"
    assert ckpt.meta["stage"] == "trained"


def test_train_accepts_every_architecture_on_one_dataset(pipeline,
                                                         tmp_path):
    config = pipeline / "exp.json"
    for arch in ("lstm-baseline", "feature-pf"):
        out = tmp_path / arch
        rc = main(["train", "--data", str(pipeline / "train.dfds"),
                   "--arch", arch, "--config", str(config),
                   "--out", str(out)])
        assert rc == 0
        assert (out / "trained.dfck").exists()


def test_resume_reproduces_uninterrupted_run(pipeline, tmp_path):
    train_data = str(pipeline / "train.dfds")
    init = str(pipeline / "run" / "pretrained.dfck")
    full_cfg = _write_config(tmp_path / "full.json")
    short_cfg = _write_config(
        tmp_path / "short.json",
        train={**trainer.TrainConfig().to_dict(), **TINY_TRAIN,
               "schedule": [2]})

    full = tmp_path / "full"
    assert main(["train", "--data", train_data, "--arch", "crossmodal-ekf",
                 "--init", init, "--config", str(full_cfg),
                 "--out", str(full)]) == 0

    part = tmp_path / "part"
    assert main(["train", "--data", train_data, "--arch", "crossmodal-ekf",
                 "--init", init, "--config", str(short_cfg),
                 "--out", str(part)]) == 0
    assert main(["train", "--data", train_data, "--arch", "crossmodal-ekf",
                 "--resume", "--config", str(full_cfg),
                 "--out", str(part)]) == 0

    assert ((full / "trained.dfck").read_bytes()
            == (part / "trained.dfck").read_bytes())


# ---------------------------------------------------------------------------
# eval


def test_eval_writes_reports_and_is_rerun_stable(pipeline, tmp_path):
    args = ["eval", "--data", str(pipeline / "test.dfds"), "--ckpt",
            str(pipeline / "run" / "trained.dfck"), "--seed", "1"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(out_a)]) == 0
    assert main(args + ["--out", str(out_b)]) == 0
    csv_a = next(out_a.glob("eval_*.csv"))
    csv_b = out_b / csv_a.name
    assert csv_a.read_bytes() == csv_b.read_bytes()
    rows = list(csv.reader(csv_a.read_text().splitlines()))
    assert rows[0][0] == "traj"
    assert rows[-1][0] == "mean"
    assert (out_a / csv_a.name.replace(".csv", ".txt")).exists()


def test_eval_compare_emits_side_by_side_table(pipeline, tmp_path, capsys):
    out = tmp_path / "cmp"
    rc = main(["eval", "--data", str(pipeline / "test.dfds"),
               "--ckpt", str(pipeline / "run" / "trained.dfck"),
               "--compare", str(pipeline / "run" / "pretrained.dfck"),
               "--baselines", "--out", str(out)])
    assert rc == 0
    table = (out / "comparison.csv").read_text().splitlines()
    assert table[0].startswith("label,position_rmse_cm")
    labels = [line.split(",")[0] for line in table[1:]]
    assert labels[0].startswith("crossmodal-ekf")
    assert "static" in labels
    assert "dead-reckoning" in labels


# ---------------------------------------------------------------------------
# trace


def test_trace_writes_full_length_csv_and_plots(pipeline, tmp_path):
    out = tmp_path / "trace"
    rc = main(["trace", "--data", str(pipeline / "test.dfds"),
               "--ckpt", str(pipeline / "run" / "trained.dfck"),
               "--traj", "1", "--out", str(out)])
    assert rc == 0
    ds = simenv.read_dataset(pipeline / "test.dfds")
    traj = ds.trajectories[1]
    rows = list(csv.reader((out / "trace_1.csv").read_text().splitlines()))
    header, body = rows[0], rows[1:]
    assert len(body) == traj.n_steps
    contact_col = header.index("contact")
    got = np.array([float(r[contact_col]) for r in body])
    assert np.array_equal(got, traj.contacts)

    weights_svg = (out / "trace_1_weights.svg").read_text()
    assert weights_svg.startswith("<svg")
    heat_svg = (out / "trace_1_likelihood.svg").read_text()
    # default grid resolution: one rect per cell plus chrome
    assert heat_svg.count("<rect") >= 41 * 41
    manifest = json.loads((out / "manifest.json").read_text())
    assert "trace_1.csv" in manifest


def test_trace_rejects_non_crossmodal_checkpoint(pipeline, tmp_path,
                                                 capsys):
    arch = build_architecture("feature-ekf", TASKS["push"],
                              np.random.default_rng(0))
    ckpt = tmp_path / "fe.dfck"
    trainer.save_checkpoint(ckpt, arch.named_parameters(),
                            meta={"architecture": "feature-ekf",
                                  "task": "push"})
    rc = main(["trace", "--data", str(pipeline / "test.dfds"),
               "--ckpt", str(ckpt), "--out", str(tmp_path / "out")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "crossmodal" in err


# ---------------------------------------------------------------------------
# config file


def test_experiment_config_round_trips(tmp_path):
    cfg = ExperimentConfig(task="door", architecture="feature-pf",
                           blackout=0.4, seed=9)
    path = tmp_path / "exp.json"
    cfg.to_file(path)
    again = ExperimentConfig.from_file(path)
    assert again == cfg


def test_experiment_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"task": "push", "gpu": True}))
    with pytest.raises(ValueError, match="gpu"):
        ExperimentConfig.from_file(path)


def test_experiment_config_rejects_bad_values():
    with pytest.raises(ValueError, match="task"):
        ExperimentConfig(task="sorting")
    with pytest.raises(ValueError, match="architecture"):
        ExperimentConfig(architecture="transformer")
    with pytest.raises(ValueError, match="blackout"):
        ExperimentConfig(blackout=2.0)


def test_experiment_config_rejects_invalid_json(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text("{not json")
    with pytest.raises(ValueError, match="JSON"):
        ExperimentConfig.from_file(path)


def test_manifest_merges_and_hashes(tmp_path):
    f1 = tmp_path / "one.txt"
    f1.write_text("alpha")
    update_manifest(tmp_path, [f1])
    f2 = tmp_path / "two.txt"
    f2.write_text("beta")
    update_manifest(tmp_path, [f2])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest) == {"one.txt", "two.txt"}
    import hashlib
    assert manifest["one.txt"] == hashlib.sha256(b"alpha").hexdigest()


# ---------------------------------------------------------------------------
# sweep


def test_sweep_covers_architecture_by_blackout_grid(tmp_path):
    config = tmp_path / "exp.json"
    _write_config(config, n_traj=4, n_steps=20, n_test=2,
                  train={**trainer.TrainConfig().to_dict(),
                         "schedule": [2], "epochs": 1, "steps_per_epoch": 1,
                         "batch_size": 2, "pretrain_steps": 2,
                         "measurement_steps": 2, "n_particles": 6})
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(config), "--out", str(out)]) == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 7 * 3
    cells = {tuple(r.split(",")[:2]) for r in rows[1:]}
    assert ("crossmodal-ekf", "0.8") in cells
    assert ("lstm-baseline", "0") in cells
    assert (out / "crossmodal-ekf_p40" / "trained.dfck").exists()

    # parallel execution produces the identical grid
    out2 = tmp_path / "sweep2"
    assert main(["sweep", "--config", str(config), "--jobs", "3",
                 "--out", str(out2)]) == 0
    assert ((out / "sweep.csv").read_text()
            == (out2 / "sweep.csv").read_text())
