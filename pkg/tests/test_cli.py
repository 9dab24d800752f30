import json

import numpy as np
import pytest

from idapbc import cli
from idapbc import surrogate as sg


def tiny_config(tmp_path, **overrides):
    cfg = {
        "system": {"name": "simple_pendulum", "params": {"m": 1.0, "l": 1.0, "grav": 9.81}},
        "desired": {
            "j1": [[1.0]],
            "j2": [[0.0]],
            "x_star": [np.pi / 2, 0.0],
            "c_transient": 0.5,
            "c_lyap": 0.1,
            "lambda_comp": 1.0,
            "kp_comp": [[3.0]],
        },
        "surrogate": {"hidden": [8, 8], "seed": 7, "eps": 1e-6,
                      "damping_bias": 2.449489742783178},
        "training": {
            "q_box": [[np.pi / 2 - np.pi, np.pi / 2 + np.pi]],
            "p_box": [[-3.0, 3.0]],
            "n_points": 32,
            "sample_seed": 5,
            "adam_lr": 1e-3,
            "adam_tol": 1e-6,
            "adam_max_iters": 40,
            "lbfgs_memory": 10,
            "lbfgs_max_iters": 15,
        },
        "simulation": {
            "step": 0.01,
            "duration": 0.5,
            "initial_conditions": [[0.0, 0.0], [1.0, 0.5]],
            "baseline_kp": [[9.81]],
            "baseline_kd": [[6.264183773602333]],
        },
        "output_dir": str(tmp_path / "out"),
    }
    for key, val in overrides.items():
        section, _, field = key.partition(".")
        if field:
            cfg[section][field] = val
        else:
            cfg[section] = val
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfigParsing:
    def test_valid(self, tmp_path):
        cfg = cli.load_config(tiny_config(tmp_path))
        assert cfg.system_name == "simple_pendulum"
        assert cfg.widths() == (2, 8, 8, 2)

    def test_bad_rate_names_field(self, tmp_path):
        path = tiny_config(tmp_path, **{"desired.c_transient": 0.0})
        with pytest.raises(cli.ConfigFieldError) as exc:
            cli.load_config(path)
        assert "c_transient" in str(exc.value)

    def test_missing_section_names_field(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"system": {"name": "simple_pendulum"}}))
        with pytest.raises(cli.ConfigFieldError) as exc:
            cli.load_config(path)
        assert "desired" in str(exc.value)

    def test_bundled_names_load(self):
        for name in cli.bundled_config_names():
            cfg = cli.load_config(name)
            assert cfg.n in (1, 2)

    def test_env_output_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "elsewhere"))
        cfg = cli.load_config(tiny_config(tmp_path))
        assert cfg.output_dir == tmp_path / "elsewhere"


class TestTrainCommand:
    def test_train_writes_artifacts(self, tmp_path, capsys):
        path = tiny_config(tmp_path)
        rc = cli.main(["train", str(path)])
        assert rc in (0, 2)
        out = json.loads(capsys.readouterr().out)
        assert (tmp_path / "out" / "checkpoint.json").exists()
        assert (tmp_path / "out" / "training_log.csv").exists()
        assert out["final"]["total"] <= out["initial_total"]

    def test_invalid_config_exit_1(self, tmp_path, capsys):
        path = tiny_config(tmp_path, **{"desired.c_transient": -1.0})
        rc = cli.main(["train", str(path)])
        assert rc == 1
        assert "c_transient" in capsys.readouterr().err

    def test_deterministic_checkpoints(self, tmp_path, capsys):
        path = tiny_config(tmp_path)
        cli.main(["train", str(path)])
        first = (tmp_path / "out" / "checkpoint.json").read_bytes()
        cli.main(["train", str(path)])
        second = (tmp_path / "out" / "checkpoint.json").read_bytes()
        assert first == second


class TestSimulateCommand:
    def _trained(self, tmp_path, capsys):
        path = tiny_config(tmp_path)
        cli.main(["train", str(path)])
        capsys.readouterr()
        return path, tmp_path / "out" / "checkpoint.json"

    def test_simulate_csvs(self, tmp_path, capsys):
        cfg, ck = self._trained(tmp_path, capsys)
        rc = cli.main(["simulate", str(cfg), str(ck)])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert len(report["trajectories"]) == 2
        for item in report["trajectories"]:
            lines = open(item["file"]).read().strip().splitlines()
            assert lines[0] == "t,q1,p1,u1,H,H_d"
            assert len(lines) == 52

    def test_simulate_baseline(self, tmp_path, capsys):
        cfg, _ = self._trained(tmp_path, capsys)
        rc = cli.main(["simulate", str(cfg), "--baseline"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert all("baseline" in item["file"] for item in report["trajectories"])

    def test_missing_checkpoint_exit_1(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        rc = cli.main(["simulate", str(cfg), str(tmp_path / "nope.json")])
        assert rc == 1

    def test_architecture_mismatch_exit_1(self, tmp_path, capsys):
        cfg, ck = self._trained(tmp_path, capsys)
        other = tiny_config(tmp_path, **{"surrogate.hidden": [6, 6]})
        rc = cli.main(["simulate", str(other), str(ck)])
        assert rc == 1

    def test_deterministic_csvs(self, tmp_path, capsys):
        cfg, ck = self._trained(tmp_path, capsys)
        cli.main(["simulate", str(cfg), str(ck)])
        first = (tmp_path / "out" / "traj_neural_01.csv").read_bytes()
        cli.main(["simulate", str(cfg), str(ck)])
        second = (tmp_path / "out" / "traj_neural_01.csv").read_bytes()
        assert first == second


class TestVerifyCommand:
    def test_untrained_checkpoint_fails_with_3(self, tmp_path, capsys):
        cfg_path = tiny_config(tmp_path)
        cfg = cli.load_config(cfg_path)
        net = cfg.build_net()
        ck = tmp_path / "fresh.json"
        sg.save_checkpoint(ck, net, cfg.desired, cfg.system_name, cfg.system_params)
        rc = cli.main(["verify", str(cfg_path), str(ck)])
        report = json.loads(capsys.readouterr().out)
        assert rc == 3
        assert "matching_rms_fresh" in report["failures"]
        assert report["matching_rms_fresh"] > 0.1


class TestExportCommand:
    def test_grid_export(self, tmp_path, capsys):
        cfg_path = tiny_config(tmp_path)
        cfg = cli.load_config(cfg_path)
        net = cfg.build_net()
        ck = tmp_path / "fresh.json"
        sg.save_checkpoint(ck, net, cfg.desired, cfg.system_name, cfg.system_params)
        out = tmp_path / "grid.csv"
        rc = cli.main([
            "export", str(ck), "--grid", "q1=-1.57:4.71:11,p1=-3:3:11",
            "--out", str(out),
        ])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "q1,p1,H,H_a,H_d"
        assert len(lines) == 122
        for row in lines[1:]:
            vals = [float(v) for v in row.split(",")]
            assert vals[4] == pytest.approx(vals[2] + vals[3], abs=1e-12)

    def test_bad_grid_exit_1(self, tmp_path, capsys):
        cfg_path = tiny_config(tmp_path)
        cfg = cli.load_config(cfg_path)
        net = cfg.build_net()
        ck = tmp_path / "fresh.json"
        sg.save_checkpoint(ck, net, cfg.desired, cfg.system_name, cfg.system_params)
        assert cli.main(["export", str(ck), "--grid", "z9=0:1:5"]) == 1
        assert cli.main(["export", str(ck), "--grid", "q1=1:0:5"]) == 1
