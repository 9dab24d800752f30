import json
import time
from importlib import resources
from pathlib import Path

import pytest


def _bundled_raw(name):
    res = resources.files("idapbc") / "configs" / f"{name}.json"
    return json.loads(res.read_text())


@pytest.fixture(scope="session")
def experiment_names():
    return [
        "pendulum_j1_1.0",
        "pendulum_j1_-0.5",
        "double_pendulum_j1_1.0",
        "double_pendulum_j1_-0.5",
    ]


@pytest.fixture(scope="session")
def trained_experiments(tmp_path_factory, experiment_names):
    """Train every bundled experiment once per session.

    Heavy: each run is a full two-stage optimization.  Returns a mapping
    name -> {config_path, checkpoint, log, wall_time, summary}.
    """
    from idapbc import cli

    root = tmp_path_factory.mktemp("experiments")
    out = {}
    for name in experiment_names:
        raw = _bundled_raw(name)
        outdir = root / name
        raw["output_dir"] = str(outdir)
        cfg_path = root / f"{name}.json"
        cfg_path.write_text(json.dumps(raw))
        t0 = time.perf_counter()
        rc = cli.main(["train", str(cfg_path)])
        wall = time.perf_counter() - t0
        assert rc in (0, 2), f"training {name} failed outright"
        out[name] = {
            "config_path": cfg_path,
            "raw": raw,
            "checkpoint": outdir / "checkpoint.json",
            "log": outdir / "training_log.csv",
            "wall_time": wall,
            "exit_code": rc,
        }
    return out
