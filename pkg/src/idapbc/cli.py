"""Command-line entry point.

Subcommands: `train <config>`, `simulate <config> <checkpoint>
[--baseline]`, `verify <config> <checkpoint>`, `export <checkpoint> --grid
<spec>`.  Config files are JSON with nested sections (system, desired,
surrogate, training, simulation, output_dir); four bundled configs cover
the benchmark experiments and can be referenced by bare name.  The
IDAPBC_OUTPUT_DIR environment variable overrides the configured output
directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import numerics
from . import ph_core
from . import residuals
from . import simulator
from . import surrogate
from . import trainer

OUTPUT_DIR_ENV = "IDAPBC_OUTPUT_DIR"
VERIFY_FRESH_SEED_OFFSET = 99991

# verification gates, from the package acceptance thresholds
MATCHING_RMS_GATE = 1e-3
EQ_GRAD_GATE = 1e-3
FINAL_DIST_GATE = 1e-2
HD_STEP_GATE = 1e-4
KINETIC_ORACLE_REL_GATE = 0.10


class ConfigFieldError(ValueError):
    """Config validation failure carrying the offending field path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


def _need(mapping, key, path, kind=None):
    if key not in mapping:
        raise ConfigFieldError(f"{path}.{key}", "missing required field")
    value = mapping[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigFieldError(
            f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}"
        )
    return value


def _matrix(value, path, rows=None, cols=None):
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise ConfigFieldError(path, "expected a matrix (list of rows)")
    if rows is not None and arr.shape[0] != rows:
        raise ConfigFieldError(path, f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ConfigFieldError(path, f"expected {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ConfigFieldError(path, "entries must be finite")
    return arr


def _positive(value, path):
    if not (isinstance(value, (int, float)) and value > 0):
        raise ConfigFieldError(path, "must be a positive number")
    return float(value)


@dataclass
class ExperimentConfig:
    system_name: str
    system_params: dict
    desired: surrogate.DesiredStructure
    hidden: list
    seed: int
    eps: float
    damping_bias: float
    energy_scale: float
    q_box: np.ndarray
    p_box: np.ndarray
    eval_q_box: np.ndarray
    eval_p_box: np.ndarray
    n_points: int
    sample_seed: int
    adam_lr: float
    adam_tol: float
    adam_max_iters: int
    lbfgs_memory: int
    lbfgs_max_iters: int
    sim_step: float
    sim_duration: float
    initial_conditions: np.ndarray
    baseline_kp: np.ndarray
    baseline_kd: np.ndarray
    output_dir: Path
    raw: dict

    @property
    def n(self):
        return self.desired.n

    def widths(self):
        n = self.n
        return tuple([2 * n] + list(self.hidden) + [1 + surrogate.tri_count(n)])

    def input_normalization(self):
        """Center the net on the target; scale by the box half-widths."""
        center = self.desired.x_star
        halves = []
        for i, (lo, hi) in enumerate(np.vstack([self.q_box, self.p_box])):
            halves.append(max(abs(hi - center[i]), abs(lo - center[i]), 1e-9))
        return center, 1.0 / np.asarray(halves)

    def build_net(self):
        center, scale = self.input_normalization()
        return surrogate.SurrogateNet.init(
            self.seed,
            self.widths(),
            eps=self.eps,
            damping_bias=self.damping_bias,
            in_center=center,
            in_scale=scale,
            energy_scale=self.energy_scale,
        )

    def build_system(self):
        return ph_core.make_system(self.system_name, self.system_params)

    def domain(self):
        return trainer.CollocationDomain(
            q_bounds=self.q_box,
            p_bounds=self.p_box,
            n_points=self.n_points,
            seed=self.sample_seed,
            x_star=self.desired.x_star,
        )


def parse_config(raw):
    """Validate a raw config mapping; raises ConfigFieldError on failure."""
    system = _need(raw, "system", "config", dict)
    name = _need(system, "name", "system", str)
    params = system.get("params", {})
    if not isinstance(params, dict):
        raise ConfigFieldError("system.params", "expected a mapping")

    des = _need(raw, "desired", "config", dict)
    j1 = _matrix(_need(des, "j1", "desired"), "desired.j1")
    n = j1.shape[0]
    j2 = _matrix(_need(des, "j2", "desired"), "desired.j2", n, n)
    x_star = np.asarray(_need(des, "x_star", "desired"), dtype=float)
    if x_star.shape != (2 * n,):
        raise ConfigFieldError("desired.x_star", f"expected length {2 * n}")
    c_transient = _positive(_need(des, "c_transient", "desired"), "desired.c_transient")
    c_lyap = _positive(_need(des, "c_lyap", "desired"), "desired.c_lyap")
    lambda_comp = des.get("lambda_comp", 1.0 if n >= 2 else 0.0)
    if not isinstance(lambda_comp, (int, float)) or lambda_comp < 0:
        raise ConfigFieldError("desired.lambda_comp", "must be >= 0")
    kp_comp = _matrix(des.get("kp_comp", np.eye(n).tolist()), "desired.kp_comp", n, n)
    try:
        desired = surrogate.DesiredStructure(
            j1=j1, j2=j2, x_star=x_star, c_transient=c_transient,
            c_lyap=c_lyap, lambda_comp=float(lambda_comp), kp_comp=kp_comp,
        )
    except surrogate.ConfigError as err:
        raise ConfigFieldError("desired", str(err)) from err

    sur = _need(raw, "surrogate", "config", dict)
    hidden = _need(sur, "hidden", "surrogate", list)
    if not hidden or any(not isinstance(w, int) or w <= 0 for w in hidden):
        raise ConfigFieldError("surrogate.hidden", "expected positive widths")
    seed = _need(sur, "seed", "surrogate", int)
    eps = sur.get("eps", 1e-6)
    if not isinstance(eps, (int, float)) or eps <= 0:
        raise ConfigFieldError("surrogate.eps", "must be > 0")
    damping_bias = sur.get("damping_bias", 1.0)
    if not isinstance(damping_bias, (int, float)) or damping_bias < 0:
        raise ConfigFieldError("surrogate.damping_bias", "must be >= 0")
    energy_scale = sur.get("energy_scale", 1.0)
    if not isinstance(energy_scale, (int, float)) or energy_scale <= 0:
        raise ConfigFieldError("surrogate.energy_scale", "must be > 0")

    tra = _need(raw, "training", "config", dict)
    q_box = _matrix(_need(tra, "q_box", "training"), "training.q_box", n, 2)
    p_box = _matrix(_need(tra, "p_box", "training"), "training.p_box", n, 2)
    # evaluation region for verification sampling; defaults to the training
    # box (training may use a margin so the evaluated region sits interior)
    eval_q_box = _matrix(
        tra.get("eval_q_box", q_box.tolist()), "training.eval_q_box", n, 2
    )
    eval_p_box = _matrix(
        tra.get("eval_p_box", p_box.tolist()), "training.eval_p_box", n, 2
    )
    n_points = _need(tra, "n_points", "training", int)
    if n_points < 0:
        raise ConfigFieldError("training.n_points", "must be >= 0")
    sample_seed = _need(tra, "sample_seed", "training", int)
    adam_lr = _positive(tra.get("adam_lr", 1e-3), "training.adam_lr")
    adam_tol = _positive(tra.get("adam_tol", 1e-6), "training.adam_tol")
    adam_max = tra.get("adam_max_iters", 50000)
    lbfgs_memory = tra.get("lbfgs_memory", 10)
    lbfgs_max = tra.get("lbfgs_max_iters", 1000)
    for key, val in (
        ("adam_max_iters", adam_max),
        ("lbfgs_memory", lbfgs_memory),
        ("lbfgs_max_iters", lbfgs_max),
    ):
        if not isinstance(val, int) or val <= 0:
            raise ConfigFieldError(f"training.{key}", "must be a positive integer")

    sim = _need(raw, "simulation", "config", dict)
    step = _positive(_need(sim, "step", "simulation"), "simulation.step")
    duration = _positive(_need(sim, "duration", "simulation"), "simulation.duration")
    ics = np.asarray(_need(sim, "initial_conditions", "simulation"), dtype=float)
    if ics.ndim != 2 or ics.shape[1] != 2 * n:
        raise ConfigFieldError(
            "simulation.initial_conditions", f"expected rows of length {2 * n}"
        )
    kp = _matrix(_need(sim, "baseline_kp", "simulation"), "simulation.baseline_kp", n, n)
    kd = _matrix(_need(sim, "baseline_kd", "simulation"), "simulation.baseline_kd", n, n)

    out = raw.get("output_dir", "runs/experiment")
    out = os.environ.get(OUTPUT_DIR_ENV, out)

    return ExperimentConfig(
        system_name=name,
        system_params=params,
        desired=desired,
        hidden=hidden,
        seed=seed,
        eps=float(eps),
        damping_bias=float(damping_bias),
        energy_scale=float(energy_scale),
        q_box=q_box,
        p_box=p_box,
        eval_q_box=eval_q_box,
        eval_p_box=eval_p_box,
        n_points=n_points,
        sample_seed=sample_seed,
        adam_lr=adam_lr,
        adam_tol=adam_tol,
        adam_max_iters=adam_max,
        lbfgs_memory=lbfgs_memory,
        lbfgs_max_iters=lbfgs_max,
        sim_step=step,
        sim_duration=duration,
        initial_conditions=ics,
        baseline_kp=kp,
        baseline_kd=kd,
        output_dir=Path(out),
        raw=raw,
    )


def bundled_config_names():
    pkg = resources.files("idapbc") / "configs"
    return sorted(p.name[: -len(".json")] for p in pkg.iterdir() if p.name.endswith(".json"))


def load_config(ref):
    """Load a config from a path or a bundled name."""
    path = Path(ref)
    if path.exists():
        raw = json.loads(path.read_text())
    else:
        name = ref[: -len(".json")] if ref.endswith(".json") else ref
        res = resources.files("idapbc") / "configs" / f"{name}.json"
        if not res.is_file():
            raise ConfigFieldError(
                "config", f"no such file or bundled config '{ref}' "
                f"(bundled: {', '.join(bundled_config_names())})"
            )
        raw = json.loads(res.read_text())
    if not isinstance(raw, dict):
        raise ConfigFieldError("config", "top level must be a mapping")
    return parse_config(raw)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = load_config(args.config)
    sys_ = cfg.build_system()
    net = cfg.build_net()
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    settings = trainer.TrainSettings(
        domain=cfg.domain(),
        adam_lr=cfg.adam_lr,
        adam_tol=cfg.adam_tol,
        adam_max_iters=cfg.adam_max_iters,
        lbfgs_memory=cfg.lbfgs_memory,
        lbfgs_max_iters=cfg.lbfgs_max_iters,
        log_path=str(cfg.output_dir / "training_log.csv"),
        checkpoint_path=str(cfg.output_dir / "checkpoint.json"),
    )
    report = trainer.train(
        sys_, cfg.desired, net, settings,
        system_name=cfg.system_name, system_params=cfg.system_params,
        extra={"config": cfg.raw},
    )
    summary = {
        "adam_iterations": report.adam_iterations,
        "lbfgs_iterations": report.lbfgs_iterations,
        "lbfgs_status": report.lbfgs_status,
        "converged": report.converged,
        "wall_time_s": round(report.wall_time, 3),
        "initial_total": report.initial["total"],
        "final": report.final,
        "checkpoint": report.checkpoint_path,
        "log": report.log_path,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if report.converged else 2


def _load_checkpoint_for(cfg, path):
    net, ds, sys_, payload = surrogate.load_checkpoint(path)
    if tuple(payload["widths"]) != cfg.widths():
        raise surrogate.ConfigError(
            f"checkpoint widths {payload['widths']} do not match config "
            f"widths {list(cfg.widths())}"
        )
    return net, ds, sys_


def cmd_simulate(args):
    cfg = load_config(args.config)
    if args.baseline:
        sys_ = cfg.build_system()
        ds = cfg.desired
        controller = simulator.baseline_controller(
            sys_, ds.x_star, cfg.baseline_kp, cfg.baseline_kd
        )
        tag = "baseline"
    else:
        net, ds, sys_ = _load_checkpoint_for(cfg, args.checkpoint)
        controller = simulator.NeuralController(sys_, net, ds)
        tag = "neural"
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, x0 in enumerate(cfg.initial_conditions):
        traj = simulator.simulate(sys_, controller, x0, cfg.sim_step, cfg.sim_duration)
        out = cfg.output_dir / f"traj_{tag}_{i:02d}.csv"
        simulator.write_trajectory_csv(out, traj, sys_.n)
        final = float(np.linalg.norm(traj.states[-1] - ds.x_star))
        paths.append({"file": str(out), "final_distance": final})
    print(json.dumps({"trajectories": paths}, indent=2, sort_keys=True))
    return 0


def cmd_verify(args):
    cfg = load_config(args.config)
    net, ds, sys_ = _load_checkpoint_for(cfg, args.checkpoint)
    n = sys_.n
    report = {}
    failures = []

    # matching residual over a fresh sample from the evaluation region
    fresh = trainer.CollocationDomain(
        q_bounds=cfg.eval_q_box, p_bounds=cfg.eval_p_box, n_points=cfg.n_points,
        seed=cfg.sample_seed + VERIFY_FRESH_SEED_OFFSET, x_star=cfg.desired.x_star,
    )
    pts = trainer.sample_collocation(fresh)
    bd = residuals.ResidualAssembler(sys_, net, ds, pts).evaluate()
    rms = float(np.sqrt(bd.f_matching))
    report["matching_rms_fresh"] = rms
    if n == 1 and rms > MATCHING_RMS_GATE:
        failures.append("matching_rms_fresh")

    # equilibrium and curvature at the target
    ha, dha, d2ha = surrogate.eval_Ha(net, ds.x_star)
    _, dh, d2h = ph_core.hamiltonian_derivatives(sys_, ds.x_star)
    grad_norm = float(np.linalg.norm(dh + dha))
    eigs, _ = numerics.sym_eigen(d2h + d2ha)
    report["eq_grad_norm"] = grad_norm
    report["hessian_min_eig"] = float(eigs[0])
    if grad_norm > EQ_GRAD_GATE:
        failures.append("eq_grad_norm")
    if eigs[0] < ds.c_lyap / 2:
        failures.append("hessian_min_eig")

    # closed-form kinetic shaping oracle for the 1-dof benchmark
    if sys_.name == "simple_pendulum":
        j1 = float(ds.j1[0, 0])
        ml2 = sys_.params.get("m", 1.0) * sys_.params.get("l", 1.0) ** 2
        analytic = -(j1 / (1.0 + j1)) / ml2
        rel = abs(d2ha[1, 1] - analytic) / abs(analytic)
        report["kinetic_curvature"] = float(d2ha[1, 1])
        report["kinetic_curvature_analytic"] = analytic
        report["kinetic_curvature_rel_err"] = float(rel)
        if rel > KINETIC_ORACLE_REL_GATE:
            failures.append("kinetic_curvature_rel_err")

    # closed-loop trajectories
    controller = simulator.NeuralController(sys_, net, ds)
    trajs = []
    for i, x0 in enumerate(cfg.initial_conditions):
        traj = simulator.simulate(sys_, controller, x0, cfg.sim_step, cfg.sim_duration)
        rep = simulator.verify_trajectory(traj, sys_, net, ds, step_tol=HD_STEP_GATE)
        trajs.append(
            {
                "initial": list(map(float, x0)),
                "final_distance": rep.final_distance,
                "hd_max_increase": rep.hd_max_increase,
                "hd_violations": rep.hd_violations,
                "dissipation_identity_max": rep.dissipation_identity_max,
            }
        )
        if rep.final_distance > FINAL_DIST_GATE:
            failures.append(f"final_distance[{i}]")
        if rep.hd_max_increase > HD_STEP_GATE:
            failures.append(f"hd_monotonicity[{i}]")
    report["trajectories"] = trajs
    report["failures"] = failures
    report["passed"] = not failures
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if not failures else 3


def parse_grid_spec(spec, n, x_star):
    """Grid spec 'q1=lo:hi:res,p1=lo:hi:res'; unlisted axes stay fixed.

    Coordinates default to the target configuration with zero momenta.
    """
    names = [f"q{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)]
    fixed = np.concatenate([x_star[:n], np.zeros(n)])
    axes = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"bad grid axis '{part}' (want name=lo:hi:res)")
        name, rng = part.split("=", 1)
        name = name.strip()
        if name not in names:
            raise ValueError(f"unknown grid axis '{name}' (have {names})")
        pieces = rng.split(":")
        if len(pieces) != 3:
            raise ValueError(f"bad grid range '{rng}' (want lo:hi:res)")
        lo, hi = float(pieces[0]), float(pieces[1])
        res = int(pieces[2])
        if res < 2 or hi <= lo:
            raise ValueError(f"bad grid range '{rng}' (need hi > lo, res >= 2)")
        axes.append((names.index(name), np.linspace(lo, hi, res)))
    if not axes:
        raise ValueError("grid spec has no axes")
    return names, fixed, axes


def cmd_export(args):
    net, ds, sys_, _ = surrogate.load_checkpoint(args.checkpoint)
    n = sys_.n
    try:
        names, fixed, axes = parse_grid_spec(args.grid, n, ds.x_star)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    out_path = Path(args.out) if args.out else Path(args.checkpoint).parent / "energy_map.csv"
    mesh = np.meshgrid(*[vals for _, vals in axes], indexing="ij")
    flat = [m.ravel() for m in mesh]
    count = flat[0].size
    with open(out_path, "w") as fh:
        fh.write(",".join(names + ["H", "H_a", "H_d"]) + "\n")
        for r in range(count):
            x = fixed.copy()
            for (axis, _), column in zip(axes, flat):
                x[axis] = column[r]
            h = ph_core.hamiltonian(sys_, x)
            ha = float(net.numeric_forward(x, order=0)[0][0])
            row = list(x) + [h, ha, h + ha]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print(json.dumps({"file": str(out_path), "rows": int(count)}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="idapbc",
        description="Energy-shaping controller synthesis for port-Hamiltonian "
        "mechanical systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a surrogate from a config")
    p_train.add_argument("config")
    p_train.set_defaults(fn=cmd_train)

    p_sim = sub.add_parser("simulate", help="run closed-loop trajectories")
    p_sim.add_argument("config")
    p_sim.add_argument("checkpoint", nargs="?", default=None)
    p_sim.add_argument("--baseline", action="store_true",
                       help="use the analytic comparator instead of a checkpoint")
    p_sim.set_defaults(fn=cmd_simulate)

    p_ver = sub.add_parser("verify", help="check a trained checkpoint")
    p_ver.add_argument("config")
    p_ver.add_argument("checkpoint")
    p_ver.set_defaults(fn=cmd_verify)

    p_exp = sub.add_parser("export", help="export energy maps over a state grid")
    p_exp.add_argument("checkpoint")
    p_exp.add_argument("--grid", required=True,
                       help="axes spec, e.g. 'q1=-1.57:4.71:101,p1=-3:3:101'")
    p_exp.add_argument("--out", default=None)
    p_exp.set_defaults(fn=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "simulate" and not args.baseline and args.checkpoint is None:
        print("error: simulate needs a checkpoint (or --baseline)", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except ConfigFieldError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (surrogate.ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
