"""Experiment configuration and the collect -> design -> simulate -> compare pipeline.

Everything here is deterministic for a fixed config: follower ``i`` draws
its data from ``SeedSequence([seed, i])`` and the horizon for data length
``rho`` is ``rho + s_bar - 1`` steps, so shorter datasets are prefixes of
longer ones.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import closedloop, dataset, stm, synthesis, sysid
from .plant import SystemMatrices, pendulum_zoh
from .topology import Topology, build_graph_matrices, pendulum_experiment_topology, validate_connectivity

SCHEMA_VERSION = 1

MODE_DATA = "data-driven"
MODE_HINF = "h-infinity"
MODE_SYSID = "sysid"
MODES = (MODE_DATA, MODE_HINF, MODE_SYSID)


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_NUM_OR_LIST = {"oneOf": [_POS, {"type": "array", "items": _POS, "minItems": 1}]}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "topology", "initial_states"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string", "minLength": 1},
        "plant": {
            "type": "object", "additionalProperties": False,
            "properties": {"mass": _POS, "length": _POS, "gravity": _POS, "sample_period": _POS,
                           "e_scale": _POS, "b_d_scale": _POS},
        },
        "topology": {
            "type": "object", "required": ["adjacency", "pinning"], "additionalProperties": False,
            "properties": {"adjacency": {"type": "array", "items": _VEC, "minItems": 1},
                           "pinning": _VEC},
        },
        "initial_states": {
            "type": "object", "required": ["leader", "followers"], "additionalProperties": False,
            "properties": {"leader": _VEC, "followers": {"type": "array", "items": _VEC, "minItems": 1}},
        },
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "rho": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "w_bar": {"type": "number", "minimum": 0},
                "stm_w_bar": {"type": "number", "minimum": 0},
                "input_bound": _POS,
                "s_bar": {"type": "integer", "minimum": 1},
                "design_agent": {"type": "integer", "minimum": 1},
                "m_aug": _POS,
            },
        },
        "design": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "modes": {"type": "array", "items": {"enum": list(MODES)}, "minItems": 1},
                "sigma": _NUM_OR_LIST,
                "epsilon": {"oneOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 1}]},
                "gamma": _POS,
                "coupling": {"enum": list(synthesis.COUPLINGS)},
                "disturbance_block": {"enum": ["gain-scaled", "consistent"]},
            },
        },
        "simulation": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "horizon": {"type": "integer", "minimum": 1},
                "mechanisms": {
                    "type": "object", "additionalProperties": False,
                    "properties": {m: {"type": "array", "items": {"enum": list(stm.MECHANISMS)}}
                                   for m in MODES},
                },
                "threshold": _POS,
                "disturbance": {"enum": ["none", "sinusoid"]},
                "d_bar": {"type": "number", "minimum": 0},
                "robust_bound": {"enum": ["constant", "worst-case"]},
                "start_at_leader": {"type": "boolean"},
                "jc_weights": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"q": _POS, "r": _POS, "q0": _POS},
                },
            },
        },
    },
}

DEFAULTS = {
    "seed": 1,
    "output": "stc_out",
    "plant": {"mass": 1.0, "length": 1.0, "gravity": 9.8, "sample_period": 0.02, "e_scale": 0.01,
              "b_d_scale": 0.01},
    "data": {"rho": [10, 80, 800], "w_bar": 0.01, "input_bound": 1.0, "s_bar": stm.DEFAULT_S_BAR,
             "design_agent": 1, "m_aug": 1e-6},
    "design": {"modes": [MODE_DATA, MODE_SYSID], "sigma": 0.2, "epsilon": 2.0, "gamma": 1.0,
               "coupling": synthesis.COUPLING_LINEAR, "disturbance_block": "gain-scaled"},
    "simulation": {"horizon": 1000,
                   "mechanisms": {MODE_DATA: [stm.DATA_DRIVEN, stm.MODEL_BASED],
                                  MODE_SYSID: [stm.MODEL_BASED],
                                  MODE_HINF: [stm.ROBUST]},
                   "threshold": closedloop.DEFAULT_THRESHOLD, "disturbance": "none", "d_bar": 0.01,
                   "robust_bound": "constant", "start_at_leader": False,
                   "jc_weights": {"q": 10.0, "r": 5.0, "q0": 3.0}},
}


def pendulum_config(output: str = "stc_out") -> dict:
    """The pendulum network experiment as a raw config dict."""
    topo = pendulum_experiment_topology()
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 1,
        "output": output,
        "topology": {"adjacency": topo.adjacency.tolist(), "pinning": topo.pinning.tolist()},
        "initial_states": {"leader": list(closedloop.PENDULUM_LEADER0),
                           "followers": [list(x) for x in closedloop.PENDULUM_FOLLOWERS0]},
    }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "mechanisms":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output(self) -> Path:
        return Path(self.raw["output"])

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def design(self) -> dict:
        return self.raw["design"]

    @property
    def sim(self) -> dict:
        return self.raw["simulation"]

    @property
    def s_bar(self) -> int:
        return int(self.data["s_bar"])

    @property
    def rhos(self) -> list[int]:
        return [int(r) for r in self.data["rho"]]

    @property
    def sigmas(self) -> list[float]:
        return [float(s) for s in _as_list(self.design["sigma"])]

    @property
    def epsilons(self) -> list[float]:
        return [float(e) for e in _as_list(self.design["epsilon"])]

    def plant(self) -> SystemMatrices:
        return pendulum_zoh(**self.raw["plant"])

    def topology(self) -> Topology:
        t = self.raw["topology"]
        return Topology(np.array(t["adjacency"], dtype=float), np.array(t["pinning"], dtype=float))

    def leader0(self) -> np.ndarray:
        return np.array(self.raw["initial_states"]["leader"], dtype=float)

    def followers0(self) -> np.ndarray:
        return np.array(self.raw["initial_states"]["followers"], dtype=float)

    def with_output(self, output) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["output"] = str(output)
        return ExperimentConfig(raw)


def parse_config(raw: dict, seed: int | None = None, output=None) -> ExperimentConfig:
    """Validate against the schema, fill defaults and check cross-field rules."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    merged = _merge(DEFAULTS, raw)
    if seed is not None:
        merged["seed"] = int(seed)
    if output is not None:
        merged["output"] = str(output)
    cfg = ExperimentConfig(merged)
    topo = cfg.topology()
    report = validate_connectivity(topo)
    if not report:
        raise ConfigError(f"topology rejected: {report.message}")
    plant = cfg.plant()
    if cfg.leader0().shape != (plant.n,):
        raise ConfigError(f"leader initial state must have {plant.n} entries")
    if cfg.followers0().shape != (topo.n_followers, plant.n):
        raise ConfigError(f"need {topo.n_followers} follower initial states of length {plant.n}")
    agent = int(cfg.data["design_agent"])
    if agent > topo.n_followers:
        raise ConfigError(f"design_agent {agent} exceeds the {topo.n_followers} followers")
    return cfg


def load_config(path, seed: int | None = None, output=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(raw, seed, output)


def worker_count() -> int:
    """Parallel jobs allowed by ``STC_THREADS`` (default 1)."""
    raw = os.environ.get("STC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"STC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"STC_THREADS must be a positive integer, got {raw!r}")
    return n


def _map(fn, jobs):
    jobs = list(jobs)
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------- collect

def agent_seed(seed: int, agent: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(agent)])


def collect_agent(cfg: ExperimentConfig, agent: int, rho: int, w_bar: float | None = None) -> dataset.Trajectory:
    plant = cfg.plant()
    w_bar = cfg.data["w_bar"] if w_bar is None else w_bar
    return dataset.collect_open_loop(
        plant, rho + cfg.s_bar - 1,
        input_law=dataset.uniform_inputs(cfg.data["input_bound"]),
        noise_law=dataset.ball_noise(w_bar) if w_bar > 0 else dataset.zero_law,
        seed=agent_seed(cfg.seed, agent), x0=cfg.followers0()[agent - 1], leader0=cfg.leader0(),
        agent=agent)


def data_path(cfg: ExperimentConfig, rho: int, agent: int) -> Path:
    return cfg.output / "data" / f"rho{rho}" / f"agent{agent}.csv"


def trajectories(cfg: ExperimentConfig, rho: int) -> list[dataset.Trajectory]:
    """Stored trajectories when present, otherwise freshly collected ones."""
    out = []
    for agent in range(1, cfg.topology().n_followers + 1):
        path = data_path(cfg, rho, agent)
        if path.exists():
            traj = dataset.load_trajectory_csv(path, agent)
            if traj.horizon != rho + cfg.s_bar - 1:
                raise ConfigError(f"{path} holds {traj.horizon} steps, expected {rho + cfg.s_bar - 1}")
            out.append(traj)
        else:
            out.append(collect_agent(cfg, agent, rho))
    return out


def _collect_job(raw, rho):
    cfg = ExperimentConfig(raw)
    paths = []
    for agent in range(1, cfg.topology().n_followers + 1):
        path = data_path(cfg, rho, agent)
        path.parent.mkdir(parents=True, exist_ok=True)
        dataset.save_trajectory_csv(collect_agent(cfg, agent, rho), path)
        paths.append(str(path))
    return paths


def run_collect(cfg: ExperimentConfig) -> list[str]:
    return [p for ps in _map(_collect_job, [(cfg.raw, rho) for rho in cfg.rhos]) for p in ps]


# ---------------------------------------------------------------- design

def design_name(mode: str, rho: int | None, sigma: float, epsilon: float) -> str:
    tag = f"_rho{rho}" if rho is not None else ""
    return f"{mode}{tag}_sigma{sigma:g}_eps{epsilon:g}"


def design_for(cfg: ExperimentConfig, mode: str, rho: int | None, sigma: float, epsilon: float,
               trajs=None) -> synthesis.StcDesign:
    gm = build_graph_matrices(cfg.topology())
    plant = cfg.plant()
    d = cfg.design
    if mode == MODE_HINF:
        des = synthesis.design_hinf(plant, gm, sigma, epsilon, d["gamma"], d["coupling"], d["disturbance_block"])
    else:
        trajs = trajectories(cfg, rho) if trajs is None else trajs
        traj = trajs[int(cfg.data["design_agent"]) - 1]
        dm = dataset.assemble_matrices(traj, 1, rho)
        if mode == MODE_DATA:
            nq = dataset.ball_noise_qmi(cfg.data["w_bar"], rho, plant.e.shape[1])
            theta = dataset.build_theta(dm, nq, plant.e, agent=traj.agent)
            if not dataset.check_rank(theta):
                raise synthesis.DesignError(f"data of agent {traj.agent} at rho={rho} are not informative")
            des = synthesis.design_from_data(theta, gm, sigma, epsilon, d["coupling"])
        elif mode == MODE_SYSID:
            model = sysid.least_squares_id(dm)
            des = sysid.indirect_design(model, gm, sigma, epsilon, d["gamma"], plant.b_d, d["coupling"],
                                        d["disturbance_block"])
        else:
            raise ConfigError(f"unknown design mode {mode!r}")
    des.extra.update({"mode": mode, "rho": rho, "design_agent": int(cfg.data["design_agent"])})
    return des


def _design_job(raw, mode, rho, sigma, epsilon):
    cfg = ExperimentConfig(raw)
    des = design_for(cfg, mode, rho, sigma, epsilon)
    path = cfg.output / "designs" / (design_name(mode, rho, sigma, epsilon) + ".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    des.save(path)
    return str(path)


def design_jobs(cfg: ExperimentConfig, modes=None):
    modes = modes or cfg.design["modes"]
    for mode in modes:
        for sigma in cfg.sigmas:
            for eps in cfg.epsilons:
                if mode == MODE_HINF:
                    yield (cfg.raw, mode, None, sigma, eps)
                else:
                    for rho in cfg.rhos:
                        yield (cfg.raw, mode, rho, sigma, eps)


def run_design(cfg: ExperimentConfig, modes=None) -> list[str]:
    return _map(_design_job, list(design_jobs(cfg, modes)))


# ---------------------------------------------------------------- simulate

def families_for(cfg: ExperimentConfig, rho: int, trajs=None, w_bar: float | None = None) -> list:
    """Lifted kernel families of every follower for the data-driven STM."""
    trajs = trajectories(cfg, rho) if trajs is None else trajs
    w_bar = cfg.data.get("stm_w_bar", cfg.data["w_bar"]) if w_bar is None else w_bar
    plant = cfg.plant()
    return [dataset.build_lifted_family(t, plant.e, w_bar, cfg.s_bar, m_aug=cfg.data["m_aug"], rho=rho)
            for t in trajs]


def sim_config(cfg: ExperimentConfig, design: synthesis.StcDesign, mechanism: str, families=None,
               horizon: int | None = None) -> closedloop.SimConfig:
    plant = cfg.plant()
    s = cfg.sim
    followers0 = cfg.followers0()
    if s["start_at_leader"]:
        followers0 = np.tile(cfg.leader0(), (followers0.shape[0], 1))
    law = None
    if s["disturbance"] == "sinusoid":
        law = closedloop.sinusoidal_disturbance(s["d_bar"], cfg.raw["plant"]["sample_period"],
                                                plant.b_d.shape[1])
    stm_model = None
    ident = design.extra.get("identified_model")
    if ident is not None:
        stm_model = SystemMatrices(np.array(ident["A_hat"]), np.array(ident["B_hat"]), None, plant.b_d)
    return closedloop.SimConfig(
        cfg.topology(), plant, design, mechanism, cfg.leader0(), followers0,
        horizon or int(s["horizon"]), law, cfg.seed, cfg.s_bar, families, float(s["d_bar"]),
        s["robust_bound"], float(cfg.raw["plant"]["sample_period"]), stm_model)


def simulate_design(cfg: ExperimentConfig, design: synthesis.StcDesign, mechanism: str,
                    families=None) -> closedloop.SimResult:
    if mechanism == stm.DATA_DRIVEN and families is None:
        rho = design.extra.get("rho")
        if rho is None:
            raise ConfigError("the data-driven mechanism needs data; this design has no rho")
        families = families_for(cfg, int(rho))
    res = closedloop.run(sim_config(cfg, design, mechanism, families))
    res.extra.update({"design_mode": design.extra.get("mode"), "rho": design.extra.get("rho"),
                      "sigma": design.sigma, "epsilon": design.epsilon, "seed": cfg.seed,
                      "K": design.k.tolist()})
    return res


def _simulate_job(raw, design_path, mechanism):
    cfg = ExperimentConfig(raw)
    des = synthesis.StcDesign.load(design_path)
    res = simulate_design(cfg, des, mechanism)
    w = cfg.sim["jc_weights"]
    jc = closedloop.performance_index(res, w["q"], w["r"], w["q0"])
    out = cfg.output / "runs" / f"{Path(design_path).stem}__{mechanism}"
    closedloop.write_bundle(res, out, cfg.sim["threshold"], jc)
    return str(out)


def run_simulate(cfg: ExperimentConfig, design_paths=None) -> list[str]:
    if design_paths is None:
        design_paths = sorted((cfg.output / "designs").glob("*.json"))
        if not design_paths:
            raise ConfigError(f"no designs under {cfg.output / 'designs'}; run the design command first")
    jobs = []
    for path in design_paths:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"design file not found: {path}")
        des = synthesis.StcDesign.load(path)
        mode = des.extra.get("mode", MODE_DATA)
        for mech in cfg.sim["mechanisms"].get(mode, []):
            jobs.append((cfg.raw, str(path), mech))
    bundles = _map(_simulate_job, jobs)
    write_plot_stub(cfg.output)
    return bundles


PLOT_STUB = '''"""Plot the run bundles next to this file (needs matplotlib)."""
import csv
import json
from pathlib import Path

import matplotlib.pyplot as plt

root = Path(__file__).parent / "runs"
fig, (ax_err, ax_jc) = plt.subplots(2, 1, figsize=(8, 7))
for run in sorted(root.iterdir()):
    with open(run / "errors.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    summary = json.loads((run / "summary.json").read_text())
    dt = summary["sample_period"]
    t = [int(r[0]) * dt for r in rows]
    worst = [max(abs(float(v)) for v in r[1:]) for r in rows]
    ax_err.semilogy(t, worst, label=run.name)
    with open(run / "jc.csv") as fh:
        jc = list(csv.reader(fh))[1:]
    ax_jc.plot([int(r[0]) * dt for r in jc], [float(r[1]) for r in jc], label=run.name)
ax_err.set_ylabel("max |delta|")
ax_jc.set_ylabel("J^c")
ax_jc.set_xlabel("time [s]")
ax_err.legend(fontsize=6)
fig.savefig(Path(__file__).parent / "runs.png", dpi=120)
'''


def write_plot_stub(output: Path) -> Path:
    path = Path(output) / "plot_runs.py"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(PLOT_STUB)
    return path


# ---------------------------------------------------------------- compare

def _fmt(v):
    if v is None:
        return "never"
    return f"{v:.2f}"


def run_compare(cfg: ExperimentConfig, bundles=None) -> tuple[Path, Path]:
    """Steady-state time table (pipelines x rho) plus trigger totals."""
    if bundles is None:
        bundles = sorted(p.parent for p in (cfg.output / "runs").glob("*/summary.json"))
    if not bundles:
        raise ConfigError(f"no result bundles under {cfg.output / 'runs'}")
    rows = []
    for b in bundles:
        path = Path(b) / "summary.json"
        if not path.exists():
            raise ConfigError(f"bundle without summary.json: {b}")
        s = json.loads(path.read_text())
        rows.append({"bundle": Path(b).name, "pipeline": f"{s.get('design_mode')}/{s['mechanism']}",
                     "rho": s.get("rho"), "sigma": s.get("sigma"), "epsilon": s.get("epsilon"),
                     "steady_state_time": s["steady_state_time"], "total_triggers": s["total_triggers"],
                     "h_infinity_ratio": s.get("h_infinity_ratio")})
    rows.sort(key=lambda r: (r["pipeline"], r["sigma"] or 0, r["epsilon"] or 0,
                             -1 if r["rho"] is None else r["rho"]))
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "compare.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})

    pipelines = sorted({(r["pipeline"], r["sigma"], r["epsilon"]) for r in rows})
    rhos = sorted({r["rho"] for r in rows if r["rho"] is not None})
    lines = ["# Steady-state time [s]", "",
             "| pipeline | sigma | epsilon | " + " | ".join(f"rho={r}" for r in rhos) + " | nonincreasing |",
             "|---|---|---|" + "---|" * len(rhos) + "---|"]
    for pipe, sig, eps in pipelines:
        sel = {r["rho"]: r for r in rows if (r["pipeline"], r["sigma"], r["epsilon"]) == (pipe, sig, eps)}
        if not any(k is not None for k in sel):
            continue
        times = [sel[r]["steady_state_time"] if r in sel else None for r in rhos]
        finite = [math.inf if v is None else v for v in times]
        mono = all(a >= b for a, b in zip(finite, finite[1:]))
        lines.append(f"| {pipe} | {sig:g} | {eps:g} | " + " | ".join(_fmt(v) for v in times)
                     + f" | {'yes' if mono else 'no'} |")
    lines += ["", "# Trigger totals", "", "| bundle | triggers | H-inf ratio |", "|---|---|---|"]
    for r in rows:
        ratio = "" if r["h_infinity_ratio"] is None else f"{r['h_infinity_ratio']:.4g}"
        lines.append(f"| {r['bundle']} | {r['total_triggers']} | {ratio} |")
    md_path = out / "compare.md"
    md_path.write_text("\n".join(lines) + "\n")
    return md_path, csv_path
