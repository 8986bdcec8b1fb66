"""Distributed self-triggered closed loop and evaluation metrics.

One virtual clock drives every follower.  At step ``t`` all agents whose
trigger is due first broadcast their current tracking error
``delta_i = x_i - x_0``; each of them then forms ``z_i`` from the latest
broadcasts (zero latency), holds ``u_i = K z_i`` and asks its mechanism
for the next interval.  The leader never triggers.

Broadcasting ``delta`` rather than ``x`` keeps ``z_i`` a combination of
quantities sampled together with the leader, so the leader's motion
cancels and the held-input dynamics are exactly those of ``delta``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import stm
from .dataset import LiftedFamily
from .plant import SystemMatrices, lift_family
from .synthesis import StcDesign
from .topology import Topology, build_graph_matrices

DEFAULT_THRESHOLD = 0.1
DEFAULT_SAMPLE_PERIOD = 0.02

# initial states of the pendulum experiment: leader first, then followers 1..6
PENDULUM_LEADER0 = (2.0, -1.0)
PENDULUM_FOLLOWERS0 = ((-4.0, 2.0), (4.0, 2.0), (2.0, 0.0), (3.0, -1.0), (-5.0, -3.0), (2.0, 0.5))

DisturbanceLaw = Callable[[int, int], np.ndarray]


class SimulationError(ValueError):
    pass


def sinusoidal_disturbance(d_bar: float = 0.01, sample_period: float = DEFAULT_SAMPLE_PERIOD,
                           dim: int = 2) -> DisturbanceLaw:
    """d_i(t) = d_bar * sin(3 pi t + pi i / 8) in every channel, t in seconds.

    ``agent`` is 1-based.
    """
    def law(t: int, agent: int) -> np.ndarray:
        return np.full(dim, d_bar * math.sin(3.0 * math.pi * t * sample_period + math.pi * agent / 8.0))
    return law


@dataclass
class SimConfig:
    """``plant`` moves the agents; ``stm_model`` (default: the plant) is what
    the model-based and robust mechanisms predict with."""

    topology: Topology
    plant: SystemMatrices
    design: StcDesign
    mechanism: str
    leader0: np.ndarray
    followers0: np.ndarray
    horizon: int
    disturbance: DisturbanceLaw | None = None
    seed: int = 0
    s_bar: int = stm.DEFAULT_S_BAR
    families: list | None = None
    d_bar: float = 0.0
    robust_bound: str = "constant"
    sample_period: float = DEFAULT_SAMPLE_PERIOD
    stm_model: SystemMatrices | None = None

    def __post_init__(self):
        self.leader0 = np.asarray(self.leader0, dtype=float).ravel()
        self.followers0 = np.atleast_2d(np.asarray(self.followers0, dtype=float))
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise SimulationError(f"horizon must be a positive integer, got {self.horizon}")
        self.horizon = int(self.horizon)
        n = self.plant.n
        if self.leader0.shape != (n,):
            raise SimulationError(f"leader state has shape {self.leader0.shape}, expected ({n},)")
        if self.followers0.shape != (self.topology.n_followers, n):
            raise SimulationError(f"follower states have shape {self.followers0.shape}, "
                                  f"expected ({self.topology.n_followers}, {n})")
        if self.mechanism not in stm.MECHANISMS:
            raise SimulationError(f"unknown mechanism {self.mechanism!r}; expected one of {stm.MECHANISMS}")
        if self.mechanism == stm.DATA_DRIVEN:
            if self.families is None or len(self.families) != self.topology.n_followers:
                raise SimulationError("data-driven mechanism needs one lifted family per follower")
        if self.mechanism == stm.ROBUST and self.d_bar < 0:
            raise SimulationError("disturbance bound must be nonnegative")
        if self.stm_model is not None and (self.stm_model.n, self.stm_model.p) != (n, self.plant.p):
            raise SimulationError("STM model dimensions differ from the plant")
        if self.disturbance is not None and self.plant.b_d is None:
            raise SimulationError("a disturbance law needs a plant with a disturbance channel")


@dataclass
class SimResult:
    """Trajectories are indexed by step; ``states[:, 0]`` is the leader."""

    states: np.ndarray
    inputs: np.ndarray
    errors: np.ndarray
    disturbances: np.ndarray
    events: list
    sample_period: float
    mechanism: str
    extra: dict = field(default_factory=dict)

    @property
    def n_followers(self) -> int:
        return self.errors.shape[1]

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    @property
    def trigger_counts(self) -> list[int]:
        counts = [0] * self.n_followers
        for ev in self.events:
            counts[ev.agent - 1] += 1
        return counts


def _schedulers(cfg: SimConfig):
    out = []
    for fam in cfg.families:
        duals = fam.duals if isinstance(fam, LiftedFamily) else fam
        out.append(stm.DataDrivenScheduler(duals))
    return out


def run(cfg: SimConfig) -> SimResult:
    sys, design = cfg.plant, cfg.design
    n, p = sys.n, sys.p
    topo = cfg.topology
    n_f = topo.n_followers
    horizon = cfg.horizon
    adjacency, pinning = topo.adjacency, topo.pinning
    degree = adjacency.sum(axis=1) + pinning
    build_graph_matrices(topo)

    model = sys if cfg.stm_model is None else cfg.stm_model
    lifts = lift_family(model, cfg.s_bar)
    schedulers = _schedulers(cfg) if cfg.mechanism == stm.DATA_DRIVEN else None
    dist_gain = None
    if cfg.mechanism == stm.ROBUST:
        dist_gain = stm.disturbance_gain(model, design.phi, cfg.s_bar, cfg.d_bar, cfg.robust_bound)

    states = np.empty((horizon + 1, n_f + 1, n))
    inputs = np.zeros((horizon, n_f, p))
    dist = np.zeros((horizon, n_f, sys.b_d.shape[1] if sys.b_d is not None else n))
    states[0, 0] = cfg.leader0
    states[0, 1:] = cfg.followers0
    broadcast = cfg.followers0 - cfg.leader0
    held = np.zeros((n_f, p))
    next_t = np.zeros(n_f, dtype=int)
    events = []

    for t in range(horizon):
        x0 = states[t, 0]
        xs = states[t, 1:]
        due = np.flatnonzero(next_t == t)
        if due.size:
            broadcast[due] = xs[due] - x0
            for i in due:
                z = degree[i] * broadcast[i] - adjacency[i] @ broadcast
                held[i] = design.k @ z
                ctx = stm.TriggerContext(i + 1, broadcast[i], z, design.k, design.phi,
                                         design.sigma, cfg.s_bar)
                alpha = None
                if cfg.mechanism == stm.MODEL_BASED:
                    s = stm.model_based_interval(ctx, model, lifts)
                elif cfg.mechanism == stm.DATA_DRIVEN:
                    s, alpha = schedulers[i].interval(ctx)
                else:
                    s = stm.robust_interval(ctx, model, cfg.d_bar, lifts, dist_gain)
                events.append(stm.EventRecord(i + 1, t, int(s), cfg.mechanism, alpha))
                next_t[i] = t + s
        inputs[t] = held
        # one product for leader and followers keeps coincident states bit-identical
        free = states[t] @ sys.a.T
        states[t + 1, 0] = free[0]
        nxt = free[1:] + held @ sys.b.T
        if cfg.disturbance is not None:
            for i in range(n_f):
                dist[t, i] = cfg.disturbance(t, i + 1)
            nxt = nxt + dist[t] @ sys.b_d.T
        states[t + 1, 1:] = nxt

    errors = states[:, 1:] - states[:, :1]
    return SimResult(states, inputs, errors, dist, events, cfg.sample_period, cfg.mechanism)


def event_contexts(result: SimResult, topology: Topology, design: StcDesign,
                   s_bar: int = stm.DEFAULT_S_BAR) -> list[tuple[stm.EventRecord, stm.TriggerContext]]:
    """Rebuild the trigger context of every logged event from the trajectory.

    Replays the broadcast log: an agent's broadcast at its event time is its
    tracking error at that step, and ``z_i`` uses the latest broadcasts
    available after all agents due at that step have sent theirs.
    """
    a = topology.adjacency
    degree = a.sum(axis=1) + topology.pinning
    latest = result.errors[0].copy()
    out = []
    by_time = {}
    for ev in result.events:
        by_time.setdefault(ev.t, []).append(ev)
    for t in sorted(by_time):
        evs = by_time[t]
        for ev in evs:
            latest[ev.agent - 1] = result.errors[t, ev.agent - 1]
        for ev in evs:
            i = ev.agent - 1
            z = degree[i] * latest[i] - a[i] @ latest
            out.append((ev, stm.TriggerContext(ev.agent, latest[i].copy(), z, design.k, design.phi,
                                               design.sigma, s_bar)))
    return out


def performance_index(result: SimResult, q=10.0, r=5.0, q0=3.0) -> np.ndarray:
    """J^c(t) for t = 0..T-1 (inputs are defined up to T-1).

    Weights may be scalars (times identity) or matrices shared by all
    agents.  The leader adds its state cost and no input cost.
    """
    n = result.states.shape[2]
    p = result.inputs.shape[2]

    def as_mat(w, dim, label):
        m = w * np.eye(dim) if np.ndim(w) == 0 else np.asarray(w, dtype=float)
        if m.shape != (dim, dim) or np.linalg.eigvalsh(0.5 * (m + m.T))[0] <= 0:
            raise ValueError(f"{label} must be positive definite {dim}x{dim}")
        return m

    qm, rm, q0m = as_mat(q, n, "Q"), as_mat(r, p, "R"), as_mat(q0, n, "Q0")
    horizon = result.horizon
    xs = result.states[:horizon]
    state_cost = np.einsum("tai,ij,taj->t", xs, qm, xs)
    input_cost = np.einsum("tai,ij,taj->t", result.inputs, rm, result.inputs)
    err = result.errors[:horizon]
    error_cost = np.einsum("tai,ij,taj->t", err, q0m, err)
    total = np.cumsum(state_cost + input_cost + error_cost)
    if total[0] <= 0:
        raise ValueError("accumulated cost is zero at the first step; J^c is undefined")
    return np.log(total)


def steady_state_time(result: SimResult, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Earliest time after which max_i ||delta_i||_inf stays within ``threshold``."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    worst = np.abs(result.errors).max(axis=(1, 2))
    above = np.flatnonzero(worst > threshold)
    if above.size == 0:
        return 0.0
    last = int(above[-1])
    if last == worst.size - 1:
        return math.inf
    return (last + 1) * result.sample_period


def h_infinity_ratio(result: SimResult) -> float:
    """sum ||delta||^2 over sum ||d||^2."""
    den = float(np.sum(result.disturbances ** 2))
    if den == 0.0:
        raise ValueError("disturbance energy is zero")
    return float(np.sum(result.errors[:result.horizon] ** 2)) / den


def lyapunov_values(result: SimResult, design: StcDesign) -> np.ndarray:
    """V(t) = sum_i s_i^T P s_i with delta_i = G s_i."""
    cert = design.certificates
    if "P" not in cert or "G" not in cert:
        raise ValueError("design carries no P/G certificate")
    g_inv = np.linalg.inv(cert["G"])
    s = result.errors @ g_inv.T
    return np.einsum("tai,ij,taj->t", s, cert["P"], s)


def summary(result: SimResult, threshold: float = DEFAULT_THRESHOLD) -> dict:
    out = {
        "mechanism": result.mechanism,
        "horizon": result.horizon,
        "sample_period": result.sample_period,
        "trigger_counts": result.trigger_counts,
        "total_triggers": len(result.events),
        "steady_state_threshold": threshold,
        "steady_state_time": steady_state_time(result, threshold),
        "uncertified_events": sum(1 for ev in result.events
                                  if ev.mechanism == stm.DATA_DRIVEN and not ev.certified),
        "h_infinity_ratio": None,
    }
    if np.any(result.disturbances != 0):
        out["h_infinity_ratio"] = h_infinity_ratio(result)
    if math.isinf(out["steady_state_time"]):
        out["steady_state_time"] = None
    out.update(result.extra)
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if not isinstance(v, (int, np.integer)) else int(v) for v in row])


def write_bundle(result: SimResult, out_dir, threshold: float = DEFAULT_THRESHOLD, jc=None) -> Path:
    """states.csv, errors.csv, events.csv, jc.csv and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_t, n_a, n = result.states.shape
    header = ["t"] + [f"x{a}_{j}" for a in range(n_a) for j in range(n)]
    _write_rows(out / "states.csv", header,
                ([t] + list(result.states[t].ravel()) for t in range(n_t)))
    header = ["t"] + [f"delta{a + 1}_{j}" for a in range(n_a - 1) for j in range(n)]
    _write_rows(out / "errors.csv", header,
                ([t] + list(result.errors[t].ravel()) for t in range(n_t)))
    stm.save_events_csv(result.events, out / "events.csv")
    if jc is None:
        jc = performance_index(result)
    _write_rows(out / "jc.csv", ["t", "jc"], ([t, v] for t, v in enumerate(jc)))
    with open(out / "summary.json", "w") as fh:
        json.dump(summary(result, threshold), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
