"""Agent dynamics: LTI matrices, s-step lifting and one-step evolution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import Topology


@dataclass(frozen=True)
class SystemMatrices:
    """x+ = A x + B u + E w (offline) or + B_d d (online)."""

    a: np.ndarray
    b: np.ndarray
    e: np.ndarray | None = None
    b_d: np.ndarray | None = None

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.asarray(self.b, dtype=float)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        n = a.shape[0]
        if a.shape != (n, n):
            raise ValueError(f"A must be square, got {a.shape}")
        if b.shape[0] != n:
            raise ValueError(f"B has {b.shape[0]} rows, expected {n}")
        e = self.e
        if e is not None:
            e = np.atleast_2d(np.asarray(e, dtype=float))
            if e.shape[0] != n:
                raise ValueError(f"E has {e.shape[0]} rows, expected {n}")
            if np.linalg.matrix_rank(e) < e.shape[1]:
                raise ValueError("E must have full column rank")
        b_d = self.b_d
        if b_d is not None:
            b_d = np.atleast_2d(np.asarray(b_d, dtype=float))
            if b_d.shape[0] != n:
                raise ValueError(f"B_d has {b_d.shape[0]} rows, expected {n}")
        elif e is not None:
            b_d = e
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "b_d", b_d)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def p(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True)
class LiftedSystem:
    s: int
    a_s: np.ndarray
    b_s: np.ndarray

    def stacked_gain(self, k) -> np.ndarray:
        """K repeated s times vertically."""
        return np.tile(np.atleast_2d(k), (self.s, 1))

    def propagate(self, delta, z, k) -> np.ndarray:
        return self.a_s @ delta + self.b_s @ (self.stacked_gain(k) @ z)


def lift(sys: SystemMatrices, s: int) -> LiftedSystem:
    if int(s) != s or s < 1:
        raise ValueError(f"lift depth must be an integer >= 1, got {s}")
    s = int(s)
    blocks = [sys.b]
    a_pow = sys.a.copy()
    for _ in range(s - 1):
        blocks.insert(0, a_pow @ sys.b)
        a_pow = sys.a @ a_pow
    return LiftedSystem(s, a_pow, np.hstack(blocks))


def lift_family(sys: SystemMatrices, s_max: int) -> list[LiftedSystem]:
    """Lifts for s = 1..s_max built by one running product (index s-1)."""
    out = [lift(sys, 1)]
    for s in range(2, s_max + 1):
        prev = out[-1]
        out.append(LiftedSystem(s, sys.a @ prev.a_s, np.hstack([sys.a @ prev.b_s[:, :sys.p], prev.b_s])))
    return out


def step(sys: SystemMatrices, x, u, w=None, *, channel: str = "e") -> np.ndarray:
    """One step; ``channel`` selects E (offline noise) or B_d (online disturbance)."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (sys.n,):
        raise ValueError(f"state has shape {x.shape}, expected ({sys.n},)")
    if u.shape != (sys.p,):
        raise ValueError(f"input has shape {u.shape}, expected ({sys.p},)")
    nxt = sys.a @ x + sys.b @ u
    if w is not None:
        mat = {"e": sys.e, "d": sys.b_d}.get(channel)
        if mat is None:
            raise ValueError(f"no matrix for exogenous channel {channel!r}")
        w = np.atleast_1d(np.asarray(w, dtype=float))
        if w.shape != (mat.shape[1],):
            raise ValueError(f"exogenous input has shape {w.shape}, expected ({mat.shape[1]},)")
        nxt = nxt + mat @ w
    return nxt


def combined_measurement(topo: Topology, followers, leader) -> np.ndarray:
    """z_i = sum_j a_ij (x_i - x_j) + a_i0 (x_i - x_0) for every follower.

    ``followers`` is (N, n): one latest broadcast per follower.
    """
    xs = np.asarray(followers, dtype=float)
    x0 = np.asarray(leader, dtype=float)
    if xs.ndim != 2 or xs.shape[0] != topo.n_followers:
        raise ValueError(f"expected {topo.n_followers} follower broadcasts, got array of shape {xs.shape}")
    if np.any(~np.isfinite(xs)) or np.any(~np.isfinite(x0)):
        raise ValueError("missing broadcast entry (non-finite value)")
    a = topo.adjacency
    deg = a.sum(axis=1)
    return (deg + topo.pinning)[:, None] * xs - a @ xs - topo.pinning[:, None] * x0[None, :]


def pendulum_zoh(mass: float = 1.0, length: float = 1.0, gravity: float = 9.8,
                 sample_period: float = 0.02, e_scale: float = 0.01,
                 b_d_scale: float | None = None) -> SystemMatrices:
    """Zero-order-hold model of m l^2 a'' = -m g l a - u with state (angle, rate)."""
    for label, val in (("mass", mass), ("length", length), ("gravity", gravity),
                       ("sample_period", sample_period)):
        if not val > 0:
            raise ValueError(f"{label} must be positive, got {val}")
    w = np.sqrt(gravity / length)
    c, s = np.cos(w * sample_period), np.sin(w * sample_period)
    a = np.array([[c, s / w], [-w * s, c]])
    gain = 1.0 / (mass * length ** 2)
    b = -gain * np.array([[(1.0 - c) / w ** 2], [s / w]])
    e = e_scale * np.eye(2)
    b_d = e if b_d_scale is None else b_d_scale * np.eye(2)
    return SystemMatrices(a, b, e, b_d)
