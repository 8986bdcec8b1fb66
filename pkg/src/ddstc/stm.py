"""Self-triggering mechanisms: how many steps an agent may wait before its
next broadcast.

All mechanisms work on the tracking error ``delta = x - x0``.  The leader is
autonomous, so ``delta`` obeys the follower dynamics exactly and the
error since the last broadcast after ``s`` held steps is

    e(s) = (A^s - I) delta + B^s K^s z

where ``K^s z`` is the input ``K z`` repeated ``s`` times.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import DualTheta
from .plant import SystemMatrices, lift_family

MODEL_BASED = "model-based"
DATA_DRIVEN = "data-driven"
ROBUST = "robust"
MECHANISMS = (MODEL_BASED, DATA_DRIVEN, ROBUST)

DEFAULT_S_BAR = 40
ALPHA_SLACK = 1e-8


@dataclass(frozen=True)
class TriggerContext:
    agent: int
    delta: np.ndarray
    z: np.ndarray
    k: np.ndarray
    phi: np.ndarray
    sigma: float
    s_bar: int = DEFAULT_S_BAR

    def __post_init__(self):
        if self.s_bar < 1:
            raise ValueError("s_bar must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=float).ravel())
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).ravel())
        object.__setattr__(self, "k", np.atleast_2d(np.asarray(self.k, dtype=float)))
        object.__setattr__(self, "phi", np.atleast_2d(np.asarray(self.phi, dtype=float)))

    @property
    def input(self) -> np.ndarray:
        return self.k @ self.z

    @property
    def threshold(self) -> float:
        """sigma z^T Phi z."""
        return float(self.sigma * self.z @ self.phi @ self.z)


@dataclass(frozen=True)
class EventRecord:
    agent: int
    t: int
    s: int
    mechanism: str
    alpha: float | None = None

    @property
    def certified(self) -> bool:
        return self.alpha is not None


def _lifts(sys, s_bar, cache):
    if cache is not None and len(cache) >= s_bar:
        return cache
    return lift_family(sys, s_bar)


def error_rollout(ctx: TriggerContext, sys: SystemMatrices, lifts=None) -> np.ndarray:
    """e(s) for s = 1..s_bar from the lifted model (rows)."""
    lifts = _lifts(sys, ctx.s_bar, lifts)
    u = ctx.input
    out = np.empty((ctx.s_bar, sys.n))
    for s in range(1, ctx.s_bar + 1):
        ls = lifts[s - 1]
        out[s - 1] = ls.a_s @ ctx.delta - ctx.delta + ls.b_s @ np.tile(u, s)
    return out


def model_based_interval(ctx: TriggerContext, sys: SystemMatrices, lifts=None) -> int:
    """First s with e^T Phi e >= sigma z^T Phi z (capped at s_bar).

    A zero error never triggers, so a state at rest with z = 0 waits for
    the cap; any nonzero tie counts as a trigger.
    """
    thr = ctx.threshold
    for s, e in enumerate(error_rollout(ctx, sys, lifts), start=1):
        lhs = float(e @ ctx.phi @ e)
        if lhs > 0 and lhs >= thr:
            return s
    return ctx.s_bar


def trigger_margin(ctx: TriggerContext, a_s, b_s) -> float:
    """sigma z^T Phi z - e^T Phi e for a given lifted pair; >= 0 means no trigger yet."""
    s = b_s.shape[1] // ctx.k.shape[0]
    e = a_s @ ctx.delta + b_s @ np.tile(ctx.input, s) - ctx.delta
    return ctx.threshold - float(e @ ctx.phi @ e)


def alpha_search(f, q, lo: float = -9.0, hi: float = 9.0, slack: float = ALPHA_SLACK,
                 tol: float = 1e-6, max_iter: int = 200):
    """Find alpha > 0 with lambda_min(F - alpha Q) >= -slack, or None.

    lambda_min(F - alpha Q) is concave in alpha, hence unimodal in
    log10(alpha); a golden-section search over [lo, hi] maximises it and
    stops as soon as a certifying alpha is seen.
    """
    f = np.asarray(f, dtype=float)
    q = np.asarray(q, dtype=float)
    if f.shape != q.shape or f.shape[0] != f.shape[1]:
        raise ValueError("F and Q must be square and of equal size")
    if not np.any(q):
        mid = 10.0 ** (0.5 * (lo + hi))
        return mid if np.linalg.eigvalsh(f)[0] >= -slack else None

    def g(x):
        return float(np.linalg.eigvalsh(f - (10.0 ** x) * q)[0])

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    gc, gd = g(c), g(d)
    for x, gx in ((c, gc), (d, gd)):
        if gx >= -slack:
            return 10.0 ** x
    for _ in range(max_iter):
        if b - a < tol:
            break
        if gc >= gd:
            b, d, gd = d, c, gc
            c = b - inv_phi * (b - a)
            gc = g(c)
            if gc >= -slack:
                return 10.0 ** c
        else:
            a, c, gc = c, d, gd
            d = a + inv_phi * (b - a)
            gd = g(d)
            if gd >= -slack:
                return 10.0 ** d
    for x in (a, b, 0.5 * (a + b)):
        if g(x) >= -slack:
            return 10.0 ** x
    return None


def _xi(ctx: TriggerContext, s: int) -> np.ndarray:
    return np.concatenate([ctx.delta, np.tile(ctx.input, s)])


def fq_matrices(ctx: TriggerContext, dual: DualTheta):
    """(F, Q) exactly as the data-driven triggering condition prints them.

    F and Q act on ``[v; 1; 1]`` with ``v`` the predicted ``delta`` after
    ``s`` steps; they are (n + 2) square.
    """
    n = ctx.delta.size
    xi = _xi(ctx, dual.s)
    phi = ctx.phi
    f = np.zeros((n + 2, n + 2))
    f[:n, :n] = -phi
    f[:n, n] = phi @ ctx.delta
    f[n, :n] = f[:n, n]
    f[n, n] = -float(ctx.delta @ phi @ ctx.delta)
    f[n + 1, n + 1] = ctx.threshold
    th = dual.theta_hat
    q = np.zeros((n + 2, n + 2))
    q[:n, :n] = th[:n, :n]
    q[:n, n] = th[:n, n:] @ xi
    q[n, :n] = q[:n, n]
    q[n, n] = float(xi @ th[n:, n:] @ xi)
    q[n + 1, n + 1] = float(xi @ dual.m_aug @ xi)
    return f, q


def reduced_fq(ctx: TriggerContext, dual: DualTheta):
    """(F, Q) on ``[u; 1]`` with ``v = Zc xi + u``.

    Identifying the two trailing unit entries of ``fq_matrices`` and
    shifting ``v`` to the least-squares prediction gives an (n + 1) pair
    whose S-procedure is lossless:

        F = [[-Phi, -Phi d], [., sigma|z|^2_Phi - |d|^2_Phi]],  d = Zc xi - delta
        Q = [[-R_hat, 0], [0, xi^T (-Theta11^{-1} + M) xi]]
    """
    n = ctx.delta.size
    xi = _xi(ctx, dual.s)
    phi = ctx.phi
    d = dual.center @ xi - ctx.delta
    f = np.zeros((n + 1, n + 1))
    f[:n, :n] = -phi
    f[:n, n] = -phi @ d
    f[n, :n] = f[:n, n]
    f[n, n] = ctx.threshold - float(d @ phi @ d)
    q = np.zeros((n + 1, n + 1))
    q[:n, :n] = -dual.r_hat
    q[n, n] = float(xi @ (dual.gram_inv + dual.m_aug) @ xi)
    return f, q


def certify_step(ctx: TriggerContext, dual: DualTheta, noise_sqrt=None):
    """Return alpha certifying 'no trigger within s' for every plant in the set, or None.

    The pair from :func:`reduced_fq` is whitened with ``S_c^{1/2}`` (the
    inverse square root of ``R_hat``) and balanced so that all entries are
    of order one before the alpha search; congruences leave the set of
    certifying alphas unchanged and the final rescaling is undone on return.
    """
    n = ctx.delta.size
    xi = _xi(ctx, dual.s)
    phi = ctx.phi
    scale = max(np.linalg.norm(ctx.delta), np.linalg.norm(ctx.z))
    if scale == 0.0:
        # nothing moves: the condition reduces to alpha R_hat >= Phi
        lam = np.linalg.eigvals(np.linalg.solve(dual.r_hat, phi)).real.max()
        return float(max(lam, 0.0) * (1.0 + 1e-6) + 1e-300)
    xi = xi / scale
    delta = ctx.delta / scale
    z = ctx.z / scale
    d = dual.center @ xi - delta
    fbar = float(ctx.sigma * z @ phi @ z - d @ phi @ d)
    rho_xi = float(xi @ (dual.gram_inv + dual.m_aug) @ xi)
    if fbar <= 0.0:
        return None
    w = noise_sqrt if noise_sqrt is not None else dual.noise_sqrt
    phit = w @ phi @ w
    s1 = float(np.linalg.eigvalsh(phit)[-1])
    g = w @ phi @ d
    f = np.zeros((n + 1, n + 1))
    f[:n, :n] = -phit / s1
    f[:n, n] = -g / math.sqrt(s1 * fbar)
    f[n, :n] = f[:n, n]
    f[n, n] = 1.0
    q = np.zeros((n + 1, n + 1))
    q[:n, :n] = -np.eye(n)
    q[n, n] = s1 * rho_xi / fbar
    alpha = alpha_search(f, q, lo=-3.0, hi=12.0)
    if alpha is None:
        return None
    return alpha * s1


class DataDrivenScheduler:
    """Data-driven interval computation for one agent.

    Holds the per-depth duals and the whitening factors so each event only
    performs the small per-depth certification.
    """

    def __init__(self, duals):
        self.duals = list(duals)
        self._sqrt = [None if d is None else d.noise_sqrt for d in self.duals]

    @property
    def depth(self) -> int:
        k = 0
        for d in self.duals:
            if d is None:
                break
            k += 1
        return k

    def interval(self, ctx: TriggerContext):
        """Ascending scan: keep the largest certified s, stop at the first failure.

        Returns ``(s, alpha)``; when not even s = 1 can be certified the
        agent falls back to broadcasting every step with ``alpha = None``.
        """
        best, best_alpha = 0, None
        limit = min(ctx.s_bar, self.depth)
        for s in range(1, limit + 1):
            dual = self.duals[s - 1]
            if dual.n + s * ctx.k.shape[0] != dual.m or dual.center.shape != (dual.n, dual.m):
                raise ValueError(f"dual kernel at depth {s} has inconsistent dimensions")
            alpha = certify_step(ctx, dual, self._sqrt[s - 1])
            if alpha is None:
                break
            best, best_alpha = s, alpha
        if best == 0:
            return 1, None
        return best, best_alpha


def data_driven_interval(ctx: TriggerContext, dual_thetas) -> tuple[int, float | None]:
    if ctx.s_bar == 1 and not dual_thetas:
        return 1, None
    return DataDrivenScheduler(dual_thetas).interval(ctx)


def disturbance_gain(sys: SystemMatrices, phi, s_bar: int, d_bar, bound: str = "constant") -> np.ndarray:
    """Per-depth disturbance contribution to the robust triggering test.

    ``constant``:   d^T Xi^T Xi d with Xi = sum_j Phi^{1/2} A^j B_d and the
                    bound used as a constant vector ``d``.
    ``worst-case``: (sum_j ||Phi^{1/2} A^j B_d|| * ||d||)^2, a bound valid
                    for every disturbance sequence with ||d(t)|| <= ||d||.
    """
    phi_half = _sqrt_spd(phi)
    n_d = sys.b_d.shape[1]
    d_vec = np.full(n_d, float(d_bar)) if np.ndim(d_bar) == 0 else np.asarray(d_bar, dtype=float)
    if np.any(d_vec < 0):
        raise ValueError("disturbance bound must be nonnegative")
    out = np.empty(s_bar)
    xi = np.zeros((sys.n, n_d))
    norm_sum = 0.0
    a_pow = np.eye(sys.n)
    dn = float(np.linalg.norm(d_vec))
    for s in range(1, s_bar + 1):
        term = phi_half @ a_pow @ sys.b_d
        xi = xi + term
        norm_sum += np.linalg.norm(term, 2)
        a_pow = sys.a @ a_pow
        if bound == "constant":
            v = xi @ d_vec
            out[s - 1] = float(v @ v)
        elif bound == "worst-case":
            out[s - 1] = (norm_sum * dn) ** 2
        else:
            raise ValueError(f"unknown disturbance bound {bound!r}")
    return out


def _sqrt_spd(mat):
    lam, vec = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.T


def robust_interval(ctx: TriggerContext, sys: SystemMatrices, d_bar, lifts=None,
                    dist_gain=None, bound: str = "constant") -> int:
    """First s where the disturbance-inflated error bound reaches the threshold.

    eta0(s) = 2 |eta1 + eta2|^2_Phi + 2 * disturbance term, where
    eta1 + eta2 is the nominal error prediction.  Ties trigger.
    """
    if np.any(np.asarray(d_bar) < 0):
        raise ValueError("disturbance bound must be nonnegative")
    if dist_gain is None:
        dist_gain = disturbance_gain(sys, ctx.phi, ctx.s_bar, d_bar, bound)
    thr = ctx.threshold
    for s, e in enumerate(error_rollout(ctx, sys, lifts), start=1):
        eta0 = 2.0 * float(e @ ctx.phi @ e) + 2.0 * dist_gain[s - 1]
        if eta0 >= thr:
            return s
    return ctx.s_bar


def save_events_csv(events, path) -> None:
    with open(path, "w") as fh:
        fh.write("agent,t_k,s_k,mechanism,alpha\n")
        for ev in events:
            alpha = "" if ev.alpha is None else repr(float(ev.alpha))
            fh.write(f"{ev.agent},{ev.t},{ev.s},{ev.mechanism},{alpha}\n")


def load_events_csv(path) -> list[EventRecord]:
    out = []
    with open(path) as fh:
        fh.readline()
        for line in fh:
            if not line.strip():
                continue
            a, t, s, mech, alpha = line.rstrip("\n").split(",")
            out.append(EventRecord(int(a), int(t), int(s), mech, float(alpha) if alpha else None))
    return out
