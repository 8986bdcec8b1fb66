"""Offline experiments, data matrices and the quadratic descriptions of all
plants consistent with them.

Conventions.  For lift depth ``s`` the unknown is ``Z = [A^s  B^s]`` with
``m = n + s p`` columns.  A symmetric kernel ``Theta`` of size ``m + n``
describes the set ``{Z : [Z I] Theta [Z I]^T >= 0}``.  Because ``Theta`` is
built as ``T N T^T`` from data, its blocks can be written as

    Theta11 = -Xt Xt^T,   Theta21 = Y Xt^T,   Schur(Theta11) = S_c

with ``Xt = [Delta; U^s] L``, ``-Q = L L^T``.  The set is then the matrix
ellipsoid ``(Z - Zc) Xt Xt^T (Z - Zc)^T <= S_c`` around the least-squares
centre ``Zc``.  All dual quantities are computed from these factors rather
than by inverting ``Theta``, which would lose the noise block to rounding
whenever the noise level is many orders below the data level.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .plant import SystemMatrices, lift


class DataError(ValueError):
    pass


class SingularNoiseBlockError(DataError):
    pass


class BracketError(RuntimeError):
    pass


@dataclass(frozen=True)
class Trajectory:
    agent: int
    x: np.ndarray
    u: np.ndarray
    leader: np.ndarray
    w: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape[0] != self.u.shape[0] + 1:
            raise DataError(f"need one more state than inputs: {self.x.shape[0]} states, {self.u.shape[0]} inputs")
        if self.leader.shape != self.x.shape:
            raise DataError("leader states must match follower states")
        if self.w is not None and self.w.shape[0] != self.u.shape[0]:
            raise DataError("one noise sample per input is required")

    @property
    def delta(self) -> np.ndarray:
        return self.x - self.leader

    @property
    def horizon(self) -> int:
        return self.u.shape[0]


def uniform_inputs(bound: float = 1.0) -> Callable:
    def law(rng, t, p):
        return rng.uniform(-bound, bound, size=p)
    return law


def ball_noise(w_bar: float) -> Callable:
    """Uniform samples from the Euclidean ball of radius ``w_bar``."""
    def law(rng, t, n_w):
        v = rng.standard_normal(n_w)
        nrm = np.linalg.norm(v)
        r = w_bar * rng.uniform() ** (1.0 / n_w)
        return v * (r / nrm) if nrm > 0 else np.zeros(n_w)
    return law


def zero_law(rng, t, dim):
    return np.zeros(dim)


def collect_open_loop(sys: SystemMatrices, horizon: int, input_law=None, noise_law=None,
                      seed=0, x0=None, leader0=None, agent: int = 1) -> Trajectory:
    """Excite one follower open loop for ``horizon`` steps (``horizon`` inputs)."""
    if horizon < 1:
        raise DataError("horizon must be at least 1")
    if sys.e is None:
        raise DataError("open-loop collection needs the noise channel E")
    input_law = input_law or uniform_inputs(1.0)
    noise_law = noise_law or zero_law
    rng = np.random.default_rng(seed)
    n, p, n_w = sys.n, sys.p, sys.e.shape[1]
    x = np.zeros((horizon + 1, n))
    lead = np.zeros((horizon + 1, n))
    u = np.zeros((horizon, p))
    w = np.zeros((horizon, n_w))
    if x0 is not None:
        x[0] = x0
    if leader0 is not None:
        lead[0] = leader0
    for t in range(horizon):
        u[t] = input_law(rng, t, p)
        w[t] = noise_law(rng, t, n_w)
        x[t + 1] = sys.a @ x[t] + sys.b @ u[t] + sys.e @ w[t]
        lead[t + 1] = sys.a @ lead[t]
    return Trajectory(agent, x, u, lead, w)


@dataclass(frozen=True)
class DataMatrices:
    delta: np.ndarray
    delta_plus: dict
    u_s: dict
    rho: int
    s_max: int

    def regressor(self, s: int) -> np.ndarray:
        return np.vstack([self.delta, self.u_s[s]])


def assemble_matrices(traj: Trajectory, s_max: int, rho: int | None = None) -> DataMatrices:
    if s_max < 1:
        raise DataError("s_max must be >= 1")
    if rho is None:
        rho = traj.horizon - s_max + 1
    if rho < 1 or rho + s_max - 1 > traj.horizon:
        raise DataError(f"trajectory with {traj.horizon} inputs is too short for rho={rho}, s_max={s_max}")
    d, u = traj.delta, traj.u
    delta = d[:rho].T.copy()
    dplus = {s: d[s:rho + s].T.copy() for s in range(1, s_max + 1)}
    u_s = {s: np.vstack([u[r:r + rho].T for r in range(s)]) for s in range(1, s_max + 1)}
    return DataMatrices(delta, dplus, u_s, rho, s_max)


def lifted_noise_matrix(traj: Trajectory, sys: SystemMatrices, s: int, rho: int) -> np.ndarray:
    """W^s rebuilt from the recorded noise (test oracle only)."""
    if traj.w is None:
        raise DataError("trajectory carries no recorded noise")
    w = traj.w
    if s == 1:
        return w[:rho].T.copy()
    out = np.zeros((sys.n, rho))
    a_pow = np.eye(sys.n)
    for j in range(s - 1, -1, -1):
        out += a_pow @ sys.e @ w[j:j + rho].T
        a_pow = sys.a @ a_pow
    return out


@dataclass(frozen=True)
class NoiseQmi:
    q: np.ndarray
    s: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        q, s, r = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.q, self.s, self.r))
        if q.shape[0] != q.shape[1] or r.shape[0] != r.shape[1] or s.shape != (q.shape[0], r.shape[0]):
            raise DataError("noise QMI blocks have inconsistent shapes")
        if np.abs(r - r.T).max() > 1e-12 * max(1.0, np.abs(r).max()):
            raise DataError("R must be symmetric")
        if np.linalg.eigvalsh(0.5 * (q + q.T))[-1] >= 0:
            raise DataError("Q must be negative definite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "r", r)

    @property
    def matrix(self) -> np.ndarray:
        return np.block([[self.q, self.s], [self.s.T, self.r]])

    def value(self, w_mat) -> np.ndarray:
        """[W^T; I]^T N [W^T; I] for a candidate noise matrix (dim x rho)."""
        wt = np.atleast_2d(w_mat).T
        stack = np.vstack([wt, np.eye(self.r.shape[0])])
        return stack.T @ self.matrix @ stack


def ball_noise_qmi(w_bar: float, rho: int, dim: int) -> NoiseQmi:
    """Q = -I, S = 0, R = w_bar^2 rho I: implied by ||w(t)|| <= w_bar for every sample."""
    return NoiseQmi(-np.eye(rho), np.zeros((rho, dim)), (w_bar ** 2) * rho * np.eye(dim))


def _is_neg_identity(q) -> bool:
    return bool(np.array_equal(np.diag(q), -np.ones(q.shape[0]))
                and np.count_nonzero(q) == q.shape[0])


def _noise_core(nq: NoiseQmi) -> np.ndarray:
    """R - S^T Q^{-1} S."""
    if not np.any(nq.s):
        return nq.r
    return nq.r - nq.s.T @ np.linalg.solve(nq.q, nq.s)


@dataclass
class ThetaBlock:
    theta: np.ndarray
    s: int
    agent: int
    n: int
    p: int
    regressor: np.ndarray
    dplus: np.ndarray
    e_s: np.ndarray
    noise: NoiseQmi

    @property
    def m(self) -> int:
        return self.n + self.s * self.p

    @cached_property
    def _factors(self):
        q, s_mat = self.noise.q, self.noise.s
        if _is_neg_identity(q):
            chol = np.eye(q.shape[0])
            xt = self.regressor
        else:
            chol = np.linalg.cholesky(-0.5 * (q + q.T))
            xt = self.regressor @ chol
        if np.any(s_mat):
            b = sla.solve_triangular(chol, s_mat @ self.e_s.T, lower=True).T
        else:
            b = np.zeros_like(self.dplus)
        y = self.dplus @ chol - b
        return xt, y, chol

    @cached_property
    def gram(self) -> np.ndarray:
        """-Theta11 = Xt Xt^T."""
        xt = self._factors[0]
        return xt @ xt.T

    @cached_property
    def center(self) -> np.ndarray:
        """Least-squares centre Zc = -Theta21 Theta11^{-1}."""
        xt, y, _ = self._factors
        sol, *_ = np.linalg.lstsq(xt.T, y.T, rcond=None)
        return sol.T

    @cached_property
    def schur(self) -> np.ndarray:
        """Schur complement of Theta11 in Theta, formed without cancellation."""
        xt, y, _ = self._factors
        core = _noise_core(self.noise)
        base = self.e_s @ core @ self.e_s.T
        rho, m = xt.shape[1], xt.shape[0]
        if rho > m:
            q1, _ = np.linalg.qr(xt.T, mode="reduced")
            resid = y - (y @ q1) @ q1.T
            base = base - resid @ resid.T
        return 0.5 * (base + base.T)

    def value(self, z) -> np.ndarray:
        """[Z I] Theta [Z I]^T; PSD iff Z explains the data."""
        stack = np.hstack([np.atleast_2d(z), np.eye(self.n)])
        return stack @ self.theta @ stack.T


def build_theta(dm: DataMatrices, nq: NoiseQmi, e_s, s: int = 1, agent: int = 1) -> ThetaBlock:
    e_s = np.atleast_2d(np.asarray(e_s, dtype=float))
    x = dm.regressor(s)
    dplus = dm.delta_plus[s]
    n, rho = dm.delta.shape
    p = dm.u_s[1].shape[0]
    if nq.q.shape[0] != rho:
        raise DataError(f"noise QMI is for rho={nq.q.shape[0]}, data have rho={rho}")
    if e_s.shape != (n, nq.r.shape[0]):
        raise DataError(f"E^s has shape {e_s.shape}, expected ({n}, {nq.r.shape[0]})")
    top = np.hstack([-x, np.zeros((x.shape[0], e_s.shape[1]))])
    bottom = np.hstack([dplus, e_s])
    t = np.vstack([top, bottom])
    theta = t @ nq.matrix @ t.T
    return ThetaBlock(0.5 * (theta + theta.T), s, agent, n, p, x, dplus, e_s, nq)


def check_rank(theta: ThetaBlock, tol: float = 1e-10) -> bool:
    """Full-rank test of Theta through its two Schur factors.

    Theta is invertible iff Theta11 and its Schur complement are; testing
    the factors separately keeps the relative tolerance meaningful when the
    noise block is far smaller than the data block.
    """
    sv = np.linalg.svd(theta.gram, compute_uv=False)
    if sv[0] <= 0 or sv[-1] <= tol * sv[0]:
        return False
    scale = np.linalg.norm(theta.e_s @ _noise_core(theta.noise) @ theta.e_s.T, 2)
    if scale <= 0:
        return False
    lam = np.linalg.eigvalsh(theta.schur)
    return bool(lam[0] > tol * scale)


def lifted_noise_bound(base: NoiseQmi, sys_norm_bound, s: int, rho: int, e,
                       w_bar: float | None = None) -> NoiseQmi:
    """Superset QMI for W^s = [A^{s-1}E ... E] W_lifted under ||w(t)|| <= w_bar.

    ``sys_norm_bound`` is either one scalar bounding ||A|| (then ||A^j|| is
    bounded by its j-th power) or a sequence whose (j-1)-th entry bounds
    ||A^j|| for j = 1..s-1.  Every column of W^s has norm at most
    ``c = sum_j ||A^j|| ||E|| w_bar`` so ``W^s W^s^T <= c^2 rho I``.
    """
    if s == 1:
        return base
    if w_bar is None:
        r0 = base.r[0, 0]
        ball = (np.allclose(base.q, -np.eye(base.q.shape[0])) and not np.any(base.s)
                and np.allclose(base.r, r0 * np.eye(base.r.shape[0])))
        if not ball:
            raise DataError("w_bar is required when the base bound is not of ball form")
        w_bar = float(np.sqrt(r0 / base.q.shape[0]))
    e = np.atleast_2d(e)
    if np.ndim(sys_norm_bound) == 0:
        lam = float(sys_norm_bound)
        if lam < 0:
            raise DataError("norm bound must be nonnegative")
        powers = [lam ** j for j in range(s)]
    else:
        seq = [float(v) for v in sys_norm_bound]
        if len(seq) < s - 1:
            raise DataError(f"need norm bounds for powers 1..{s - 1}, got {len(seq)}")
        if min(seq[:s - 1], default=0.0) < 0:
            raise DataError("norm bounds must be nonnegative")
        powers = [1.0] + seq[:s - 1]
    c = sum(powers) * np.linalg.norm(e, 2) * w_bar
    n = e.shape[0]
    return NoiseQmi(-np.eye(rho), np.zeros((rho, n)), c * c * rho * np.eye(n))


def _sqrtm_psd(mat):
    lam, vec = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.T


def estimate_spectral_bound(theta: ThetaBlock, upper: float = 1e3) -> float:
    """Worst-case ||A|| over every [A B] the kernel admits.

    The admissible set is ``{Zc + P Omega Qm : ||Omega|| <= 1}`` with
    ``P = S_c^{1/2}`` and ``Qm = G^{-1/2} J`` (``J`` picks the A columns), so
    ``||A|| <= lam`` holds robustly iff, for some ``mu > 0``,
    ``lam >= lambda_max([[mu P P^T, -Ac], [-Ac^T, Qm^T Qm / mu]])``
    (Petersen's lemma, lossless for one full uncertainty block).  The
    right-hand side is quasi-convex in ``mu`` and is minimised by a bounded
    scalar search.
    """
    from scipy.optimize import minimize_scalar

    n = theta.n
    g = theta.gram
    sv = np.linalg.svd(g, compute_uv=False)
    if sv[0] <= 0 or sv[-1] <= 1e-14 * sv[0]:
        raise BracketError("data block is singular; no norm bound can be certified")
    sc = theta.schur
    if np.linalg.eigvalsh(sc)[0] < 0:
        raise BracketError("noise block is indefinite; the kernel set is empty or unbounded")
    ac = theta.center[:, :n]
    p = _sqrtm_psd(sc)
    ginv = np.linalg.inv(g)
    qq = ginv[:n, :n]  # Qm^T Qm
    pp = p @ p.T
    if not np.any(pp):
        val = float(np.linalg.norm(ac, 2))
    else:
        def lam_of(logmu):
            mu = np.exp(logmu)
            mat = np.block([[mu * pp, -ac], [-ac.T, qq / mu]])
            return float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[-1])
        # centre the bracket where both diagonal blocks balance
        mid = 0.5 * np.log(max(np.linalg.eigvalsh(qq)[-1], 1e-300) / max(np.linalg.eigvalsh(pp)[-1], 1e-300))
        res = minimize_scalar(lam_of, bounds=(mid - 40.0, mid + 40.0), method="bounded",
                              options={"xatol": 1e-10})
        val = min(res.fun, lam_of(mid))
    val *= 1.0 + 1e-9
    if not np.isfinite(val) or val > upper:
        raise BracketError(f"certified norm bound {val:.3g} exceeds the bracket {upper}")
    return val


@dataclass
class DualTheta:
    """Dual description of the kernel plus the augmentation M.

    ``theta_hat = [[-R_hat, S_hat], [S_hat^T, -Q_hat]]`` where
    ``[[Q_hat, S_hat^T], [S_hat, R_hat]]`` is the inverse of ``Theta``.
    """

    s: int
    n: int
    p: int
    r_hat: np.ndarray
    center: np.ndarray
    gram_inv: np.ndarray
    m_aug: np.ndarray
    noise_block: np.ndarray | None = None

    @cached_property
    def noise_sqrt(self) -> np.ndarray:
        """Symmetric square root of R_hat^{-1} (the noise block S_c)."""
        block = self.noise_block if self.noise_block is not None else np.linalg.inv(self.r_hat)
        return _sqrtm_psd(block)

    @property
    def m(self) -> int:
        return self.n + self.s * self.p

    @property
    def s_hat(self) -> np.ndarray:
        return self.r_hat @ self.center

    @property
    def q_hat(self) -> np.ndarray:
        return -self.gram_inv + self.center.T @ self.r_hat @ self.center

    @property
    def theta_hat(self) -> np.ndarray:
        return np.block([[-self.r_hat, self.s_hat], [self.s_hat.T, -self.q_hat]])

    @property
    def theta_inverse(self) -> np.ndarray:
        return np.block([[self.q_hat, self.s_hat.T], [self.s_hat, self.r_hat]])

    def value(self, z) -> np.ndarray:
        """[Z; I]^T Theta_hat [Z; I] + M, evaluated in centred form."""
        dz = np.atleast_2d(z) - self.center
        out = -dz.T @ self.r_hat @ dz + self.gram_inv + self.m_aug
        return 0.5 * (out + out.T)


def _spd_inverse(mat, what, pivot_tol=1e-12):
    lam = np.linalg.eigvalsh(mat)
    if lam[0] <= pivot_tol * max(abs(lam[-1]), np.finfo(float).tiny):
        raise SingularNoiseBlockError(f"{what} is singular or indefinite (eigenvalues {lam[0]:.3g} .. {lam[-1]:.3g})")
    inv = sla.cho_solve(sla.cho_factor(mat), np.eye(mat.shape[0]))
    return 0.5 * (inv + inv.T)


def dualize(theta: ThetaBlock, nq: NoiseQmi | None = None, m_aug=1e-6) -> DualTheta:
    """Dual kernel of ``theta``; ``nq`` (optional) must be the bound it was built from."""
    if nq is not None and nq is not theta.noise:
        same = all(np.array_equal(a, b) for a, b in
                   ((nq.q, theta.noise.q), (nq.s, theta.noise.s), (nq.r, theta.noise.r)))
        if not same:
            raise DataError("noise bound does not match the one used to build the kernel")
    gram_inv = _spd_inverse(theta.gram, "data block [Delta; U^s]")
    r_hat = _spd_inverse(theta.schur, "noise block")
    m = theta.m
    m_mat = m_aug * np.eye(m) if np.ndim(m_aug) == 0 else np.asarray(m_aug, dtype=float)
    if m_mat.shape != (m, m) or np.linalg.eigvalsh(m_mat)[0] <= 0:
        raise DataError("augmentation M must be a positive definite m x m matrix")
    return DualTheta(theta.s, theta.n, theta.p, r_hat, theta.center.copy(), gram_inv, m_mat,
                     theta.schur.copy())


@dataclass
class LiftedFamily:
    """Kernels and duals for s = 1..s_max of one agent (index s-1)."""

    agent: int
    thetas: list
    duals: list
    norm_bounds: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        """Largest s with a usable dual."""
        return sum(1 for _ in _prefix(self.duals))

    def dual(self, s: int):
        if s < 1 or s > len(self.duals):
            return None
        return self.duals[s - 1]


def _prefix(items):
    for it in items:
        if it is None:
            return
        yield it


def build_lifted_family(traj: Trajectory, sys_e, w_bar: float, s_max: int, m_aug=1e-6,
                        rho: int | None = None) -> LiftedFamily:
    """Iterate depth by depth: bound ||A^j|| from the depth-j kernel, then use
    the bounds for powers below s to certify the depth-s noise QMI.

    Depths at which the data stop being informative end the family
    (entries set to ``None``).
    """
    e = np.atleast_2d(sys_e)
    dm = assemble_matrices(traj, s_max, rho)
    n = e.shape[0]
    base = ball_noise_qmi(w_bar, dm.rho, e.shape[1])
    thetas, duals, bounds = [], [], []
    alive = True
    for s in range(1, s_max + 1):
        if not alive:
            thetas.append(None)
            duals.append(None)
            continue
        if s == 1:
            nq, e_s = base, e
        else:
            nq = lifted_noise_bound(base, bounds, s, dm.rho, e, w_bar=w_bar)
            e_s = np.eye(n)
        th = build_theta(dm, nq, e_s, s=s, agent=traj.agent)
        if not check_rank(th):
            alive = False
            thetas.append(None)
            duals.append(None)
            continue
        thetas.append(th)
        duals.append(dualize(th, m_aug=m_aug))
        if s < s_max:
            try:
                bounds.append(estimate_spectral_bound(th))
            except BracketError:
                alive = False
    return LiftedFamily(traj.agent, thetas, duals, bounds)


def true_member_value(theta: ThetaBlock, sys: SystemMatrices) -> np.ndarray:
    """Kernel QMI evaluated at the true lifted pair (diagnostics and tests)."""
    lifted = lift(sys, theta.s)
    return theta.value(np.hstack([lifted.a_s, lifted.b_s]))


def trajectory_to_rows(traj: Trajectory) -> tuple[list[str], np.ndarray]:
    n, p = traj.x.shape[1], traj.u.shape[1]
    n_w = traj.w.shape[1] if traj.w is not None else 0
    header = ["t"] + [f"x_{k + 1}" for k in range(n)] + [f"u_{k + 1}" for k in range(p)] \
        + [f"w_{k + 1}" for k in range(n_w)] + [f"x0_{k + 1}" for k in range(n)]
    T = traj.horizon
    u = np.vstack([traj.u, np.full((1, p), np.nan)])
    cols = [np.arange(T + 1)[:, None], traj.x, u]
    if n_w:
        cols.append(np.vstack([traj.w, np.full((1, n_w), np.nan)]))
    cols.append(traj.leader)
    return header, np.hstack(cols)


def save_trajectory_csv(traj: Trajectory, path) -> None:
    header, rows = trajectory_to_rows(traj)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            vals = [str(int(row[0]))] + ["" if np.isnan(v) else repr(float(v)) for v in row[1:]]
            fh.write(",".join(vals) + "\n")


def load_trajectory_csv(path, agent: int = 1) -> Trajectory:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    data = np.array([[float(v) if v != "" else np.nan for v in r] for r in rows])
    idx = {h: k for k, h in enumerate(header)}
    xs = [idx[h] for h in header if h.startswith("x_")]
    us = [idx[h] for h in header if h.startswith("u_")]
    ws = [idx[h] for h in header if h.startswith("w_")]
    ls = [idx[h] for h in header if h.startswith("x0_")]
    x = data[:, xs]
    u = data[:-1, us]
    w = data[:-1, ws] if ws else None
    lead = data[:, ls] if ls else np.zeros_like(x)
    return Trajectory(agent, x, u, lead, w)
