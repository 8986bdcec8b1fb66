"""Controller and triggering-matrix synthesis.

Stacked vectors use per-agent ordering: ``zeta = [zeta_1; ...; zeta_N]``
with ``zeta_i = [s_i(t); s_i(t+1); s_i(t_k)]`` in the coordinates
``delta_i = G s_i``.  Per-agent blocks are therefore plain Kronecker
products ``I_N (x) M`` and graph couplings are ``H (x) M``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import lmi
from .dataset import ThetaBlock
from .plant import SystemMatrices
from .topology import GraphMatrices

DATA_DRIVEN = "data-driven"
MODEL_BASED_HINF = "model-based-hinf"
SYSID_INDIRECT = "sysid-indirect"
PROVENANCES = (DATA_DRIVEN, MODEL_BASED_HINF, SYSID_INDIRECT)

# coupling of the triggering term: sigma * (X (x) L3^T Phi_bar L3)
COUPLING_LINEAR = "linear"   # X = H
COUPLING_GRAM = "gram"     # X = H^T H, what summing the per-agent rules yields
COUPLINGS = (COUPLING_LINEAR, COUPLING_GRAM)

MAX_COND_G = 1e10


class DesignError(RuntimeError):
    pass


class InfeasibleDesignError(DesignError):
    pass


@dataclass(frozen=True)
class SelectorMatrices:
    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    r: np.ndarray


def selectors(n: int, epsilon: float) -> SelectorMatrices:
    eye, zero = np.eye(n), np.zeros((n, n))
    l1 = np.hstack([eye, zero, zero])
    l2 = np.hstack([zero, eye, zero])
    l3 = np.hstack([zero, zero, eye])
    return SelectorMatrices(l1, l2, l3, (l1 + epsilon * l2).T)


def _coupling_matrix(h, coupling):
    if coupling == COUPLING_LINEAR:
        return h
    if coupling == COUPLING_GRAM:
        return h.T @ h
    raise ValueError(f"unknown coupling {coupling!r}; expected one of {COUPLINGS}")


def omega(p_mat, n_agents, sel: SelectorMatrices):
    return np.kron(np.eye(n_agents), sel.l2.T @ p_mat @ sel.l2 - sel.l1.T @ p_mat @ sel.l1)


def psi(g, phi_bar, h, sigma, sel: SelectorMatrices, coupling=COUPLING_LINEAR):
    n_agents = h.shape[0]
    eye = np.eye(n_agents)
    rg = np.kron(eye, sel.r @ g @ sel.l2)
    d31 = sel.l3 - sel.l1
    return (-(rg + rg.T)
            + sigma * np.kron(_coupling_matrix(h, coupling), sel.l3.T @ phi_bar @ sel.l3)
            - np.kron(eye, d31.T @ phi_bar @ d31))


def t_block(g, k_g, h, sel: SelectorMatrices):
    """T = [I_N (x) G L1 ; H (x) K_G L3]."""
    n_agents = h.shape[0]
    return np.vstack([np.kron(np.eye(n_agents), g @ sel.l1), np.kron(h, k_g @ sel.l3)])


def upsilon_from_parts(a, b, p_mat, phi_bar, g, k_g, h, sigma, epsilon, coupling=COUPLING_LINEAR):
    """Omega + Psi + Sym{I (x) R A G L1 + H (x) R B K_G L3}."""
    n = a.shape[0]
    sel = selectors(n, epsilon)
    n_agents = h.shape[0]
    cross = np.kron(np.eye(n_agents), sel.r @ a @ g @ sel.l1) + np.kron(h, sel.r @ b @ k_g @ sel.l3)
    return omega(p_mat, n_agents, sel) + psi(g, phi_bar, h, sigma, sel, coupling) + cross + cross.T


def tilde_theta(theta: np.ndarray, n: int, p: int, sel: SelectorMatrices) -> np.ndarray:
    """diag(I, R) Theta diag(I, R)^T."""
    t = np.zeros((n + p + 3 * n, n + p + n))
    t[:n + p, :n + p] = np.eye(n + p)
    t[n + p:, n + p:] = sel.r
    return t @ theta @ t.T


def grouped_permutation(n_agents: int, n: int, p: int) -> np.ndarray:
    """Permutation P with P @ blockdiag_i [A_i; B_i; zeta_i] = [A_all; B_all; zeta_all]."""
    blk = n + p + 3 * n
    size = n_agents * blk
    perm = np.zeros((size, size))
    for i in range(n_agents):
        for k in range(n):
            perm[i * n + k, i * blk + k] = 1.0
        for k in range(p):
            perm[n_agents * n + i * p + k, i * blk + n + k] = 1.0
        for k in range(3 * n):
            perm[n_agents * (n + p) + i * 3 * n + k, i * blk + n + p + k] = 1.0
    return perm


def consensus_lmi_matrix(values, theta: np.ndarray, h, n, p, sigma, epsilon, coupling=COUPLING_LINEAR):
    """Left-hand side of the data-driven design inequality at given variable values."""
    sel = selectors(n, epsilon)
    n_agents = h.shape[0]
    g, k_g = values["G"], values["K_G"]
    tt = t_block(g, k_g, h, sel)
    lower = omega(values["P"], n_agents, sel) + psi(g, values["Phi_bar"], h, sigma, sel, coupling)
    top = np.zeros((tt.shape[0], tt.shape[0]))
    big = np.block([[top, tt], [tt.T, lower]])
    perm = grouped_permutation(n_agents, n, p)
    kern = perm @ np.kron(np.eye(n_agents), tilde_theta(theta, n, p, sel)) @ perm.T
    return big + values["beta"] * kern


@dataclass(frozen=True)
class CentredKernel:
    """Kernel split into centre, Gram block and noise block.

    ``[Z^T; I]^T Theta [Z^T; I] = S_c - (Z - Z_c) gram (Z - Z_c)^T``.
    ``whiten`` is ``radius * gram^{-1/2}`` and ``noise`` is ``S_c / radius^2``
    with ``radius^2 = ||S_c||``; ``radius`` maps the centred multiplier back
    to the raw one (``beta_raw = beta / radius^2``).
    """

    center: np.ndarray
    gram: np.ndarray
    schur: np.ndarray
    whiten: np.ndarray
    noise: np.ndarray
    radius: float

    @classmethod
    def from_parts(cls, center, gram, schur) -> "CentredKernel":
        gram = 0.5 * (gram + gram.T)
        schur = 0.5 * (schur + schur.T)
        lam, vec = np.linalg.eigh(gram)
        if lam[0] <= 0:
            raise DesignError("kernel Gram block is not positive definite; check the data rank")
        inv_sqrt = (vec / np.sqrt(lam)) @ vec.T
        radius = float(np.sqrt(max(np.linalg.norm(schur, 2), 0.0)))
        if radius == 0.0:
            radius = 1.0
        return cls(np.asarray(center, dtype=float), gram, schur, radius * inv_sqrt,
                   schur / radius ** 2, radius)


def centred_kernel(theta, n: int) -> CentredKernel:
    """Split a raw kernel whose last ``n`` rows belong to the identity part."""
    if isinstance(theta, ThetaBlock):
        return CentredKernel.from_parts(theta.center, theta.gram, theta.schur)
    theta = np.asarray(theta, dtype=float)
    q = theta.shape[0] - n
    gram = -theta[:q, :q]
    try:
        center = np.linalg.solve(gram, theta[:q, q:]).T
    except np.linalg.LinAlgError as exc:
        raise DesignError("kernel Gram block is singular") from exc
    schur = theta[q:, q:] + center @ gram @ center.T
    return CentredKernel.from_parts(center, gram, schur)


def kernel_scale(theta) -> float:
    """Positive factor that balances the data and noise parts of a raw kernel."""
    if isinstance(theta, ThetaBlock):
        g = np.linalg.norm(theta.gram, 2)
        sc = np.linalg.norm(theta.schur, 2)
        if g > 0 and sc > 0:
            return float(np.sqrt(g * sc))
        theta = theta.theta
    scale = float(np.abs(theta).max())
    return scale if scale > 0 else 1.0


def _declare(prob, n, p):
    prob.scalar("beta", lmi.POSITIVE)
    prob.symmetric("P", n, lmi.POSITIVE)
    prob.symmetric("Phi_bar", n, lmi.POSITIVE)
    prob.full("G", n, n)
    prob.full("K_G", p, n)


def centred_consensus_lmi_matrix(values, kern: CentredKernel, h, n, p, sigma, epsilon, coupling=COUPLING_LINEAR):
    """Design inequality after shifting to the kernel centre and whitening.

    Congruent to ``consensus_lmi_matrix`` on the raw kernel once beta is rescaled
    by ``kern.radius ** 2``, so the two have the same feasible set.
    """
    sel = selectors(n, epsilon)
    n_agents = h.shape[0]
    a_c, b_c = kern.center[:, :n], kern.center[:, n:]
    g, k_g = values["G"], values["K_G"]
    tt = t_block(g, k_g, h, sel)
    perm = grouped_permutation(n_agents, n, p)
    m = n_agents * (n + p)
    top = np.zeros((n + p + 3 * n,) * 2)
    top[:n + p, :n + p] = kern.whiten
    whiten = (perm @ np.kron(np.eye(n_agents), top) @ perm.T)[:m, :m]
    tt = whiten @ tt
    ups = upsilon_from_parts(a_c, b_c, values["P"], values["Phi_bar"], g, k_g, h, sigma, epsilon, coupling)
    blk = np.zeros((n + p + 3 * n,) * 2)
    blk[:n + p, :n + p] = -np.eye(n + p)
    blk[n + p:, n + p:] = sel.r @ kern.noise @ sel.r.T
    kern_big = perm @ np.kron(np.eye(n_agents), blk) @ perm.T
    big = np.block([[np.zeros((m, m)), tt], [tt.T, ups]])
    return big + values["beta"] * kern_big


def build_consensus_lmi(theta_1: ThetaBlock | np.ndarray, gm: GraphMatrices, sigma: float, epsilon: float,
               n: int | None = None, p: int | None = None, coupling: str = COUPLING_LINEAR,
               centred: bool = True) -> lmi.LmiProblem:
    """Data-driven consensus design as one LMI problem.

    With ``centred=True`` (default) the inequality is posed around the
    least-squares centre of the data with a whitened Gram block, which
    keeps the solver well scaled.  ``centred=False`` poses the raw kernel
    form divided by ``kernel_scale``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    theta = theta_1.theta if isinstance(theta_1, ThetaBlock) else np.asarray(theta_1, dtype=float)
    if isinstance(theta_1, ThetaBlock):
        if theta_1.s != 1:
            raise ValueError("the design uses the depth-1 kernel")
        n = theta_1.n if n is None else n
        p = theta_1.p if p is None else p
    if n is None or p is None:
        raise ValueError("n and p are required when passing a raw kernel")
    if theta.shape != (2 * n + p, 2 * n + p):
        raise ValueError(f"kernel has shape {theta.shape}, expected {(2 * n + p,) * 2}")
    h = gm.h
    _coupling_matrix(h, coupling)
    prob = lmi.LmiProblem()
    _declare(prob, n, p)
    if centred:
        kern = centred_kernel(theta_1 if isinstance(theta_1, ThetaBlock) else theta, n)
        prob.add(lambda v: centred_consensus_lmi_matrix(v, kern, h, n, p, sigma, epsilon, coupling), lmi.NEG, "consensus")
    else:
        scaled = theta / kernel_scale(theta_1 if isinstance(theta_1, ThetaBlock) else theta)
        prob.add(lambda v: consensus_lmi_matrix(v, scaled, h, n, p, sigma, epsilon, coupling), lmi.NEG, "consensus")
    prob.meta = {"kind": "consensus", "sigma": sigma, "epsilon": epsilon, "coupling": coupling, "n": n, "p": p,
                 "centred": centred}
    return prob


def hinf_lmi_matrix(values, sys: SystemMatrices, h, sigma, epsilon, gamma, coupling=COUPLING_LINEAR,
                disturbance_block="gain-scaled"):
    n = sys.n
    n_agents = h.shape[0]
    sel = selectors(n, epsilon)
    g = values["G"]
    ups = upsilon_from_parts(sys.a, sys.b, values["P"], values["Phi_bar"], g, values["K_G"],
                             h, sigma, epsilon, coupling)
    eye = np.eye(n_agents)
    b_d = sys.b_d
    if disturbance_block == "gain-scaled":
        if b_d.shape[1] != n:
            raise ValueError("the gain-scaled disturbance block R B_d G needs a square B_d")
        off = np.kron(eye, sel.r @ b_d @ g)
        nd = off.shape[1]
        return np.block([[ups + np.kron(eye, sel.l1.T @ sel.l1), off],
                         [off.T, -gamma ** 2 * np.eye(nd)]])
    if disturbance_block == "consistent":
        off = np.kron(eye, sel.r @ b_d)
        out = np.kron(eye, g @ sel.l1)
        nd, no = off.shape[1], out.shape[0]
        return np.block([[ups, off, out.T],
                         [off.T, -gamma ** 2 * np.eye(nd), np.zeros((nd, no))],
                         [out, np.zeros((no, nd)), -np.eye(no)]])
    raise ValueError(f"unknown disturbance block {disturbance_block!r}")


def build_hinf_lmi(sys: SystemMatrices, gm: GraphMatrices, sigma: float, epsilon: float, gamma: float,
               coupling: str = COUPLING_LINEAR, disturbance_block: str = "gain-scaled") -> lmi.LmiProblem:
    """Model-based H-infinity consensus design.

    ``disturbance_block="gain-scaled"`` uses ``R B_d G`` and the output weight
    ``L1^T L1`` on ``s``; ``"consistent"`` uses ``R B_d`` and weights
    ``delta = G s`` through an extra Schur block.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if sys.b_d is None:
        raise ValueError("the plant has no disturbance channel")
    h = gm.h
    n, p = sys.n, sys.p
    _coupling_matrix(h, coupling)
    prob = lmi.LmiProblem()
    prob.symmetric("P", n, lmi.POSITIVE)
    prob.symmetric("Phi_bar", n, lmi.POSITIVE)
    prob.full("G", n, n)
    prob.full("K_G", p, n)
    prob.add(lambda v: hinf_lmi_matrix(v, sys, h, sigma, epsilon, gamma, coupling, disturbance_block),
             lmi.NEG, "hinf")
    prob.meta = {"kind": "hinf", "sigma": sigma, "epsilon": epsilon, "coupling": coupling,
                 "gamma": gamma, "disturbance_block": disturbance_block, "n": n, "p": p}
    return prob


@dataclass
class StcDesign:
    k: np.ndarray
    phi: np.ndarray
    sigma: float
    epsilon: float
    provenance: str = DATA_DRIVEN
    certificates: dict = field(default_factory=dict)
    margins: dict = field(default_factory=dict)
    coupling: str = COUPLING_LINEAR
    gamma: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.k = np.atleast_2d(np.asarray(self.k, dtype=float))
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.certificates = {k: (v if np.ndim(v) == 0 else np.atleast_2d(np.asarray(v, dtype=float)))
                             for k, v in self.certificates.items()}

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v
        return {
            "K": self.k.tolist(),
            "Phi": self.phi.tolist(),
            "sigma": self.sigma,
            "epsilon": self.epsilon,
            "provenance": self.provenance,
            "coupling": self.coupling,
            "gamma": self.gamma,
            "certificates": {k: enc(v) for k, v in self.certificates.items()},
            "solver_margins": {k: enc(v) for k, v in self.margins.items()},
            "extra": {k: enc(v) for k, v in self.extra.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StcDesign":
        return cls(np.array(d["K"]), np.array(d["Phi"]), float(d["sigma"]), float(d["epsilon"]),
                   d.get("provenance", DATA_DRIVEN),
                   {k: (np.array(v) if isinstance(v, list) else v) for k, v in d.get("certificates", {}).items()},
                   dict(d.get("solver_margins", {})), d.get("coupling", COUPLING_LINEAR), d.get("gamma"),
                   dict(d.get("extra", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "StcDesign":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def recover_design(report: lmi.SolveReport, sigma: float, epsilon: float,
                   provenance: str = DATA_DRIVEN, coupling: str = COUPLING_LINEAR,
                   gamma: float | None = None) -> StcDesign:
    """K = K_G G^{-1}, Phi = G^{-T} Phi_bar G^{-1}."""
    if not report.feasible:
        raise InfeasibleDesignError(f"cannot recover a design from a {report.status} solve")
    g = np.atleast_2d(report["G"])
    cond = np.linalg.cond(g)
    if not np.isfinite(cond) or cond > MAX_COND_G:
        raise DesignError(f"G is singular or ill-conditioned (cond = {cond:.3g})")
    g_inv = np.linalg.inv(g)
    k = np.atleast_2d(report["K_G"]) @ g_inv
    phi = g_inv.T @ report["Phi_bar"] @ g_inv
    phi = 0.5 * (phi + phi.T)
    certs = {"P": report["P"], "Phi_bar": report["Phi_bar"], "G": g, "K_G": report["K_G"]}
    if "beta" in report.values:
        certs["beta"] = float(report["beta"])
    margins = {"margin": report.margin, "worst_margin": report.worst_margin}
    return StcDesign(k, phi, sigma, epsilon, provenance, certs, margins, coupling, gamma)


def _require_feasible(rep: lmi.SolveReport, what: str) -> None:
    if rep.feasible:
        return
    msg = f"{what} is {rep.status} (solver: {rep.solver_status}, margin {rep.margin:.3g})"
    if rep.status == lmi.NUMERICAL_FAILURE:
        raise DesignError(msg)
    raise InfeasibleDesignError(msg)


def design_from_data(theta_1: ThetaBlock, gm: GraphMatrices, sigma: float, epsilon: float,
                     coupling: str = COUPLING_LINEAR) -> StcDesign:
    prob = build_consensus_lmi(theta_1, gm, sigma, epsilon, coupling=coupling)
    rep = lmi.solve(prob)
    _require_feasible(rep, f"data-driven design at sigma={sigma}, epsilon={epsilon}")
    return recover_design(rep, sigma, epsilon, DATA_DRIVEN, coupling)


def design_hinf(sys: SystemMatrices, gm: GraphMatrices, sigma: float, epsilon: float, gamma: float,
                coupling: str = COUPLING_LINEAR, disturbance_block: str = "gain-scaled",
                provenance: str = MODEL_BASED_HINF) -> StcDesign:
    prob = build_hinf_lmi(sys, gm, sigma, epsilon, gamma, coupling, disturbance_block)
    rep = lmi.solve(prob)
    _require_feasible(rep, f"H-infinity design at gamma={gamma}")
    d = recover_design(rep, sigma, epsilon, provenance, coupling, gamma)
    d.extra["disturbance_block"] = disturbance_block
    return d


def upsilon(design: StcDesign, sys: SystemMatrices, gm: GraphMatrices) -> np.ndarray:
    c = design.certificates
    return upsilon_from_parts(sys.a, sys.b, c["P"], c["Phi_bar"], c["G"], c["K_G"], gm.h,
                              design.sigma, design.epsilon, design.coupling)


def model_based_stability_check(sys: SystemMatrices, design: StcDesign, gm: GraphMatrices,
                                slack: float = 1e-6):
    """Upsilon < 0 with the given plant; returns (ok, max eigenvalue)."""
    lam = float(np.linalg.eigvalsh(upsilon(design, sys, gm))[-1])
    return lam < slack, lam
