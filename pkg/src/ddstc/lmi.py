"""Small semidefinite feasibility layer.

Constraints are plain Python callables that map a dict of variable values to
a symmetric matrix.  Because every constraint must be affine in the declared
variables, the coefficient matrices ``F0, F1, ...`` are recovered by
evaluating the callable at zero and at each basis element.  The resulting
standard-form problem is handed to an interior-point conic solver: Clarabel
by default, or the SDP solver of cvxopt.

Strict inequalities are handled through a shared margin variable ``t``:
every strict constraint is imposed as ``F(x) >= t I`` (after sign
normalisation), ``t`` is maximised up to a cap, and the problem counts as
strictly feasible when ``t >= eps_strict``.  Every scalar coordinate is
also boxed by ``radius``; without it homogeneous problems (all design
LMIs are) drift to huge scales once the margin cap is reached.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

import cvxopt
from cvxopt import solvers

SYMMETRIC = "symmetric"
FULL = "full"
SCALAR = "scalar"

FREE = "free"
POSITIVE = "positive"  # X > 0 (strict), scalar or symmetric

PSD = ">=0"       # F(x) >= 0
POS = ">0"        # F(x) > 0
NSD = "<=0"       # F(x) <= 0
NEG = "<0"        # F(x) < 0

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical-failure"


class LmiError(ValueError):
    pass


@dataclass(frozen=True)
class MatrixVariable:
    name: str
    shape: tuple[int, int]
    structure: str = FULL
    sign: str = FREE

    def __post_init__(self):
        if self.structure not in (SYMMETRIC, FULL, SCALAR):
            raise LmiError(f"unknown structure {self.structure!r}")
        if self.sign not in (FREE, POSITIVE):
            raise LmiError(f"unknown sign constraint {self.sign!r}")
        if self.structure == SCALAR and tuple(self.shape) != (1, 1):
            raise LmiError("scalar variables have shape (1, 1)")
        if self.structure == SYMMETRIC and self.shape[0] != self.shape[1]:
            raise LmiError("symmetric variables must be square")
        if self.sign == POSITIVE and self.structure == FULL:
            raise LmiError("positivity needs a symmetric or scalar variable")

    @property
    def size(self) -> int:
        r, c = self.shape
        if self.structure == SYMMETRIC:
            return r * (r + 1) // 2
        return r * c

    def basis(self):
        """Yield the basis matrices of the variable's coordinate space."""
        r, c = self.shape
        if self.structure == SYMMETRIC:
            for i in range(r):
                for j in range(i, r):
                    m = np.zeros((r, r))
                    m[i, j] = m[j, i] = 1.0
                    yield m
        else:
            for j in range(c):
                for i in range(r):
                    m = np.zeros((r, c))
                    m[i, j] = 1.0
                    yield m

    def unpack(self, coords: np.ndarray):
        r, c = self.shape
        if self.structure == SCALAR:
            return float(coords[0])
        if self.structure == SYMMETRIC:
            m = np.zeros((r, r))
            m[np.triu_indices(r)] = coords
            return m + np.triu(m, 1).T
        return coords.reshape((r, c), order="F")


@dataclass
class Constraint:
    name: str
    fn: Callable[[Mapping[str, object]], np.ndarray]
    kind: str


@dataclass
class SolveReport:
    status: str
    values: dict
    margin: float
    worst_margin: float
    solve_time: float
    solver_status: str = ""
    constraint_margins: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE

    def __getitem__(self, name):
        return self.values[name]


class LmiProblem:
    """Container for variables and affine matrix constraints."""

    def __init__(self, eps_strict: float = 1e-7, margin_cap: float = 1.0, radius: float = 1e4):
        self.eps_strict = eps_strict
        self.margin_cap = margin_cap
        self.radius = radius
        self.variables: dict[str, MatrixVariable] = {}
        self.constraints: list[Constraint] = []

    def variable(self, name, shape=(1, 1), structure=FULL, sign=FREE):
        if name in self.variables:
            raise LmiError(f"variable {name!r} declared twice")
        if isinstance(shape, int):
            shape = (shape, shape)
        var = MatrixVariable(name, tuple(shape), structure, sign)
        self.variables[name] = var
        return var

    def scalar(self, name, sign=FREE):
        return self.variable(name, (1, 1), SCALAR, sign)

    def symmetric(self, name, n, sign=FREE):
        return self.variable(name, (n, n), SYMMETRIC, sign)

    def full(self, name, rows, cols):
        return self.variable(name, (rows, cols), FULL, FREE)

    def add(self, fn, kind=PSD, name=None):
        if kind not in (PSD, POS, NSD, NEG):
            raise LmiError(f"unknown constraint kind {kind!r}")
        self.constraints.append(
            Constraint(name or f"c{len(self.constraints)}", fn, kind))

    # -- standard form ----------------------------------------------------
    def _zero_point(self):
        return {name: v.unpack(np.zeros(v.size)) for name, v in self.variables.items()}

    def _sign_constraints(self):
        out = []
        for name, v in self.variables.items():
            if v.sign == POSITIVE:
                if v.structure == SCALAR:
                    out.append(Constraint(f"{name}>0", lambda x, k=name: np.array([[x[k]]]), POS))
                else:
                    out.append(Constraint(f"{name}>0", lambda x, k=name: x[k], POS))
        return out

    def all_constraints(self):
        return self._sign_constraints() + list(self.constraints)

    def coefficients(self, constraint: Constraint):
        """Return ``(F0, [F_k])`` with ``F(x) = F0 + sum_k x_k F_k``.

        The list follows the variable declaration order and, inside each
        variable, its basis order.
        """
        zero = self._zero_point()
        f0 = _as_symmetric(constraint.fn(zero), constraint.name)
        coeffs = []
        for name, v in self.variables.items():
            for b in v.basis():
                point = dict(zero)
                point[name] = float(b[0, 0]) if v.structure == SCALAR else b
                coeffs.append(_as_symmetric(constraint.fn(point), constraint.name) - f0)
        return f0, coeffs

    def check_affine(self, rng=None, tol=1e-9) -> bool:
        """Spot-check affinity of every constraint at a random point."""
        rng = np.random.default_rng(0) if rng is None else rng
        coords = rng.standard_normal(sum(v.size for v in self.variables.values()))
        point = self.unpack(coords)
        for c in self.all_constraints():
            f0, fk = self.coefficients(c)
            predicted = f0 + sum(x * f for x, f in zip(coords, fk))
            actual = _as_symmetric(c.fn(point), c.name)
            scale = max(1.0, np.abs(actual).max())
            if np.abs(predicted - actual).max() > tol * scale:
                return False
        return True

    def unpack(self, coords):
        values, pos = {}, 0
        for name, v in self.variables.items():
            values[name] = v.unpack(np.asarray(coords[pos:pos + v.size], dtype=float))
            pos += v.size
        return values

    def dump(self, path) -> None:
        """Write the problem in a plain block-matrix text format.

        Layout: a ``variables`` section (name, structure, shape, sign,
        number of scalar coordinates) followed by one ``constraint`` section
        per constraint holding ``F0`` and every ``F_k`` in coordinate order.
        """
        lines = ["# ddstc LMI dump v1", f"eps_strict {self.eps_strict!r}", "variables"]
        for v in self.variables.values():
            lines.append(f"  {v.name} {v.structure} {v.shape[0]}x{v.shape[1]} {v.sign} {v.size}")
        for c in self.all_constraints():
            f0, fk = self.coefficients(c)
            lines.append(f"constraint {c.name} {c.kind} {f0.shape[0]}")
            for label, mat in [("F0", f0)] + [(f"F{k + 1}", f) for k, f in enumerate(fk)]:
                lines.append(f"  {label}")
                for row in mat:
                    lines.append("    " + " ".join(repr(float(a)) for a in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _as_symmetric(m, name="constraint", guard=1e-9):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise LmiError(f"{name}: constraint matrix is not square {m.shape}")
    asym = np.abs(m - m.T).max() if m.size else 0.0
    if asym > guard * max(1.0, np.abs(m).max()):
        raise LmiError(f"{name}: constraint matrix is not symmetric (|asym|={asym:.3g})")
    return 0.5 * (m + m.T)


def psd_check(matrix, slack: float = 1e-8, guard: float = 1e-10):
    """Return ``(min_eig >= -slack, min_eig)`` for a symmetric matrix."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise LmiError(f"matrix is not square {m.shape}")
    asym = np.abs(m - m.T).max() if m.size else 0.0
    if asym > guard * max(1.0, np.abs(m).max()):
        raise LmiError(f"matrix is not symmetric (|asym|={asym:.3g})")
    lam = float(np.linalg.eigvalsh(0.5 * (m + m.T))[0]) if m.size else 0.0
    return lam >= -slack, lam


def _normalised(kind, mat):
    """Flip <= constraints into >= form."""
    return -mat if kind in (NSD, NEG) else mat


BACKENDS = ("clarabel", "cvxopt")
DEFAULT_BACKEND = "clarabel"


def _standard_form(problem: LmiProblem):
    """max t  s.t.  F_c(x) - t I >= 0 (strict c), F_c(x) >= 0 (others), t <= cap, |x| <= radius.

    Returns the objective, the linear rows ``gl x <= hl`` and one
    ``(F0, Gk)`` pair per constraint with ``F(x) - tI = F0 - mat(Gk @ [x; t])``.
    """
    cons = problem.all_constraints()
    nvar = sum(v.size for v in problem.variables.values())
    strict = [c.kind in (POS, NEG) for c in cons]
    nx = nvar + 1  # last coordinate is the margin t
    blocks = []
    for c, is_strict in zip(cons, strict):
        f0, fk = problem.coefficients(c)
        f0 = _normalised(c.kind, f0)
        k = f0.shape[0]
        g = np.zeros((k * k, nx))
        for j, f in enumerate(fk):
            g[:, j] = -_normalised(c.kind, f).ravel(order="F")
        if is_strict:
            g[:, nvar] = np.eye(k).ravel(order="F")
        blocks.append((f0, g))

    c_obj = np.zeros(nx)
    c_obj[nvar] = -1.0
    # t <= cap keeps homogeneous problems bounded
    gl = np.zeros((1, nx))
    gl[0, nvar] = 1.0
    hl = np.array([problem.margin_cap])
    if not any(strict):
        # margin is meaningless without strict constraints: pin it
        gl = np.vstack([gl, -gl])
        hl = np.array([problem.margin_cap, -problem.margin_cap])
    if problem.radius is not None and nvar:
        # box on the decision variables keeps homogeneous problems at a sane scale
        box = np.hstack([np.eye(nvar), np.zeros((nvar, 1))])
        gl = np.vstack([gl, box, -box])
        hl = np.concatenate([hl, np.full(2 * nvar, float(problem.radius))])
    return cons, strict, nvar, c_obj, gl, hl, blocks


def _run_cvxopt(c_obj, gl, hl, blocks, tol, max_iters):
    options = {"show_progress": False, "abstol": tol["abstol"], "reltol": tol["reltol"],
               "feastol": tol["feastol"], "maxiters": max_iters}
    gs = [cvxopt.matrix(g) for _, g in blocks]
    hs = [cvxopt.matrix(f0) for f0, _ in blocks]
    try:
        sol = solvers.sdp(cvxopt.matrix(c_obj), Gl=cvxopt.matrix(gl), hl=cvxopt.matrix(hl),
                          Gs=gs, hs=hs, options=options)
    except (ValueError, ArithmeticError) as exc:
        return "error: " + str(exc), None, False
    status = sol["status"]
    x = None if sol["x"] is None else np.array(sol["x"]).ravel()
    return status, x, status == "primal infeasible"


def _svec_rows(k):
    """Row selection and weights mapping vec(F) (column-major) to Clarabel's scaled triangle."""
    idx, w = [], []
    root2 = np.sqrt(2.0)
    for j in range(k):
        for i in range(j + 1):
            idx.append(j * k + i)
            w.append(1.0 if i == j else root2)
    return np.array(idx), np.array(w)


def _run_clarabel(c_obj, gl, hl, blocks, tol, max_iters):
    import clarabel
    from scipy import sparse

    rows_a, rows_b, cones = [gl], [hl], [clarabel.NonnegativeConeT(gl.shape[0])]
    for f0, g in blocks:
        k = f0.shape[0]
        idx, w = _svec_rows(k)
        rows_a.append(g[idx] * w[:, None])
        rows_b.append(f0.ravel(order="F")[idx] * w)
        cones.append(clarabel.PSDTriangleConeT(k))
    a = sparse.csc_matrix(np.vstack(rows_a))
    b = np.concatenate(rows_b)
    nx = c_obj.size
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iters
    settings.tol_gap_abs = tol["abstol"]
    settings.tol_gap_rel = tol["reltol"]
    settings.tol_feas = tol["feastol"]
    solver = clarabel.DefaultSolver(sparse.csc_matrix((nx, nx)), c_obj, a, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    x = np.array(sol.x, dtype=float) if sol.x is not None and len(sol.x) == nx else None
    if x is not None and not np.all(np.isfinite(x)):
        x = None
    return status, x, "PrimalInfeasible" in status


def solve(problem: LmiProblem, abstol=1e-9, reltol=1e-8, feastol=1e-9,
          max_iters=200, backend: str | None = None) -> SolveReport:
    """Maximise the strictness margin of ``problem`` and classify the result.

    The status is decided by re-checking every constraint at the returned
    point, never by the solver's own flag alone.
    """
    backend = backend or DEFAULT_BACKEND
    if backend not in BACKENDS:
        raise LmiError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    t0 = time.perf_counter()
    cons, strict, nvar, c_obj, gl, hl, blocks = _standard_form(problem)
    tol = {"abstol": abstol, "reltol": reltol, "feastol": feastol}
    runner = _run_clarabel if backend == "clarabel" else _run_cvxopt
    solver_status, x, primal_infeasible = runner(c_obj, gl, hl, blocks, tol, max_iters)

    if primal_infeasible:
        return SolveReport(INFEASIBLE, {}, float("-inf"), float("-inf"),
                           time.perf_counter() - t0, solver_status=solver_status)
    if x is None:
        return SolveReport(NUMERICAL_FAILURE, {}, float("nan"), float("nan"),
                           time.perf_counter() - t0, solver_status=solver_status)

    values = problem.unpack(x[:nvar])
    margin = float(x[nvar]) if any(strict) else 0.0

    worst, per = np.inf, {}
    for c in cons:
        lam = float(np.linalg.eigvalsh(_normalised(c.kind, _as_symmetric(c.fn(values), c.name)))[0])
        per[c.name] = lam
        worst = min(worst, lam)
    elapsed = time.perf_counter() - t0

    converged = solver_status in ("optimal", "unknown", "Solved", "AlmostSolved")
    if any(strict):
        strict_worst = min(per[c.name] for c, s in zip(cons, strict) if s)
        loose_worst = min([per[c.name] for c, s in zip(cons, strict) if not s], default=0.0)
        if strict_worst >= problem.eps_strict and loose_worst >= -1e-6:
            status = FEASIBLE
        elif converged and margin < problem.eps_strict:
            status = INFEASIBLE
        else:
            status = NUMERICAL_FAILURE
    else:
        status = FEASIBLE if worst >= -1e-6 else (
            INFEASIBLE if converged else NUMERICAL_FAILURE)
    return SolveReport(status, values, margin, worst, elapsed,
                       solver_status=solver_status, constraint_margins=per)
