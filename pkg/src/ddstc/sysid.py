"""Indirect baseline: least-squares identification followed by model-based design."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import synthesis
from .dataset import DataError, DataMatrices
from .plant import SystemMatrices
from .topology import GraphMatrices


class IdentificationError(DataError):
    pass


@dataclass(frozen=True)
class IdentifiedModel:
    a_hat: np.ndarray
    b_hat: np.ndarray
    residual: float
    rho: int

    def system(self, b_d=None) -> SystemMatrices:
        """Estimate as a plant; ``b_d`` is the assumed disturbance channel."""
        return SystemMatrices(self.a_hat, self.b_hat, None, b_d)

    def to_dict(self) -> dict:
        return {"A_hat": self.a_hat.tolist(), "B_hat": self.b_hat.tolist(),
                "residual": self.residual, "rho": self.rho}


def least_squares_id(dm: DataMatrices) -> IdentifiedModel:
    """[A B] = Delta_+ pinv([Delta; U]) from the depth-1 data."""
    reg = dm.regressor(1)
    n = dm.delta.shape[0]
    rank = np.linalg.matrix_rank(reg)
    if rank < reg.shape[0]:
        raise IdentificationError(f"regressor [Delta; U] has rank {rank}, needs {reg.shape[0]} "
                                  f"(rho = {dm.rho}); {reg.shape[0] - rank} direction(s) not excited")
    target = dm.delta_plus[1]
    ab = target @ np.linalg.pinv(reg)
    residual = float(np.linalg.norm(target - ab @ reg))
    return IdentifiedModel(ab[:, :n], ab[:, n:], residual, dm.rho)


def indirect_design(model: IdentifiedModel, gm: GraphMatrices, sigma: float, epsilon: float,
                    gamma: float = 1.0, b_d=None, coupling: str = synthesis.COUPLING_LINEAR,
                    disturbance_block: str = "gain-scaled") -> synthesis.StcDesign:
    """H-infinity design on the estimate; ``b_d`` defaults to 0.01 I."""
    n = model.a_hat.shape[0]
    b_d = 0.01 * np.eye(n) if b_d is None else b_d
    d = synthesis.design_hinf(model.system(b_d), gm, sigma, epsilon, gamma, coupling, disturbance_block,
                              provenance=synthesis.SYSID_INDIRECT)
    d.extra["identified_model"] = model.to_dict()
    return d
