"""Leader-following communication graphs."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


class InvalidTopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    """Follower adjacency ``a_ij`` (row i listens to j) plus leader pinning ``a_i0``."""

    adjacency: np.ndarray
    pinning: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "adjacency", np.atleast_2d(np.asarray(self.adjacency, dtype=float)))
        object.__setattr__(self, "pinning", np.asarray(self.pinning, dtype=float).ravel())

    @property
    def n_followers(self) -> int:
        return self.pinning.size

    @property
    def undirected(self) -> bool:
        return bool(np.array_equal(self.adjacency, self.adjacency.T))

    def neighbors(self, i: int) -> np.ndarray:
        """Followers whose broadcasts agent ``i`` (0-based) receives."""
        return np.flatnonzero(self.adjacency[i])


@dataclass(frozen=True)
class GraphMatrices:
    laplacian: np.ndarray
    pinning_diag: np.ndarray
    h: np.ndarray


def _validate(topo: Topology) -> None:
    a, p = topo.adjacency, topo.pinning
    n = p.size
    if a.shape != (n, n):
        raise InvalidTopologyError(f"adjacency shape {a.shape} does not match {n} followers")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(p))):
        raise InvalidTopologyError("weights must be finite")
    if np.any(a < 0) or np.any(p < 0):
        raise InvalidTopologyError("weights must be nonnegative")
    if np.any(np.diag(a) != 0):
        raise InvalidTopologyError("adjacency diagonal must be zero")


def build_graph_matrices(topo: Topology) -> GraphMatrices:
    _validate(topo)
    a = topo.adjacency
    lap = np.diag(a.sum(axis=1)) - a
    pin = np.diag(topo.pinning)
    return GraphMatrices(lap, pin, lap + pin)


@dataclass(frozen=True)
class ConnectivityReport:
    ok: bool
    unreachable: tuple[int, ...]
    undirected: bool
    min_eig_h: float | None
    message: str

    def __bool__(self):
        return self.ok


def validate_connectivity(topo: Topology) -> ConnectivityReport:
    """Check that the leader roots a directed spanning tree of the augmented graph.

    Information flows j -> i when ``a_ij > 0`` and leader -> i when
    ``a_i0 > 0``; the check is a breadth-first search from the leader.
    """
    try:
        _validate(topo)
    except InvalidTopologyError as exc:
        return ConnectivityReport(False, tuple(range(topo.n_followers)), False, None, str(exc))

    n = topo.n_followers
    seen = np.zeros(n, dtype=bool)
    queue = deque(np.flatnonzero(topo.pinning > 0).tolist())
    seen[list(queue)] = True
    while queue:
        j = queue.popleft()
        for i in np.flatnonzero(topo.adjacency[:, j] > 0):
            if not seen[i]:
                seen[i] = True
                queue.append(i)
    unreachable = tuple(int(i) for i in np.flatnonzero(~seen))
    ok = not unreachable

    min_eig = None
    undirected = topo.undirected
    if undirected:
        gm = build_graph_matrices(topo)
        min_eig = float(np.linalg.eigvalsh(gm.h)[0])
        if ok and min_eig <= 0:
            ok = False
    if not np.any(topo.pinning > 0):
        msg = "no follower is pinned to the leader"
    elif unreachable:
        msg = f"followers {[i + 1 for i in unreachable]} cannot be reached from the leader"
    elif undirected and min_eig is not None and min_eig <= 0:
        msg = f"H is not positive definite (min eigenvalue {min_eig:.3g})"
    else:
        msg = "leader roots a spanning tree"
        if min_eig is not None:
            msg += f"; min eig(H) = {min_eig:.6g}"
    return ConnectivityReport(ok, unreachable, undirected, min_eig, msg)


def ring_topology(n_followers: int = 6, weight: float = 1.0, pinned=(0,), pin_weight: float = 1.0) -> Topology:
    """Undirected ring over the followers with the given (0-based) followers pinned."""
    a = np.zeros((n_followers, n_followers))
    if n_followers > 1:
        for i in range(n_followers):
            j = (i + 1) % n_followers
            if i != j:
                a[i, j] = a[j, i] = weight
    p = np.zeros(n_followers)
    p[list(pinned)] = pin_weight
    return Topology(a, p)


def default_topology() -> Topology:
    """Six-follower ring, edge weight 0.5, follower 1 pinned; a generic stand-in network."""
    return ring_topology(6, weight=0.5)


def pendulum_experiment_topology() -> Topology:
    """Ring of six with followers 1, 3 and 5 pinned; edge weight 0.2, pin weight 0.5."""
    return ring_topology(6, weight=0.2, pinned=(0, 2, 4), pin_weight=0.5)
