"""Uncertainty drivers: load areas, fluctuation map, AGC recourse, sampling.

Each area ``a`` carries one centred, unit-variance driver ``xi_a``. A load in
area ``a`` consumes ``(p_nom, q_nom) * (1 + epsilon * xi_a)``, and every
generator picks up an equal share of the total active load deviation while
holding its voltage setpoint. The slack bus additionally covers losses when
the power flow is solved.

Random numbers come from numpy's ``Philox`` counter-based generator, whose
stream is fixed across platforms for a given seed.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .netmodel import Network, adjacency_lists

DISTRIBUTIONS = ("normalized_uniform", "normalized_gaussian")
SQRT3 = math.sqrt(3.0)
# a bisection may move a cut by this fraction of one area's loads to keep both halves connected
BALANCE_SLACK = 0.3


@dataclass(frozen=True)
class UncertaintyModel:
    n_areas: int
    area_of_load: tuple[int, ...]
    epsilon: float
    distribution: str = "normalized_uniform"

    def __post_init__(self):
        object.__setattr__(self, "area_of_load", tuple(int(a) for a in self.area_of_load))
        if self.n_areas < 1:
            raise ValueError("n_areas must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if any(not 0 <= a < self.n_areas for a in self.area_of_load):
            raise ValueError("area index out of range")

    def with_distribution(self, distribution: str) -> "UncertaintyModel":
        return UncertaintyModel(self.n_areas, self.area_of_load, self.epsilon, distribution)

    def with_epsilon(self, epsilon: float) -> "UncertaintyModel":
        return UncertaintyModel(self.n_areas, self.area_of_load, epsilon, self.distribution)


@dataclass(frozen=True)
class SampleBatch:
    samples: np.ndarray
    seed: int
    distribution: str

    @property
    def M(self) -> int:
        return self.samples.shape[0]


def make_model(net: Network, n_areas: int, epsilon: float,
               distribution: str = "normalized_uniform") -> UncertaintyModel:
    return UncertaintyModel(n_areas, partition_areas(net, n_areas), epsilon, distribution)


# ---------------------------------------------------------------------------
# Partitioning


def _components(nodes: set[int], adj) -> list[list[int]]:
    comps, seen = [], set()
    for start in sorted(nodes):
        if start in seen:
            continue
        comp, queue = [start], deque([start])
        seen.add(start)
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w in nodes and w not in seen:
                    seen.add(w)
                    comp.append(w)
                    queue.append(w)
        comps.append(comp)
    return comps


def _bfs(start: int, nodes: set[int], adj) -> list[int]:
    order, seen, queue = [start], {start}, deque([start])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w in nodes and w not in seen:
                seen.add(w)
                order.append(w)
                queue.append(w)
    return order


def _sweep_order(nodes: set[int], adj) -> list[int]:
    """Breadth-first order from an eccentric node, component by component."""
    order = []
    for comp in _components(nodes, adj):
        far = _bfs(min(comp), set(comp), adj)[-1]
        order.extend(_bfs(far, set(comp), adj))
    return order


def partition_areas(net: Network, n: int) -> np.ndarray:
    """Assign each load to one of ``n`` areas by recursive bisection.

    The bus set is swept breadth-first from an eccentric bus and cut where the
    loads split in proportion to the areas requested on each side. A cut that
    leaves both halves connected is preferred when it is off by at most
    ``BALANCE_SLACK`` of one area's loads; if the eccentric sweep has none,
    sweeps from every other bus are tried. Both halves are partitioned again.
    """
    n_loads = len(net.loads)
    if n < 1:
        raise ValueError("n must be positive")
    if n > n_loads:
        raise ValueError(f"cannot form {n} areas from {n_loads} loads")
    adj = adjacency_lists(net)
    load_pos = net.load_bus_index()
    loads_at: dict[int, list[int]] = {}
    for li, b in enumerate(load_pos):
        loads_at.setdefault(int(b), []).append(li)
    area = np.full(n_loads, -1, dtype=int)

    def best_cut(order, k1, k2):
        """``((rejected, imbalance), cut)`` for the best cut of one sweep."""
        m = sum(len(loads_at.get(b, [])) for b in order)
        target = m * k1 / (k1 + k2)
        window = max(1, int(round(BALANCE_SLACK * m / (k1 + k2))))
        counts = np.cumsum([len(loads_at.get(b, [])) for b in order])
        best = None
        for cut in range(1, len(order)):
            n1 = int(counts[cut - 1])
            if not k1 <= n1 <= m - k2:
                continue
            gap = abs(n1 - target)
            ok = gap <= window and len(_components(set(order[:cut]), adj)) == 1 \
                and len(_components(set(order[cut:]), adj)) == 1
            key = (not ok, gap)
            if best is None or key < best[0]:
                best = (key, cut)
        return best

    def split(nodes: set[int], k: int, first_area: int):
        order = _sweep_order(nodes, adj)
        if k == 1:
            area[[li for b in order for li in loads_at.get(b, [])]] = first_area
            return
        k1, k2 = k // 2, k - k // 2
        key, cut = best_cut(order, k1, k2)
        if key[0] and len(_components(nodes, adj)) == 1:
            # the eccentric sweep gives no connected halves; try other origins
            for start in sorted(nodes):
                sweep = _bfs(start, nodes, adj)
                k_s, c_s = best_cut(sweep, k1, k2)
                if k_s < key:
                    key, cut, order = k_s, c_s, sweep
        split(set(order[:cut]), k1, first_area)
        split(set(order[cut:]), k2, first_area + k1)

    split(set(range(net.n_bus)), n, 0)
    return area


# ---------------------------------------------------------------------------
# Injection map


def nominal_injections(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Net bus injections at nominal load and nominal dispatch."""
    N = net.n_bus
    p = np.zeros(N)
    q = np.zeros(N)
    for g in net.generators:
        i = net.bus_index(g.bus)
        p[i] += g.p_nom
        q[i] += g.q_nom
    for ld in net.loads:
        i = net.bus_index(ld.bus)
        p[i] -= ld.p_nom
        q[i] -= ld.q_nom
    return p, q


def load_sensitivity(net: Network, model: UncertaintyModel) -> tuple[np.ndarray, np.ndarray]:
    """``dP_load/dxi`` and ``dQ_load/dxi`` per bus, shape ``(N, n)``."""
    if len(model.area_of_load) != len(net.loads):
        raise ValueError("uncertainty model does not match the network's loads")
    N, n = net.n_bus, model.n_areas
    dp = np.zeros((N, n))
    dq = np.zeros((N, n))
    for ld, a in zip(net.loads, model.area_of_load):
        i = net.bus_index(ld.bus)
        dp[i, a] += model.epsilon * ld.p_nom
        dq[i, a] += model.epsilon * ld.q_nom
    return dp, dq


def recourse_sensitivity(net: Network, model: UncertaintyModel) -> np.ndarray:
    """Per-generator active power response ``dp_gen/dxi``, shape ``(N_gen, n)``."""
    dp, _ = load_sensitivity(net, model)
    total = dp.sum(axis=0)
    n_gen = len(net.generators)
    return np.tile(total / n_gen, (n_gen, 1))


def injection_affine(net: Network, model: UncertaintyModel):
    """Affine injection model ``p = p0 + P1 @ xi``, ``q = q0 + Q1 @ xi``.

    Returns ``(p0, q0, P1, Q1)`` with ``P1, Q1`` of shape ``(N, n)``.
    """
    p0, q0 = nominal_injections(net)
    dp, dq = load_sensitivity(net, model)
    P1 = -dp
    Q1 = -dq
    gen_dp = recourse_sensitivity(net, model)
    for g, row in zip(net.generators, gen_dp):
        P1[net.bus_index(g.bus)] += row
    return p0, q0, P1, Q1


def inject(net: Network, model: UncertaintyModel, xi) -> tuple[np.ndarray, np.ndarray]:
    """Realized net bus injections ``(p, q)`` for one driver vector ``xi``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (model.n_areas,):
        raise ValueError(f"xi must have length {model.n_areas}")
    p0, q0, P1, Q1 = injection_affine(net, model)
    return p0 + P1 @ xi, q0 + Q1 @ xi


def generator_dispatch(net: Network, model: UncertaintyModel, xi) -> np.ndarray:
    """Active power of each generator under the uniform recourse."""
    p_nom = np.array([g.p_nom for g in net.generators])
    return p_nom + recourse_sensitivity(net, model) @ np.asarray(xi, dtype=float)


# ---------------------------------------------------------------------------
# Sampling


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def draw(distribution: str, M: int, n: int, seed: int) -> np.ndarray:
    if M < 1:
        raise ValueError("M must be at least 1")
    g = rng(seed)
    if distribution == "normalized_uniform":
        return g.uniform(-SQRT3, SQRT3, size=(M, n))
    if distribution == "normalized_gaussian":
        return g.standard_normal(size=(M, n))
    raise ValueError(f"unknown distribution {distribution!r}")


def sample(model: UncertaintyModel, M: int, seed: int) -> SampleBatch:
    return SampleBatch(draw(model.distribution, M, model.n_areas, seed), int(seed),
                       model.distribution)
