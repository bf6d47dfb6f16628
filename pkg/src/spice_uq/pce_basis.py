"""Total-degree orthonormal polynomial chaos basis.

Ordering contract
-----------------
Multi-indices are sorted by total degree, and within one degree in
descending lexicographic order of the exponent tuple. For ``n = 2, deg = 2``::

    (0,0) (1,0) (0,1) (2,0) (1,1) (0,2)

Index 0 is always the constant polynomial, indices ``1..n`` are the linear
terms ``xi_1 .. xi_n`` and the remaining ones are the degree-2 terms. The
coefficient file format relies on this ordering being stable.

Families
--------
``legendre_normalized``
    Orthonormal Legendre polynomials for the uniform law on [-sqrt 3, sqrt 3]
    (mean 0, variance 1).
``hermite_probabilists_normalized``
    ``He_d / sqrt(d!)`` for the standard normal law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from numpy.polynomial import hermite_e, legendre

FAMILIES = ("legendre_normalized", "hermite_probabilists_normalized")
FAMILY_OF_DISTRIBUTION = {
    "normalized_uniform": "legendre_normalized",
    "normalized_gaussian": "hermite_probabilists_normalized",
}

DEFAULT_QUADRUPLE_LIMIT = 40
_ZERO = 1e-13


class TensorTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class MultiIndexSet:
    n: int
    deg: int
    indices: np.ndarray  # (K, n) int

    @property
    def K(self) -> int:
        return self.indices.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.indices.sum(axis=1)

    def position(self, alpha) -> int:
        alpha = tuple(int(a) for a in alpha)
        hit = np.flatnonzero((self.indices == alpha).all(axis=1))
        if hit.size == 0:
            raise KeyError(alpha)
        return int(hit[0])

    def pair_index(self) -> dict[tuple[int, int], int]:
        """Map ``(i, j)`` with ``i <= j`` to the position of ``e_i + e_j``."""
        out = {}
        for k in np.flatnonzero(self.degrees == 2):
            nz = np.flatnonzero(self.indices[k])
            i, j = (nz[0], nz[0]) if nz.size == 1 else (nz[0], nz[1])
            out[(int(i), int(j))] = int(k)
        return out


def build_index_set(n: int, deg: int) -> MultiIndexSet:
    if n < 1 or deg < 0:
        raise ValueError("need n >= 1 and deg >= 0")
    rows = []
    for d in range(deg + 1):
        block = []
        for combo in combinations_with_replacement(range(n), d):
            alpha = [0] * n
            for j in combo:
                alpha[j] += 1
            block.append(tuple(alpha))
        rows.extend(sorted(set(block), reverse=True))
    return MultiIndexSet(n=n, deg=deg, indices=np.array(rows, dtype=int).reshape(-1, n))


def index_set_size(n: int, deg: int) -> int:
    return math.comb(n + deg, deg)


# ---------------------------------------------------------------------------
# Univariate families


def univariate(family: str, d: int, x) -> np.ndarray:
    """Orthonormal univariate polynomial of degree ``d`` at ``x``."""
    x = np.asarray(x, dtype=float)
    c = np.zeros(d + 1)
    c[d] = 1.0
    if family == "legendre_normalized":
        return math.sqrt(2 * d + 1) * legendre.legval(x / math.sqrt(3.0), c)
    if family == "hermite_probabilists_normalized":
        return hermite_e.hermeval(x, c) / math.sqrt(math.factorial(d))
    raise ValueError(f"unknown family {family!r}")


def gauss_rule(family: str, npts: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights (summing to 1) for the family's law."""
    if family == "legendre_normalized":
        x, w = legendre.leggauss(npts)
        return math.sqrt(3.0) * x, w / 2.0
    if family == "hermite_probabilists_normalized":
        x, w = hermite_e.hermegauss(npts)
        return x, w / math.sqrt(2.0 * math.pi)
    raise ValueError(f"unknown family {family!r}")


def n_quadrature_nodes(integrand_degree: int) -> int:
    return math.ceil((integrand_degree + 1) / 2) + 1


def univariate_moments(family: str, max_deg: int, order: int) -> np.ndarray:
    """``E[psi_a1 ... psi_a_order]`` for all ``a_i <= max_deg`` via Gauss quadrature."""
    x, w = gauss_rule(family, n_quadrature_nodes(order * max_deg))
    P = np.stack([univariate(family, d, x) for d in range(max_deg + 1)])  # (D, q)
    letters = "abcdefgh"[:order]
    spec = ",".join(f"{c}q" for c in letters) + ",q->" + letters
    out = np.einsum(spec, *([P] * order), w)
    out[np.abs(out) < _ZERO] = 0.0
    return out


# ---------------------------------------------------------------------------
# Basis


@dataclass(eq=False)
class PceBasis:
    index_set: MultiIndexSet
    family: str
    _triple: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def K(self) -> int:
        return self.index_set.K

    @property
    def n(self) -> int:
        return self.index_set.n

    @property
    def degrees(self) -> np.ndarray:
        return self.index_set.degrees

    @property
    def norms(self) -> np.ndarray:
        return np.ones(self.K)

    @property
    def triple(self) -> np.ndarray:
        """Dense ``T[k1, k2, k] = <Psi_k1 Psi_k2, Psi_k>``."""
        if self._triple is None:
            self._triple = product_tensor(self, "triple")
        return self._triple

    def restrict(self, max_degree: int) -> "PceBasis":
        """Basis over the leading indices of total degree ``<= max_degree``."""
        keep = self.degrees <= max_degree
        iset = MultiIndexSet(self.n, min(max_degree, self.index_set.deg), self.index_set.indices[keep])
        sub = PceBasis(iset, self.family)
        if self._triple is not None:
            sub._triple = self._triple[np.ix_(keep, keep, keep)]
        return sub

    def evaluate(self, xi) -> np.ndarray:
        """Design matrix ``Psi[m, k]`` for samples ``xi`` of shape (M, n)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if xi.shape[1] != self.n:
            raise ValueError(f"samples have {xi.shape[1]} columns, basis has n={self.n}")
        top = int(self.index_set.indices.max(initial=0))
        uni = np.stack([univariate(self.family, d, xi) for d in range(top + 1)])  # (D, M, n)
        out = np.ones((xi.shape[0], self.K))
        for j in range(self.n):
            out *= uni[self.index_set.indices[:, j], :, j].T
        return out


def make_basis(n: int, deg: int, family: str) -> PceBasis:
    return PceBasis(build_index_set(n, deg), family)


def eval_basis(basis: PceBasis, k: int, xi) -> float:
    xi = np.asarray(xi, dtype=float)
    alpha = basis.index_set.indices[k]
    return float(np.prod([univariate(basis.family, int(a), x) for a, x in zip(alpha, xi)]))


def product_tensor(basis: PceBasis, order: str = "triple", support=None,
                   limit: int = DEFAULT_QUADRUPLE_LIMIT) -> np.ndarray:
    """Expectations of products of basis functions.

    ``order="triple"`` returns ``T[k1, k2, k] = E[Psi_k1 Psi_k2 Psi_k]`` over the
    full basis (or ``support``). ``order="quadruple"`` returns the 4-way analogue
    over ``support`` only; asking for more than ``limit`` indices raises
    :class:`TensorTooLarge`.

    Multivariate entries are products of univariate Gauss-quadrature moments,
    exact for the polynomial degrees involved.
    """
    idx = basis.index_set.indices
    sel = np.arange(basis.K) if support is None else np.asarray(support, dtype=int)
    A = idx[sel]
    if order == "triple":
        m = 3
    elif order == "quadruple":
        m = 4
        if sel.size > limit:
            raise TensorTooLarge(
                f"quadruple tensor over {sel.size} indices needs {sel.size ** 4:,} entries "
                f"(limit {limit} indices); pass a smaller support")
    else:
        raise ValueError(f"unknown order {order!r}")
    top = int(idx.max(initial=0))
    uni = univariate_moments(basis.family, top, m)
    s = sel.size
    out = np.ones((s,) * m)
    for j in range(basis.n):
        a = A[:, j]
        grids = np.ix_(*([a] * m))
        out *= uni[grids]
    out[np.abs(out) < _ZERO] = 0.0
    return out


def sparse_entries(tensor: np.ndarray):
    """Structural nonzeros of a product tensor as ``(index tuple array, values)``."""
    nz = np.nonzero(tensor)
    return np.stack(nz, axis=1), tensor[nz]
