"""Rectangular AC power flow.

The residual and Jacobian are written over *coefficient arrays*: every bus
quantity has shape ``(N, K)`` and products of two quantities go through a
product tensor ``T[k1, k2, k]``. The deterministic power flow is the special
case ``K = 1, T = [[[1]]]``; the PCE solvers reuse the same code with the
Galerkin triple tensor.

Equation layout (``2 N K`` rows, bus-major within each half)::

    first half   pq, pv : p_i(v)_k - p_ik        slack : v_re_ik - v_set * [k == 0]
    second half  pq     : q_i(v)_k - q_ik        pv    : |V_i|^2_k - v_set^2 * [k == 0]
                 slack  : v_im_ik

Unknowns are ``z = [v_re.ravel(), v_im.ravel()]`` with the same bus-major
layout (position ``i * K + k``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .netmodel import AdmittanceMatrix, Network, build_admittance

log = logging.getLogger(__name__)

TOL = 1e-8
MAX_ITER = 50
_SCALAR_T = np.ones((1, 1, 1))


class PowerFlowError(RuntimeError):
    """Newton iterations failed to reach the mismatch tolerance."""

    def __init__(self, message, mismatch=np.nan, iterations=0):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


class SingularJacobian(PowerFlowError):
    pass


@dataclass
class VoltageState:
    v_re: np.ndarray
    v_im: np.ndarray

    @property
    def V(self) -> np.ndarray:
        return self.v_re + 1j * self.v_im

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.V)

    @classmethod
    def flat(cls, n: int, v_set=None) -> "VoltageState":
        v = np.ones(n) if v_set is None else np.asarray(v_set, dtype=float).copy()
        return cls(v, np.zeros(n))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.v_re), np.ravel(self.v_im)])


@dataclass(eq=False)
class PfSpec:
    """Boundary conditions of a (possibly PCE-overloaded) power flow.

    ``p``, ``q`` hold net injections, shape ``(N,)`` or ``(N, K)``.
    ``v_set`` is the voltage magnitude setpoint used on slack and PV buses.
    """

    admittance: AdmittanceMatrix
    kinds: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v_set: np.ndarray
    tensor: np.ndarray | None = None

    def __post_init__(self):
        self.kinds = np.asarray(self.kinds)
        self.Y = self.admittance.Y
        self.Y.sort_indices()
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.p.ndim == 1:
            self.p = self.p[:, None]
            self.q = self.q[:, None]
        if self.tensor is None:
            self.tensor = _SCALAR_T
        self.v_set = np.asarray(self.v_set, dtype=float)
        self.is_slack = self.kinds == "slack"
        self.is_pv = self.kinds == "pv"
        self.is_pq = self.kinds == "pq"

    @property
    def N(self) -> int:
        return self.kinds.size

    @property
    def K(self) -> int:
        return self.tensor.shape[0]

    def with_tensor(self, tensor, p=None, q=None) -> "PfSpec":
        return PfSpec(self.admittance, self.kinds, self.p if p is None else p,
                      self.q if q is None else q, self.v_set, tensor)


def make_spec(net: Network, p, q, admittance: AdmittanceMatrix | None = None) -> PfSpec:
    return PfSpec(admittance or build_admittance(net), net.kinds(), p, q, net.voltage_setpoints())


# ---------------------------------------------------------------------------
# Quadratic building blocks


def galerkin_product(a, b, T) -> np.ndarray:
    """Row-wise product of coefficient arrays: ``out[i,k] = sum T[a,b,k] a[i,a] b[i,b]``."""
    N, K = a.shape
    return (a[:, :, None] * b[:, None, :]).reshape(N, K * K) @ T.reshape(K * K, -1)


def bus_power(Y, V, T=None) -> np.ndarray:
    """Complex bus injections ``S = V * conj(Y V)`` for coefficient arrays."""
    V = np.asarray(V)
    scalar = V.ndim == 1
    if scalar:
        V = V[:, None]
    S = galerkin_product(V, np.conj(Y @ V), _SCALAR_T if T is None else T)
    return S[:, 0] if scalar else S


def _state_arrays(spec: PfSpec, z):
    N, K = spec.N, spec.K
    vr = z[: N * K].reshape(N, K)
    vi = z[N * K:].reshape(N, K)
    return vr, vi


def _targets(spec: PfSpec):
    N, K = spec.N, spec.K
    first = np.zeros((N, K))
    first[spec.is_slack, 0] = spec.v_set[spec.is_slack]
    w = np.zeros((N, K))
    w[:, 0] = spec.v_set ** 2
    return first, w


def residual_vector(spec: PfSpec, z, T=None) -> np.ndarray:
    T = spec.tensor if T is None else T
    vr, vi = _state_arrays(spec, z)
    V = vr + 1j * vi
    S = galerkin_product(V, np.conj(spec.Y @ V), T)
    slack_set, w_set = _targets(spec)
    e1 = S.real - spec.p
    e1[spec.is_slack] = vr[spec.is_slack] - slack_set[spec.is_slack]
    e2 = S.imag - spec.q
    if spec.is_pv.any():
        W = galerkin_product(vr[spec.is_pv], vr[spec.is_pv], T) + galerkin_product(
            vi[spec.is_pv], vi[spec.is_pv], T)
        e2[spec.is_pv] = W - w_set[spec.is_pv]
    e2[spec.is_slack] = vi[spec.is_slack]
    return np.concatenate([e1.ravel(), e2.ravel()])


def _block_diag(blocks: np.ndarray) -> sp.csr_matrix:
    N, K, C = blocks.shape
    rows = np.repeat(np.arange(N * K), C)
    cols = (np.arange(N)[:, None, None] * C + np.arange(C)[None, None, :]).repeat(K, axis=1).ravel()
    return sp.csr_matrix((blocks.ravel(), (rows, cols)), shape=(N * K, N * C))


def power_jacobian(spec: PfSpec, z, T=None):
    """``(dS/dv_re, dS/dv_im)`` of the Galerkin bus injections, complex sparse."""
    T = spec.tensor if T is None else T
    K = T.shape[0]
    vr, vi = _state_arrays(spec, z)
    V = vr + 1j * vi
    Ic = np.conj(spec.Y @ V)
    # dS = A dV + Bm conj(dV)
    A = _block_diag(np.einsum("cbk,ib->ikc", T, Ic))
    if K == 1:
        Bm = sp.diags(V[:, 0]) @ np.conj(spec.Y)
    else:
        M2 = np.einsum("ack,ia->ikc", T, V)
        Bm = _block_diag(M2) @ sp.kron(np.conj(spec.Y), sp.identity(K), format="csr")
    return (A + Bm).tocsr(), (1j * (A - Bm)).tocsr()


def jacobian_matrix(spec: PfSpec, z, T=None) -> sp.csr_matrix:
    T = spec.tensor if T is None else T
    N, K = spec.N, spec.K
    vr, vi = _state_arrays(spec, z)
    dS_dvr, dS_dvi = power_jacobian(spec, z, T)

    def rows(mask):
        return sp.diags(np.repeat(mask.astype(float), K))

    eye = sp.identity(N * K, format="csr")
    pq_pv = rows(~spec.is_slack)
    slack = rows(spec.is_slack)
    top = sp.hstack([pq_pv @ dS_dvr.real + slack @ eye, pq_pv @ dS_dvi.real])
    Wr = _block_diag(2.0 * np.einsum("cbk,ib->ikc", T, vr))
    Wi = _block_diag(2.0 * np.einsum("cbk,ib->ikc", T, vi))
    pv = rows(spec.is_pv)
    pq = rows(spec.is_pq)
    bottom = sp.hstack([pq @ dS_dvr.imag + pv @ Wr,
                        pq @ dS_dvi.imag + pv @ Wi + slack @ eye])
    J = sp.vstack([top, bottom]).tocsr()
    J.eliminate_zeros()
    return J


# ---------------------------------------------------------------------------
# Deterministic API


def residual(spec: PfSpec, state: VoltageState) -> np.ndarray:
    return residual_vector(spec, state.as_vector())


def jacobian(spec: PfSpec, state: VoltageState) -> sp.csr_matrix:
    return jacobian_matrix(spec, state.as_vector())


def newton(fun, jac, z0, tol=TOL, max_iter=MAX_ITER, what="power flow"):
    """Newton iterations with step halving when the mismatch grows.

    Returns ``(z, iterations)``.
    """
    z = np.array(z0, dtype=float)
    r = fun(z)
    err = np.max(np.abs(r)) if r.size else 0.0
    if not np.isfinite(err):
        raise PowerFlowError(f"{what}: non-finite initial mismatch", err, 0)
    for it in range(1, max_iter + 1):
        if err <= tol:
            return z, it - 1
        J = jac(z)
        try:
            with np.errstate(all="ignore"):
                dz = spla.spsolve(J.tocsc(), -r)
        except RuntimeError as exc:
            raise SingularJacobian(f"{what}: singular Jacobian ({exc})", err, it) from None
        if not np.all(np.isfinite(dz)):
            raise SingularJacobian(f"{what}: singular Jacobian", err, it)
        step = 1.0
        for _ in range(8):
            z_new = z + step * dz
            r_new = fun(z_new)
            err_new = np.max(np.abs(r_new))
            if np.isfinite(err_new) and err_new < err:
                break
            step *= 0.5
        else:
            z_new = z + dz
            r_new = fun(z_new)
            err_new = np.max(np.abs(r_new))
        z, r, err = z_new, r_new, err_new
        log.debug("%s iter %d mismatch %.3e", what, it, err)
    if err <= tol:
        return z, max_iter
    raise PowerFlowError(f"{what}: no convergence after {max_iter} iterations "
                         f"(mismatch {err:.3e})", err, max_iter)


class PowerFlowSolver:
    """Deterministic power flow for repeated solves on one network.

    The Jacobian sparsity pattern is fixed by the admittance matrix, so the
    index bookkeeping is done once and each iteration only fills values.
    """

    def __init__(self, admittance: AdmittanceMatrix, kinds, v_set):
        Y = admittance.Y.tocsr()
        Y.sum_duplicates()
        N = Y.shape[0]
        # make sure every diagonal entry is stored
        Y = (Y + sp.identity(N, format="csr") * 0.0).tocsr()
        Y.sum_duplicates()
        Y.sort_indices()
        self.Y = Y
        self.N = N
        self.kinds = np.asarray(kinds)
        self.v_set = np.asarray(v_set, dtype=float)
        rows = np.repeat(np.arange(N), np.diff(Y.indptr))
        cols = Y.indices
        self._rows, self._cols = rows, cols
        self._conjY = np.conj(Y.data)
        self._diag = np.flatnonzero(rows == cols)
        slack = self.kinds == "slack"
        pv = self.kinds == "pv"
        pq = self.kinds == "pq"
        self.is_slack, self.is_pv, self.is_pq = slack, pv, pq
        self._ns = np.flatnonzero(~slack[rows])
        self._pq = np.flatnonzero(pq[rows])
        s_idx, pv_idx = np.flatnonzero(slack), np.flatnonzero(pv)
        self._s_idx, self._pv_idx = s_idx, pv_idx
        r_ns, c_ns = rows[self._ns], cols[self._ns]
        r_pq, c_pq = rows[self._pq], cols[self._pq]
        self._jrows = np.concatenate([r_ns, r_ns, N + r_pq, N + r_pq,
                                      s_idx, N + pv_idx, N + pv_idx, N + s_idx])
        self._jcols = np.concatenate([c_ns, N + c_ns, c_pq, N + c_pq,
                                      s_idx, pv_idx, N + pv_idx, N + s_idx])

    @classmethod
    def from_spec(cls, spec: PfSpec) -> "PowerFlowSolver":
        return cls(spec.admittance, spec.kinds, spec.v_set)

    def residual(self, z, p, q) -> np.ndarray:
        N = self.N
        vr, vi = z[:N], z[N:]
        V = vr + 1j * vi
        S = V * np.conj(self.Y @ V)
        e1 = S.real - p
        e2 = S.imag - q
        e1[self.is_slack] = vr[self.is_slack] - self.v_set[self.is_slack]
        e2[self.is_pv] = vr[self.is_pv] ** 2 + vi[self.is_pv] ** 2 - self.v_set[self.is_pv] ** 2
        e2[self.is_slack] = vi[self.is_slack]
        return np.concatenate([e1, e2])

    def jacobian(self, z) -> sp.csc_matrix:
        N = self.N
        vr, vi = z[:N], z[N:]
        V = vr + 1j * vi
        Ic = np.conj(self.Y @ V)
        vy = V[self._rows] * self._conjY
        dr = vy.copy()
        dr[self._diag] += Ic
        di = -vy
        di[self._diag] += Ic
        di = 1j * di
        n_s, n_pv = self._s_idx.size, self._pv_idx.size
        data = np.concatenate([dr.real[self._ns], di.real[self._ns], dr.imag[self._pq],
                               di.imag[self._pq], np.ones(n_s), 2 * vr[self._pv_idx],
                               2 * vi[self._pv_idx], np.ones(n_s)])
        return sp.csc_matrix((data, (self._jrows, self._jcols)), shape=(2 * N, 2 * N))

    def solve(self, p, q, init: VoltageState | None = None, tol=TOL, max_iter=MAX_ITER):
        """Return ``(state, iterations)``."""
        if init is None:
            init = VoltageState.flat(self.N, self.v_set)
        z0 = init.as_vector()
        if not np.all(np.isfinite(z0)):
            raise ValueError("initial state is not finite")
        p = np.asarray(p, dtype=float).ravel()
        q = np.asarray(q, dtype=float).ravel()
        z, it = newton(lambda x: self.residual(x, p, q), self.jacobian, z0, tol, max_iter)
        N = self.N
        return VoltageState(z[:N].copy(), z[N:].copy()), it


def solve_pf(spec: PfSpec, init: VoltageState | None = None, tol=TOL, max_iter=MAX_ITER,
             return_iterations=False):
    """Newton power flow; ``spec`` must be deterministic (``K = 1``)."""
    if spec.K != 1:
        raise ValueError("solve_pf handles the deterministic system only")
    state, it = PowerFlowSolver.from_spec(spec).solve(spec.p, spec.q, init, tol, max_iter)
    return (state, it) if return_iterations else state


# ---------------------------------------------------------------------------
# Derived quantities


def branch_flows(net: Network, V) -> tuple[np.ndarray, np.ndarray]:
    """Complex power entering each branch at its from and to ends."""
    from .netmodel import branch_flow_matrices

    Yf, Yt = branch_flow_matrices(net)
    f, t = net.branch_ends()
    V = np.asarray(V)
    return V[f] * np.conj(Yf @ V), V[t] * np.conj(Yt @ V)


def losses(net: Network, V) -> float:
    """Active power lost in branches and bus shunts."""
    Sf, St = branch_flows(net, V)
    gs = np.array([b.gs for b in net.buses])
    return float(np.sum(Sf.real + St.real) + np.sum(gs * np.abs(V) ** 2))
