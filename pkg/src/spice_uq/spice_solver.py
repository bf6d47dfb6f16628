"""Sparse iterative degree-2 polynomial chaos power flow.

Every bus variable ``x`` in ``{v_re, v_im, p, q}`` is expanded as

    x = X0 + <X1, Psi1> + <X2, Psi2>

on an orthonormal basis. The overloaded power flow projects the quadratic
network equations onto each basis function through the triple-product
tensor. The solve is staged:

1. deterministic power flow at nominal injections;
2. degree-1 overloaded power flow, warm-started from stage 1 (square Newton);
3. a sparsity mask on degree-2 coefficients from the degree-1 ones: index
   ``(i, j)`` of variable ``x`` is dropped when
   ``|X1_i X1_j| < c_off * max_k |X1_k|``;
4. Levenberg-Marquardt on the squared residual of the degree-2 system with the
   masked voltage coefficients removed and, optionally, the products of two
   degree-2 basis functions left out of every Galerkin sum.

Boundary conditions per coefficient: PQ buses fix ``p_k, q_k``; PV buses fix
``p_k`` and ``(|V|^2)_k`` (``v_set^2`` at ``k = 0``, zero otherwise); the slack
bus fixes ``v_re_k`` (``v_set`` at ``k = 0``) and ``v_im_k = 0``. Masked entries
of injections that are outputs of the power flow (slack ``p, q``, PV ``q``)
turn into extra equations forcing the Galerkin injection to zero, so no
equation is ever dropped.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import pf_core
from .netmodel import Network, build_admittance
from .pce_basis import FAMILY_OF_DISTRIBUTION, PceBasis, make_basis
from .pf_core import PfSpec, VoltageState, galerkin_product
from .stochastic import (UncertaintyModel, injection_affine, load_sensitivity,
                         nominal_injections, recourse_sensitivity)

log = logging.getLogger(__name__)

VARIABLES = ("v_re", "v_im", "p", "q")


class SpiceError(RuntimeError):
    pass


@dataclass
class SpiceConfig:
    c_off: float = 1e-10
    truncate_quartic: bool = True
    degree: int = 2
    newton_tol: float = 1e-8
    newton_max_iter: int = 50
    grad_tol: float = 1e-8
    obj_decrease_tol: float = 1e-14
    max_iter: int = 100
    lambda0: float = 1e-8

    def __post_init__(self):
        if self.c_off < 0:
            raise ValueError("c_off must be nonnegative")
        if self.degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")


@dataclass(eq=False)
class SparsityMask:
    """``keep[var]`` is a boolean ``(N, K2)`` array over the degree-2 positions."""

    positions: np.ndarray
    keep: dict
    c_off: float

    @property
    def fraction(self) -> float:
        total = sum(k.size for k in self.keep.values())
        dropped = sum(int((~k).sum()) for k in self.keep.values())
        return dropped / total if total else 0.0

    def full(self, var: str, K: int) -> np.ndarray:
        """Keep flags over all ``K`` positions (degree <= 1 always kept)."""
        keep = np.ones((self.keep[var].shape[0], K), dtype=bool)
        keep[:, self.positions] = self.keep[var]
        return keep


@dataclass(eq=False)
class PceCoefficients:
    """Coefficient arrays ``(rows, K)`` per variable, aligned with ``basis``."""

    basis: PceBasis
    v_re: np.ndarray
    v_im: np.ndarray
    p: np.ndarray
    q: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    net: Network | None = None
    mask: SparsityMask | None = None
    diagnostics: dict = field(default_factory=dict)

    VARIABLES = ("v_re", "v_im", "p", "q", "gen_p", "gen_q")

    @property
    def K(self) -> int:
        return self.basis.K

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def degree(self) -> int:
        return int(self.basis.degrees.max())

    def variable(self, name: str) -> np.ndarray:
        if name not in self.VARIABLES:
            raise KeyError(name)
        return getattr(self, name)

    def X0(self, name: str) -> np.ndarray:
        return self.variable(name)[:, 0]

    def X1(self, name: str) -> np.ndarray:
        return self.variable(name)[:, 1:self.n + 1]

    def X2(self, name: str) -> np.ndarray:
        """Degree-2 coefficients as symmetric ``(rows, n, n)`` matrices."""
        x = self.variable(name)
        out = np.zeros((x.shape[0], self.n, self.n))
        for (i, j), k in self.basis.index_set.pair_index().items():
            out[:, i, j] = x[:, k]
            out[:, j, i] = x[:, k]
        return out

    def nonzero_count(self) -> int:
        return int(sum(np.count_nonzero(self.variable(v)) for v in self.VARIABLES))


# ---------------------------------------------------------------------------
# Injections


def _check_family(model: UncertaintyModel, basis: PceBasis):
    want = FAMILY_OF_DISTRIBUTION[model.distribution]
    if basis.family != want:
        raise ValueError(f"basis family {basis.family} does not match {model.distribution}")


def overload_injections(net: Network, model: UncertaintyModel, basis: PceBasis):
    """Galerkin projection of the affine injection model onto ``basis``.

    Returns ``(p, q)`` coefficient arrays of shape ``(N, K)``; degree-2 entries
    are zero because injections are affine in the drivers.
    """
    _check_family(model, basis)
    p0, q0, P1, Q1 = injection_affine(net, model)
    N, K, n = net.n_bus, basis.K, model.n_areas
    if basis.n != n:
        raise ValueError("basis dimension differs from the number of areas")
    p = np.zeros((N, K))
    q = np.zeros((N, K))
    p[:, 0], q[:, 0] = p0, q0
    if K > 1:
        p[:, 1:n + 1] = P1
        q[:, 1:n + 1] = Q1
    return p, q


def _load_coefficients(net, model, K):
    N, n = net.n_bus, model.n_areas
    lp = np.zeros((N, K))
    lq = np.zeros((N, K))
    for ld in net.loads:
        i = net.bus_index(ld.bus)
        lp[i, 0] += ld.p_nom
        lq[i, 0] += ld.q_nom
    if K > 1:
        dp, dq = load_sensitivity(net, model)
        lp[:, 1:n + 1] = dp
        lq[:, 1:n + 1] = dq
    return lp, lq


def generator_split(net: Network, p_bus_gen, q_bus_gen, p_sched, coefficients=True):
    """Per-generator outputs from bus totals of generation.

    ``p_bus_gen``/``q_bus_gen`` hold total generation per bus (leading axis
    ``N``); ``p_sched`` holds each generator's scheduled active power (leading
    axis ``N_gen``). Slack generators share the slack bus total equally;
    reactive output is shared equally on slack and PV buses and fixed at
    ``q_nom`` on PQ buses. The trailing axis is PCE coefficients when
    ``coefficients`` is true, samples otherwise.
    """
    gi = net.gen_bus_index()
    count = np.bincount(gi, minlength=net.n_bus).astype(float)[gi]
    kinds = net.kinds()[gi]
    shape = (-1,) + (1,) * (np.ndim(p_bus_gen) - 1)
    pg = np.array(p_sched, dtype=float, copy=True)
    qg = q_bus_gen[gi] / count.reshape(shape)
    slack = kinds == "slack"
    pg[slack] = (p_bus_gen[gi] / count.reshape(shape))[slack]
    pq = kinds == "pq"
    if pq.any():
        qn = np.array([g.q_nom for g in net.generators])[pq]
        if qg.ndim == 1:
            qg[pq] = qn
        elif coefficients:
            qg[pq] = 0.0
            qg[pq, 0] = qn
        else:
            qg[pq] = qn[:, None]
    return pg, qg


def _finish(net, model, basis, vr, vi, p_set, q_set, T_full, mask=None, diagnostics=None):
    """Assemble PceCoefficients from a voltage solution."""
    Y = build_admittance(net).Y
    V = vr + 1j * vi
    S = galerkin_product(V, np.conj(Y @ V), T_full)
    kinds = net.kinds()
    p = S.real.copy()
    q = S.imag.copy()
    p_fixed = kinds != "slack"
    q_fixed = kinds == "pq"
    p[p_fixed] = p_set[p_fixed]
    q[q_fixed] = q_set[q_fixed]
    if mask is not None:
        p[~mask.full("p", basis.K)] = 0.0
        q[~mask.full("q", basis.K)] = 0.0
        vr = np.where(mask.full("v_re", basis.K), vr, 0.0)
        vi = np.where(mask.full("v_im", basis.K), vi, 0.0)
    K, n = basis.K, model.n_areas
    lp, lq = _load_coefficients(net, model, K)
    sched = np.zeros((len(net.generators), K))
    sched[:, 0] = [g.p_nom for g in net.generators]
    if K > 1:
        sched[:, 1:n + 1] = recourse_sensitivity(net, model)
    gen_p, gen_q = generator_split(net, p + lp, q + lq, sched)
    return PceCoefficients(basis=basis, v_re=vr, v_im=vi, p=p, q=q, gen_p=gen_p, gen_q=gen_q,
                           net=net, mask=mask, diagnostics=dict(diagnostics or {}))


# ---------------------------------------------------------------------------
# Stages 1 and 2


def deterministic_pf(net: Network, config: SpiceConfig | None = None) -> VoltageState:
    config = config or SpiceConfig()
    p, q = nominal_injections(net)
    spec = pf_core.make_spec(net, p, q)
    return pf_core.solve_pf(spec, tol=config.newton_tol, max_iter=config.newton_max_iter)


def _square_solve(net, model, basis, warm_vr, warm_vi, config, what):
    p, q = overload_injections(net, model, basis)
    spec = PfSpec(build_admittance(net), net.kinds(), p, q, net.voltage_setpoints(), basis.triple)
    N, K = net.n_bus, basis.K
    vr = np.zeros((N, K))
    vi = np.zeros((N, K))
    kw = min(K, warm_vr.shape[1])
    vr[:, :kw] = warm_vr[:, :kw]
    vi[:, :kw] = warm_vi[:, :kw]
    z0 = np.concatenate([vr.ravel(), vi.ravel()])
    z, it = pf_core.newton(lambda x: pf_core.residual_vector(spec, x),
                           lambda x: pf_core.jacobian_matrix(spec, x),
                           z0, config.newton_tol, config.newton_max_iter, what=what)
    vr = z[:N * K].reshape(N, K)
    vi = z[N * K:].reshape(N, K)
    res = float(np.max(np.abs(pf_core.residual_vector(spec, z)), initial=0.0))
    return vr, vi, p, q, it, res


def solve_degree1(net: Network, model: UncertaintyModel, basis: PceBasis,
                  warm: VoltageState, config: SpiceConfig | None = None) -> PceCoefficients:
    """Square Newton solve of the overloaded power flow on degree <= 1 indices."""
    config = config or SpiceConfig()
    b1 = basis.restrict(1)
    vr, vi, p, q, it, res = _square_solve(
        net, model, b1, np.asarray(warm.v_re)[:, None], np.asarray(warm.v_im)[:, None],
        config, "degree-1 PCE")
    return _finish(net, model, b1, vr, vi, p, q, b1.triple,
                   diagnostics={"iterations": it, "residual_inf": res})


def solve_full_pce(net: Network, model: UncertaintyModel, basis: PceBasis,
                   warm: PceCoefficients | None = None,
                   config: SpiceConfig | None = None) -> PceCoefficients:
    """Square Newton solve of the complete overloaded system on ``basis``."""
    config = config or SpiceConfig()
    if warm is None:
        det = deterministic_pf(net, config)
        warm = solve_degree1(net, model, basis, det, config)
    vr, vi, p, q, it, res = _square_solve(net, model, basis, warm.v_re, warm.v_im, config,
                                          f"degree-{int(basis.degrees.max())} PCE")
    return _finish(net, model, basis, vr, vi, p, q, basis.triple,
                   diagnostics={"iterations": it, "residual_inf": res})


# ---------------------------------------------------------------------------
# Stage 3


def build_mask(deg1: PceCoefficients, c_off: float, basis: PceBasis | None = None) -> SparsityMask:
    """Drop degree-2 index ``(i, j)`` of a variable when its degree-1
    coefficients satisfy ``|X1_i X1_j| < c_off * max_k |X1_k|``.

    Rows whose degree-1 coefficients all vanish are dropped entirely for any
    positive ``c_off``.
    """
    if basis is None:
        basis = make_basis(deg1.n, 2, deg1.basis.family)
    pairs = basis.index_set.pair_index()
    items = sorted(pairs.items(), key=lambda kv: kv[1])
    positions = np.array([k for _, k in items], dtype=int)
    ii = np.array([i for (i, _), _ in items], dtype=int)
    jj = np.array([j for (_, j), _ in items], dtype=int)
    keep = {}
    for var in VARIABLES:
        X1 = deg1.X1(var)
        scale = np.abs(X1).max(axis=1, initial=0.0)
        prod = np.abs(X1[:, ii] * X1[:, jj])
        drop = prod < c_off * scale[:, None]
        if c_off > 0:
            # a row with no first-order content has only zero products
            drop |= (scale == 0)[:, None]
        keep[var] = ~drop
    return SparsityMask(positions=positions, keep=keep, c_off=c_off)


# ---------------------------------------------------------------------------
# Stage 4


def truncated_tensor(basis: PceBasis) -> np.ndarray:
    """Triple tensor without products of two degree-2 basis functions."""
    T = basis.triple.copy()
    d2 = basis.degrees == 2
    T[np.ix_(d2, d2)] = 0.0
    return T


class Degree2Problem:
    """Least-squares residual of the masked (optionally truncated) degree-2 system."""

    def __init__(self, net: Network, basis: PceBasis, injections, mask: SparsityMask | None,
                 truncate_quartic: bool):
        self.net = net
        self.basis = basis
        self.truncate_quartic = truncate_quartic
        p, q = injections
        T = truncated_tensor(basis) if truncate_quartic else basis.triple
        self.T = T
        self.spec = PfSpec(build_admittance(net), net.kinds(), p, q, net.voltage_setpoints(), T)
        N, K = net.n_bus, basis.K
        self.N, self.K = N, K
        if mask is None:
            keep_r = keep_i = np.ones((N, K), dtype=bool)
        else:
            keep_r, keep_i = mask.full("v_re", K), mask.full("v_im", K)
        self.mask = mask
        self.free = np.concatenate([keep_r.ravel(), keep_i.ravel()])
        kinds = net.kinds()
        extra = []
        if mask is not None:
            for var, where in (("p", kinds == "slack"), ("q", kinds != "pq")):
                drop = ~mask.full(var, K) & where[:, None]
                for i, k in zip(*np.nonzero(drop)):
                    extra.append((0 if var == "p" else 1, int(i) * K + int(k)))
        self.extra = extra
        self.z_fixed = np.zeros(2 * N * K)

    @property
    def n_unknowns(self) -> int:
        return int(self.free.sum())

    @property
    def n_equations(self) -> int:
        return 2 * self.N * self.K + len(self.extra)

    def term_counts(self) -> dict:
        """Number of ``(k1, k2)`` pairs per Galerkin equation, full vs as assembled."""
        K = self.K
        k2 = int((self.basis.degrees == 2).sum())
        return {"full": K * K, "assembled": K * K - k2 * k2 if self.truncate_quartic else K * K,
                "tensor_nonzeros": int(np.count_nonzero(self.T))}

    def expand(self, x) -> np.ndarray:
        z = self.z_fixed.copy()
        z[self.free] = x
        return z

    def restrict(self, z) -> np.ndarray:
        return np.asarray(z)[self.free]

    def residual(self, x) -> np.ndarray:
        z = self.expand(x)
        r = pf_core.residual_vector(self.spec, z)
        if not self.extra:
            return r
        N, K = self.N, self.K
        V = (z[:N * K] + 1j * z[N * K:]).reshape(N, K)
        S = galerkin_product(V, np.conj(self.spec.Y @ V), self.T).ravel()
        return np.concatenate([r, [S.real[j] if part == 0 else S.imag[j] for part, j in self.extra]])

    def jacobian(self, x) -> sp.csr_matrix:
        z = self.expand(x)
        J = pf_core.jacobian_matrix(self.spec, z)
        if self.extra:
            dvr, dvi = pf_core.power_jacobian(self.spec, z)
            dS = sp.hstack([dvr, dvi]).tocsr()
            rows = [dS[j].real if part == 0 else dS[j].imag for part, j in self.extra]
            J = sp.vstack([J] + rows).tocsr()
        return J[:, np.flatnonzero(self.free)]


def assemble_residual_deg2(net, basis, injections, mask, truncate_quartic) -> Degree2Problem:
    return Degree2Problem(net, basis, injections, mask, truncate_quartic)


def levenberg_marquardt(fun, jac, x0, grad_tol=1e-8, decrease_tol=1e-14, max_iter=100,
                        lambda0=1e-8):
    """Minimise ``|fun(x)|^2`` with Levenberg damping ``(J'J + lam I)``.

    Returns ``(x, info)``; ``info["history"]`` lists the objective after every
    accepted step.
    """
    x = np.array(x0, dtype=float)
    r = fun(x)
    obj = float(r @ r)
    lam = lambda0
    history = [obj]
    converged = False
    reason = "max_iter"
    g_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        J = jac(x)
        g = J.T @ r
        g_norm = float(np.max(np.abs(g), initial=0.0))
        if g_norm <= grad_tol:
            converged, reason = True, "gradient"
            it -= 1
            break
        JTJ = (J.T @ J).tocsc()
        eye = sp.identity(JTJ.shape[0], format="csc")
        accepted = False
        while lam <= 1e12:
            with np.errstate(all="ignore"):
                dx = spla.spsolve(JTJ + lam * eye, -g)
            if np.all(np.isfinite(dx)):
                r_new = fun(x + dx)
                obj_new = float(r_new @ r_new)
                if np.isfinite(obj_new) and obj_new < obj:
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            reason = "no_descent"
            converged = obj <= decrease_tol
            break
        decrease = obj - obj_new
        x, r, obj = x + dx, r_new, obj_new
        lam = max(lam / 10.0, 1e-20)
        history.append(obj)
        log.debug("LM iter %d objective %.3e", it, obj)
        if decrease < decrease_tol:
            converged, reason = True, "objective"
            break
    return x, {"objective": obj, "iterations": it, "history": history,
               "grad_inf": g_norm, "converged": converged, "reason": reason}


def solve_degree2(problem: Degree2Problem, warm: PceCoefficients, model: UncertaintyModel,
                  config: SpiceConfig | None = None) -> PceCoefficients:
    """Levenberg-Marquardt solve of ``problem`` warm-started from degree-1 coefficients."""
    config = config or SpiceConfig()
    N, K = problem.N, problem.K
    vr = np.zeros((N, K))
    vi = np.zeros((N, K))
    k1 = warm.K
    vr[:, :k1] = warm.v_re
    vi[:, :k1] = warm.v_im
    x0 = problem.restrict(np.concatenate([vr.ravel(), vi.ravel()]))
    x, info = levenberg_marquardt(problem.residual, problem.jacobian, x0, config.grad_tol,
                                  config.obj_decrease_tol, config.max_iter, config.lambda0)
    if not info["converged"]:
        log.warning("degree-2 least squares stopped (%s) at objective %.3e",
                    info["reason"], info["objective"])
    z = problem.expand(x)
    vr = z[:N * K].reshape(N, K)
    vi = z[N * K:].reshape(N, K)
    p, q = problem.spec.p, problem.spec.q
    return _finish(problem.net, model, problem.basis, vr, vi, p, q, problem.basis.triple,
                   mask=problem.mask, diagnostics={"least_squares": info})


def galerkin_residual(coeffs: PceCoefficients, model: UncertaintyModel) -> float:
    """Infinity norm of the full (untruncated, unmasked) overloaded residual."""
    net, basis = coeffs.net, coeffs.basis
    p, q = overload_injections(net, model, basis)
    spec = PfSpec(build_admittance(net), net.kinds(), p, q, net.voltage_setpoints(), basis.triple)
    z = np.concatenate([coeffs.v_re.ravel(), coeffs.v_im.ravel()])
    return float(np.max(np.abs(pf_core.residual_vector(spec, z))))


# ---------------------------------------------------------------------------
# Driver


def spice(net: Network, model: UncertaintyModel, config: SpiceConfig | None = None,
          basis: PceBasis | None = None) -> PceCoefficients:
    """Run the staged solve; diagnostics are attached to the result."""
    config = config or SpiceConfig()
    family = FAMILY_OF_DISTRIBUTION[model.distribution]
    if basis is None:
        basis = make_basis(model.n_areas, 2, family)
    diag: dict = {"c_off": config.c_off, "truncate_quartic": config.truncate_quartic,
                  "degree": config.degree, "times": {}}

    t0 = time.perf_counter()
    det = deterministic_pf(net, config)
    diag["times"]["deterministic"] = time.perf_counter() - t0
    diag["deterministic"] = det

    t0 = time.perf_counter()
    deg1 = solve_degree1(net, model, basis, det, config)
    diag["times"]["degree1"] = time.perf_counter() - t0
    diag["degree1_residual_inf"] = deg1.diagnostics["residual_inf"]
    if config.degree == 1:
        deg1.diagnostics.update(diag)
        deg1.diagnostics["sparsity"] = 0.0
        return deg1

    t0 = time.perf_counter()
    mask = build_mask(deg1, config.c_off, basis)
    diag["times"]["mask"] = time.perf_counter() - t0
    diag["sparsity"] = mask.fraction

    t0 = time.perf_counter()
    problem = assemble_residual_deg2(net, basis, overload_injections(net, model, basis), mask,
                                     config.truncate_quartic)
    diag["unknowns"] = problem.n_unknowns
    diag["equations"] = problem.n_equations
    diag["terms_per_equation"] = problem.term_counts()
    out = solve_degree2(problem, deg1, model, config)
    diag["times"]["degree2"] = time.perf_counter() - t0
    diag["objective"] = out.diagnostics["least_squares"]["objective"]
    diag["galerkin_residual_inf"] = galerkin_residual(out, model)
    out.diagnostics.update(diag)
    out.diagnostics["degree1"] = deg1
    return out
