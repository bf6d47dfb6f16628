"""Iterative chance-constrained AC-OPF.

The loop alternates a deterministic AC-OPF run against *effective* limits with
a SPICE-based estimate of the ``delta``-quantiles of every constrained
quantity at the resulting operating point. Quantiles falling outside the
original limits tighten the effective limits by the excess; the loop stops
when no quantile exceeds its limit.

Sign convention: the excess on an upper limit is ``max(Q_upper - limit, 0)``
and on a lower limit ``min(Q_lower - limit, 0)``. Both are *subtracted* from
the corresponding effective limit, so limits only ever tighten.

The deterministic OPF is pluggable: any callable ``opf(net, limits)`` returning
an :class:`OperatingPoint` can be passed to :func:`solve_cc_opf`. Quantiles at
outer iteration ``t`` use seed ``seed + seed_stride * (t - 1)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .netmodel import Network, branch_flow_matrices, build_admittance
from .pf_core import VoltageState
from .spice_solver import SpiceConfig, spice
from .stochastic import UncertaintyModel, sample
from .uq_eval import evaluate_pce, quantiles, run_monte_carlo

log = logging.getLogger(__name__)

LIMIT_CLASSES = ("v", "s", "p", "q")


class OpfError(RuntimeError):
    pass


class Infeasible(OpfError):
    pass


@dataclass
class EffectiveLimits:
    v_min: np.ndarray
    v_max: np.ndarray
    s_max: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray

    @classmethod
    def from_network(cls, net: Network) -> "EffectiveLimits":
        gens = net.generators
        return cls(
            v_min=np.array([b.v_min for b in net.buses]),
            v_max=np.array([b.v_max for b in net.buses]),
            s_max=np.array([br.s_max for br in net.branches]),
            p_min=np.array([g.p_min for g in gens]),
            p_max=np.array([g.p_max for g in gens]),
            q_min=np.array([g.q_min for g in gens]),
            q_max=np.array([g.q_max for g in gens]),
        )

    def copy(self) -> "EffectiveLimits":
        return EffectiveLimits(**{k: v.copy() for k, v in self.__dict__.items()})

    def pairs(self):
        return (("v", self.v_min, self.v_max), ("p", self.p_min, self.p_max),
                ("q", self.q_min, self.q_max))

    def check(self):
        for name, lo, hi in self.pairs():
            bad = np.flatnonzero(lo > hi + 1e-12)
            if bad.size:
                raise Infeasible(f"effective {name} limits crossed at positions {bad.tolist()}")
        if np.any(self.s_max < 0):
            raise Infeasible("effective flow limit became negative")

    def tighter_or_equal(self, other: "EffectiveLimits", tol=1e-12) -> bool:
        """True when every limit here is at least as tight as in ``other``."""
        return bool(np.all(self.v_min >= other.v_min - tol) and np.all(self.v_max <= other.v_max + tol)
                    and np.all(self.s_max <= other.s_max + tol)
                    and np.all(self.p_min >= other.p_min - tol) and np.all(self.p_max <= other.p_max + tol)
                    and np.all(self.q_min >= other.q_min - tol) and np.all(self.q_max <= other.q_max + tol))


@dataclass
class CcOpfConfig:
    delta: float = 0.05
    max_outer_iterations: int = 10
    samples: int = 10_000
    seed: int = 0
    seed_stride: int = 1
    tol: float = 1e-6
    validation_samples: int = 10_000
    validation_seed: int | None = None
    spice: SpiceConfig = field(default_factory=SpiceConfig)

    def __post_init__(self):
        if not 0 < self.delta < 0.5:
            raise ValueError("delta must lie in (0, 0.5)")


@dataclass
class OperatingPoint:
    pg: np.ndarray
    qg: np.ndarray
    state: VoltageState
    cost: float
    net: Network


@dataclass
class QuantileSet:
    v_lower: np.ndarray
    v_upper: np.ndarray
    s_upper: np.ndarray
    p_lower: np.ndarray
    p_upper: np.ndarray
    q_lower: np.ndarray
    q_upper: np.ndarray
    median: dict = field(default_factory=dict)


@dataclass
class Excess:
    v_min: np.ndarray
    v_max: np.ndarray
    s_max: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray

    def by_class(self) -> dict[str, float]:
        def m(*a):
            return float(max((np.max(np.abs(x), initial=0.0) for x in a), default=0.0))

        return {"v": m(self.v_min, self.v_max), "s": m(self.s_max),
                "p": m(self.p_min, self.p_max), "q": m(self.q_min, self.q_max)}

    def max(self) -> float:
        return max(self.by_class().values())


# ---------------------------------------------------------------------------
# Deterministic OPF


def _dispatch_network(net: Network, pg, qg, vm) -> Network:
    gens = []
    for k, g in enumerate(net.generators):
        i = net.bus_index(g.bus)
        gens.append(replace(g, p_nom=float(pg[k]), q_nom=float(qg[k]), v_nom=float(vm[i])))
    return net.replace(generators=gens)


def deterministic_opf(net: Network, limits: EffectiveLimits, x0=None,
                      max_iter: int = 500) -> OperatingPoint:
    """Minimum-cost AC-OPF in rectangular voltages against ``limits``.

    Reference implementation using sequential least-squares programming with
    analytic constraint Jacobians.
    """
    for _, lo, hi in limits.pairs():
        if np.any(lo > hi):
            raise Infeasible("limits have min above max")
    N, G = net.n_bus, len(net.generators)
    Y = build_admittance(net).Y.toarray()
    Yf, Yt = (m.toarray() for m in branch_flow_matrices(net))
    f, t = net.branch_ends()
    gi = net.gen_bus_index()
    Cg = np.zeros((N, G))
    Cg[gi, np.arange(G)] = 1.0
    pd = np.zeros(N)
    qd = np.zeros(N)
    for ld in net.loads:
        i = net.bus_index(ld.bus)
        pd[i] += ld.p_nom
        qd[i] += ld.q_nom
    slack = net.slack
    rated = np.flatnonzero(limits.s_max > 0)
    costs = [np.asarray(g.cost, dtype=float) for g in net.generators]
    dcosts = [np.polyder(c) if c.size > 1 else np.zeros(1) for c in costs]
    scale = 1.0 / max(1.0, sum(abs(np.polyval(c, g.p_nom)) for c, g in zip(costs, net.generators)))

    def split(x):
        return x[:N], x[N:2 * N], x[2 * N:2 * N + G], x[2 * N + G:]

    def objective(x):
        pg = split(x)[2]
        return scale * sum(np.polyval(c, p) for c, p in zip(costs, pg) if c.size)

    def objective_grad(x):
        g = np.zeros_like(x)
        pg = split(x)[2]
        g[2 * N:2 * N + G] = [scale * np.polyval(d, p) for d, p in zip(dcosts, pg)]
        return g

    def power(vr, vi):
        V = vr + 1j * vi
        I = Y @ V
        S = V * np.conj(I)
        dS_dvr = np.diag(np.conj(I)) + np.diag(V) @ np.conj(Y)
        dS_dvi = 1j * (np.diag(np.conj(I)) - np.diag(V) @ np.conj(Y))
        return S, dS_dvr, dS_dvi

    def eq(x):
        vr, vi, pg, qg = split(x)
        S, _, _ = power(vr, vi)
        return np.concatenate([Cg @ pg - pd - S.real, Cg @ qg - qd - S.imag, [vi[slack]]])

    def eq_jac(x):
        vr, vi, pg, qg = split(x)
        _, dr, di = power(vr, vi)
        J = np.zeros((2 * N + 1, 2 * N + 2 * G))
        J[:N, :N] = -dr.real
        J[:N, N:2 * N] = -di.real
        J[:N, 2 * N:2 * N + G] = Cg
        J[N:2 * N, :N] = -dr.imag
        J[N:2 * N, N:2 * N] = -di.imag
        J[N:2 * N, 2 * N + G:] = Cg
        J[2 * N, N + slack] = 1.0
        return J

    def flows(vr, vi):
        V = vr + 1j * vi
        out, jr, ji = [], [], []
        for Yb, e in ((Yf, f), (Yt, t)):
            Yb = Yb[rated]
            e = e[rated]
            I = Yb @ V
            S = V[e] * np.conj(I)
            E = np.zeros((rated.size, N))
            E[np.arange(rated.size), e] = 1.0
            dS_dvr = np.diag(np.conj(I)) @ E + np.diag(V[e]) @ np.conj(Yb)
            dS_dvi = 1j * (np.diag(np.conj(I)) @ E - np.diag(V[e]) @ np.conj(Yb))
            out.append(np.abs(S) ** 2)
            # d|S|^2 = 2 Re(conj(S) dS)
            jr.append(2 * (np.conj(S)[:, None] * dS_dvr).real)
            ji.append(2 * (np.conj(S)[:, None] * dS_dvi).real)
        return np.concatenate(out), np.vstack(jr), np.vstack(ji)

    smax2 = np.concatenate([limits.s_max[rated], limits.s_max[rated]]) ** 2

    def ineq(x):
        vr, vi, _, _ = split(x)
        v2 = vr ** 2 + vi ** 2
        parts = [v2 - limits.v_min ** 2, limits.v_max ** 2 - v2]
        if rated.size:
            s2, _, _ = flows(vr, vi)
            parts.append(smax2 - s2)
        return np.concatenate(parts)

    def ineq_jac(x):
        vr, vi, _, _ = split(x)
        Dv = np.hstack([np.diag(2 * vr), np.diag(2 * vi), np.zeros((N, 2 * G))])
        rows = [Dv, -Dv]
        if rated.size:
            _, jr, ji = flows(vr, vi)
            rows.append(-np.hstack([jr, ji, np.zeros((jr.shape[0], 2 * G))]))
        return np.vstack(rows)

    if x0 is None:
        from .spice_solver import deterministic_pf

        st = deterministic_pf(net)
        S, _, _ = power(st.v_re, st.v_im)
        pg0 = np.array([g.p_nom for g in net.generators])
        qg0 = np.array([g.q_nom for g in net.generators])
        x0 = np.concatenate([st.v_re, st.v_im, pg0, qg0])
    bounds = ([(None, None)] * (2 * N) + list(zip(limits.p_min, limits.p_max))
              + list(zip(limits.q_min, limits.q_max)))
    x0 = np.array(x0, dtype=float)
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    x0 = np.clip(x0, lo, hi)
    res = minimize(objective, x0, jac=objective_grad, method="SLSQP", bounds=bounds,
                   constraints=[{"type": "eq", "fun": eq, "jac": eq_jac},
                                {"type": "ineq", "fun": ineq, "jac": ineq_jac}],
                   options={"maxiter": max_iter, "ftol": 1e-12})
    x = res.x
    viol = max(np.max(np.abs(eq(x))), -np.min(ineq(x), initial=0.0))
    if not res.success or viol > 1e-6:
        if res.status in (4, 6) or viol > 1e-6:
            raise Infeasible(f"OPF did not find a feasible point: {res.message} (violation {viol:.2e})")
        raise OpfError(f"OPF did not converge: {res.message}")
    vr, vi, pg, qg = split(x)
    state = VoltageState(vr.copy(), vi.copy())
    cost = float(sum(np.polyval(c, p) for c, p in zip(costs, pg) if c.size))
    return OperatingPoint(pg.copy(), qg.copy(), state, cost,
                          _dispatch_network(net, pg, qg, np.abs(vr + 1j * vi)))


# ---------------------------------------------------------------------------
# Quantiles and tightening


def evaluate_quantiles(net: Network, model: UncertaintyModel, op: OperatingPoint, delta: float,
                       M: int, seed: int, config: SpiceConfig | None = None) -> QuantileSet:
    """Upper/lower ``delta``-quantiles of voltages, flows and generation from SPICE."""
    coeffs = spice(op.net, model, config or SpiceConfig())
    values = evaluate_pce(coeffs, sample(model, M, seed)).values
    return quantile_set(values, delta)


def quantile_set(values: dict, delta: float) -> QuantileSet:
    return QuantileSet(
        v_lower=quantiles(values["vm"], delta, "lower"),
        v_upper=quantiles(values["vm"], delta, "upper"),
        s_upper=quantiles(values["sf"], delta, "upper"),
        p_lower=quantiles(values["pg"], delta, "lower"),
        p_upper=quantiles(values["pg"], delta, "upper"),
        q_lower=quantiles(values["qg"], delta, "lower"),
        q_upper=quantiles(values["qg"], delta, "upper"),
        median={k: quantiles(values[k], 0.5, "upper") for k in ("vm", "sf", "pg", "qg")},
    )


def excess(Q: QuantileSet, originals: EffectiveLimits) -> Excess:
    rated = originals.s_max > 0
    return Excess(
        v_min=np.minimum(Q.v_lower - originals.v_min, 0.0),
        v_max=np.maximum(Q.v_upper - originals.v_max, 0.0),
        s_max=np.where(rated, np.maximum(Q.s_upper - originals.s_max, 0.0), 0.0),
        p_min=np.minimum(Q.p_lower - originals.p_min, 0.0),
        p_max=np.maximum(Q.p_upper - originals.p_max, 0.0),
        q_min=np.minimum(Q.q_lower - originals.q_min, 0.0),
        q_max=np.maximum(Q.q_upper - originals.q_max, 0.0),
    )


def tighten(limits: EffectiveLimits, Q: QuantileSet, originals: EffectiveLimits):
    """Return ``(new_limits, excess)``; each limit moves inward by its excess."""
    d = excess(Q, originals)
    new = EffectiveLimits(
        v_min=limits.v_min - d.v_min,
        v_max=limits.v_max - d.v_max,
        s_max=limits.s_max - d.s_max,
        p_min=limits.p_min - d.p_min,
        p_max=limits.p_max - d.p_max,
        q_min=limits.q_min - d.q_min,
        q_max=limits.q_max - d.q_max,
    )
    new.check()
    return new, d


# ---------------------------------------------------------------------------
# Driver


def violation_rates(values: dict, originals: EffectiveLimits, tol: float = 1e-9) -> dict:
    """Largest empirical violation probability per constraint class."""
    vm, sf, pg, qg = values["vm"], values["sf"], values["pg"], values["qg"]
    rated = originals.s_max > 0

    def worst(bad):
        return float(bad.mean(axis=0).max(initial=0.0)) if bad.size else 0.0

    return {
        "v": worst((vm < originals.v_min - tol) | (vm > originals.v_max + tol)),
        "s": worst(sf[:, rated] > originals.s_max[rated] + tol),
        "p": worst((pg < originals.p_min - tol) | (pg > originals.p_max + tol)),
        "q": worst((qg < originals.q_min - tol) | (qg > originals.q_max + tol)),
    }


@dataclass
class Certificate:
    converged: bool
    iterations: list
    limits_history: list
    final_excess: dict
    margins: dict
    validation: dict
    elapsed: float


def solve_cc_opf(net: Network, model: UncertaintyModel, config: CcOpfConfig | None = None,
                 opf=deterministic_opf):
    """Run the outer loop; returns ``(operating_point, certificate)``."""
    config = config or CcOpfConfig()
    t0 = time.perf_counter()
    originals = EffectiveLimits.from_network(net)
    limits = originals.copy()
    history = [limits.copy()]
    rows = []
    op = None
    x0 = None
    converged = False
    d = None
    Q = None
    for it in range(1, config.max_outer_iterations + 1):
        # the reference OPF accepts a warm start; plug-ins only need (net, limits)
        op = opf(net, limits, x0) if opf is deterministic_opf and x0 is not None else opf(net, limits)
        x0 = np.concatenate([op.state.v_re, op.state.v_im, op.pg, op.qg])
        seed = config.seed + config.seed_stride * (it - 1)
        Q = evaluate_quantiles(net, model, op, config.delta, config.samples, seed, config.spice)
        new_limits, d = tighten(limits, Q, originals)
        row = {"iteration": it, "cost": op.cost, **{f"delta_{k}": v for k, v in d.by_class().items()}}
        rows.append(row)
        log.info("cc-opf iteration %d cost %.4f max excess %.3e", it, op.cost, d.max())
        if d.max() <= config.tol:
            converged = True
            break
        limits = new_limits
        history.append(limits.copy())
    margins = {}
    if Q is not None:
        margins = {
            "v_lower": float(np.min(Q.v_lower - originals.v_min)),
            "v_upper": float(np.min(originals.v_max - Q.v_upper)),
            "s_upper": float(np.min((originals.s_max - Q.s_upper)[originals.s_max > 0], initial=np.inf)),
            "p_lower": float(np.min(Q.p_lower - originals.p_min, initial=np.inf)),
            "p_upper": float(np.min(originals.p_max - Q.p_upper, initial=np.inf)),
            "q_lower": float(np.min(Q.q_lower - originals.q_min, initial=np.inf)),
            "q_upper": float(np.min(originals.q_max - Q.q_upper, initial=np.inf)),
        }
    validation = {}
    if config.validation_samples:
        vseed = config.validation_seed if config.validation_seed is not None else config.seed + 7919
        mc = run_monte_carlo(op.net, model, config.validation_samples, vseed)
        validation = {"seed": vseed, "samples": config.validation_samples,
                      "failures": mc.failures, "rates": violation_rates(mc.values, originals)}
    cert = Certificate(converged, rows, history, d.by_class() if d else {}, margins, validation,
                       time.perf_counter() - t0)
    return op, cert


def write_certificate(cert: Certificate, path) -> None:
    """Tab-delimited certificate: per-iteration table, then validation rates."""
    lines = ["# spice-uq cc-opf certificate", f"# converged\t{cert.converged}",
             "[iterations]", "iteration\tcost\tdelta_v\tdelta_s\tdelta_p\tdelta_q"]
    for r in cert.iterations:
        lines.append("\t".join([str(r["iteration"]), repr(float(r["cost"]))]
                               + [repr(float(r[f"delta_{k}"])) for k in LIMIT_CLASSES]))
    lines += ["[margins]", "constraint\tmargin"]
    lines += [f"{k}\t{v!r}" for k, v in cert.margins.items()]
    lines += ["[validation]", "class\tviolation_rate"]
    for k, v in cert.validation.get("rates", {}).items():
        lines.append(f"{k}\t{v!r}")
    if cert.validation:
        lines.append(f"# validation_seed\t{cert.validation['seed']}")
        lines.append(f"# validation_samples\t{cert.validation['samples']}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
