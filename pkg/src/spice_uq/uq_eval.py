"""Uncertainty quantification outputs and comparisons.

Monitored quantities (rows of every sample array are samples):

===========  ==========  ==========================================  =====================
name         element     value                                       histogram scale
===========  ==========  ==========================================  =====================
``vm``       bus         voltage magnitude ``|V_i|``                 ``v_max - v_min``
``sf``       branch      apparent power at the from end ``|S_ij|``   ``s_max``
``i2``       branch      squared series current ``|y|^2 |V_i-V_j|^2``  ``s_max^2``
``pg``       generator   active output                               ``p_max - p_min``
``qg``       generator   reactive output                             ``q_max - q_min``
===========  ==========  ==========================================  =====================

A zero scale (e.g. an unrated branch) falls back to 1 per-unit.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .netmodel import Network, build_admittance
from .pce_basis import DEFAULT_QUADRUPLE_LIMIT, PceBasis, product_tensor
from .pf_core import PowerFlowError, PowerFlowSolver, VoltageState, branch_flows
from .spice_solver import PceCoefficients, generator_split
from .stochastic import (SampleBatch, UncertaintyModel, injection_affine, load_sensitivity,
                         recourse_sensitivity, sample)

log = logging.getLogger(__name__)

QUANTITIES = ("vm", "sf", "i2", "pg", "qg")
BIN_FRACTION = 5e-3
MAX_FAILURE_FRACTION = 0.01


class MonteCarloError(RuntimeError):
    pass


class BinningMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# Derived quantities


def _series_admittance(net: Network) -> np.ndarray:
    return np.array([br.series_admittance for br in net.branches])


def quantities_from_state(net: Network, vr, vi, p_bus, q_bus, xi, model: UncertaintyModel):
    """Monitored quantities from per-sample voltages and bus injections.

    All array arguments have samples along axis 0.
    """
    V = np.asarray(vr) + 1j * np.asarray(vi)
    f, t = net.branch_ends()
    Sf, _ = branch_flows(net, V.T)
    ys = _series_admittance(net)
    i2 = (np.abs(ys) ** 2)[:, None] * np.abs(V.T[f] - V.T[t]) ** 2
    lp0 = np.zeros(net.n_bus)
    lq0 = np.zeros(net.n_bus)
    for ld in net.loads:
        i = net.bus_index(ld.bus)
        lp0[i] += ld.p_nom
        lq0[i] += ld.q_nom
    dp, dq = load_sensitivity(net, model)
    xi = np.atleast_2d(xi)
    lp = lp0[:, None] + dp @ xi.T
    lq = lq0[:, None] + dq @ xi.T
    p_nom = np.array([g.p_nom for g in net.generators])
    sched = p_nom[:, None] + recourse_sensitivity(net, model) @ xi.T
    pg, qg = generator_split(net, np.asarray(p_bus).T + lp, np.asarray(q_bus).T + lq, sched,
                             coefficients=False)
    return {"vm": np.abs(V), "sf": np.abs(Sf).T, "i2": i2.T, "pg": pg.T, "qg": qg.T}


def element_labels(net: Network) -> dict[str, list[str]]:
    buses = [str(b.id) for b in net.buses]
    branches = [f"{br.from_bus}-{br.to_bus}" for br in net.branches]
    gens = [f"{g.bus}#{k}" for k, g in enumerate(net.generators)]
    return {"vm": buses, "sf": branches, "i2": branches, "pg": gens, "qg": gens}


def quantity_scales(net: Network) -> dict[str, np.ndarray]:
    def fix(a):
        a = np.asarray(a, dtype=float)
        return np.where(a > 0, a, 1.0)

    smax = np.array([br.s_max for br in net.branches])
    return {
        "vm": fix([b.v_max - b.v_min for b in net.buses]),
        "sf": fix(smax),
        "i2": fix(smax ** 2),
        "pg": fix([g.p_max - g.p_min for g in net.generators]),
        "qg": fix([g.q_max - g.q_min for g in net.generators]),
    }


def random_voltage_buses(net: Network) -> np.ndarray:
    """Buses whose voltage magnitude is not pinned by a setpoint (PQ buses)."""
    return np.flatnonzero(net.kinds() == "pq")


# ---------------------------------------------------------------------------
# Monte-Carlo


@dataclass
class SampleSet:
    """Per-quantity sample arrays of shape ``(M, elements)``."""

    values: dict
    xi: np.ndarray
    failures: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.xi.shape[0]


def run_monte_carlo(net: Network, model: UncertaintyModel, M: int, seed: int,
                    batch: SampleBatch | None = None, threads: int = 1) -> SampleSet:
    """Solve one power flow per draw and record the monitored quantities.

    Failed solves are excluded; more than 1% failures aborts.
    """
    if batch is None:
        batch = sample(model, M, seed)
    xi = batch.samples
    M = xi.shape[0]
    adm = build_admittance(net)
    p0, q0, P1, Q1 = injection_affine(net, model)
    solver = PowerFlowSolver(adm, net.kinds(), net.voltage_setpoints())
    base, _ = solver.solve(p0, q0)
    N = net.n_bus

    def work(rows):
        out = np.full((len(rows), 2 * N), np.nan)
        for r, m in enumerate(rows):
            try:
                st, _ = solver.solve(p0 + P1 @ xi[m], q0 + Q1 @ xi[m], base)
            except PowerFlowError:
                continue
            out[r] = st.as_vector()
        return out

    chunks = np.array_split(np.arange(M), max(1, threads))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    Z = np.concatenate(parts)
    ok = np.all(np.isfinite(Z), axis=1)
    failures = int((~ok).sum())
    if failures > MAX_FAILURE_FRACTION * M:
        raise MonteCarloError(f"{failures} of {M} power flow solves failed")
    Z, xs = Z[ok], xi[ok]
    vr, vi = Z[:, :N], Z[:, N:]
    V = vr + 1j * vi
    S = V * np.conj((adm.Y @ V.T).T)
    values = quantities_from_state(net, vr, vi, S.real, S.imag, xs, model)
    return SampleSet(values=values, xi=xs, failures=failures,
                     meta={"method": "mc", "seed": int(batch.seed), "samples": M,
                           "distribution": batch.distribution})


# ---------------------------------------------------------------------------
# PCE evaluation


def _sparse_eval(Psi, C) -> np.ndarray:
    Cs = sp.csr_matrix(C)
    return np.asarray((Cs @ Psi.T).T)


def evaluate_pce(coeffs: PceCoefficients, batch: SampleBatch | np.ndarray,
                 net: Network | None = None, dense: bool = False) -> SampleSet:
    """Evaluate the expansion at every draw and derive the monitored quantities."""
    net = net or coeffs.net
    if net is None:
        raise ValueError("a network is needed to derive branch quantities")
    xi = batch.samples if isinstance(batch, SampleBatch) else np.atleast_2d(batch)
    Psi = coeffs.basis.evaluate(xi)
    ev = (lambda C: Psi @ C.T) if dense else (lambda C: _sparse_eval(Psi, C))
    vr, vi = ev(coeffs.v_re), ev(coeffs.v_im)
    V = vr + 1j * vi
    f, t = net.branch_ends()
    Sf, _ = branch_flows(net, V.T)
    ys = _series_admittance(net)
    i2 = (np.abs(ys) ** 2)[:, None] * np.abs(V.T[f] - V.T[t]) ** 2
    values = {"vm": np.abs(V), "sf": np.abs(Sf).T, "i2": i2.T,
              "pg": ev(coeffs.gen_p), "qg": ev(coeffs.gen_q),
              "v_re": vr, "v_im": vi, "p": ev(coeffs.p), "q": ev(coeffs.q)}
    meta = {"method": f"pce-deg{coeffs.degree}", "samples": xi.shape[0]}
    if isinstance(batch, SampleBatch):
        meta.update(seed=batch.seed, distribution=batch.distribution)
    return SampleSet(values=values, xi=xi, meta=meta)


# ---------------------------------------------------------------------------
# Histograms


@dataclass(frozen=True)
class Histogram:
    bin_width: float
    keys: np.ndarray
    counts: np.ndarray
    total: int
    origin: float = 0.0

    def as_dict(self) -> dict[int, int]:
        return {int(k): int(c) for k, c in zip(self.keys, self.counts)}


def build_histogram(values, scale: float, fraction: float = BIN_FRACTION,
                    origin: float = 0.0) -> Histogram:
    """Bin ``values`` with width ``fraction * scale``; bin ``k`` is
    ``[origin + k w, origin + (k+1) w)``."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("cannot build a histogram from no values")
    if not scale > 0:
        raise ValueError("scale must be positive")
    width = fraction * scale
    keys, counts = np.unique(np.floor((values - origin) / width).astype(np.int64),
                             return_counts=True)
    return Histogram(width, keys, counts, int(values.size), origin)


def tv_distance(h1: Histogram, h2: Histogram) -> float:
    """Total variation distance between two histograms on the same bins."""
    if h1.bin_width != h2.bin_width or h1.origin != h2.origin:
        raise BinningMismatch("histograms use different bins")
    if h1.total != h2.total:
        raise BinningMismatch(f"histograms have different totals ({h1.total} vs {h2.total})")
    keys = np.union1d(h1.keys, h2.keys)
    c1 = np.zeros(keys.size, dtype=np.int64)
    c2 = np.zeros(keys.size, dtype=np.int64)
    c1[np.searchsorted(keys, h1.keys)] = h1.counts
    c2[np.searchsorted(keys, h2.keys)] = h2.counts
    return float(np.abs(c1 - c2).sum()) / (2.0 * h1.total)


# ---------------------------------------------------------------------------
# Quantiles and moments


def quantile(values, delta: float, side: str = "upper") -> float:
    """Nearest-rank quantile.

    ``side="upper"`` returns ``Q`` with ``P(x <= Q) = 1 - delta``;
    ``side="lower"`` returns ``Q`` with ``P(x >= Q) = 1 - delta``.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    x = np.sort(np.asarray(values, dtype=float).ravel())
    M = x.size
    if side == "upper":
        rank = math.ceil((1 - delta) * M - 1e-9)
    elif side == "lower":
        rank = math.ceil(delta * M - 1e-9)
    else:
        raise ValueError("side must be 'upper' or 'lower'")
    return float(x[min(max(rank, 1), M) - 1])


def quantiles(values: np.ndarray, delta: float, side: str) -> np.ndarray:
    """Column-wise nearest-rank quantiles of a ``(M, elements)`` array."""
    x = np.sort(np.asarray(values, dtype=float), axis=0)
    M = x.shape[0]
    p = (1 - delta) if side == "upper" else delta
    rank = min(max(math.ceil(p * M - 1e-9), 1), M)
    return x[rank - 1].copy()


@dataclass
class Moments:
    v2_mean: np.ndarray
    v2_var: np.ndarray
    i2_mean: np.ndarray
    i2_var: np.ndarray


def _quartic_mean(basis: PceBasis, a, b, cache: dict, limit: int) -> float:
    """``E[(sum_k a_k Psi_k)^2 + (sum_k b_k Psi_k)^2)^2]`` via quadruple products."""
    support = np.flatnonzero((a != 0) | (b != 0))
    if support.size == 0:
        return 0.0
    key = tuple(support)
    Q = cache.get(key)
    if Q is None:
        Q = product_tensor(basis, "quadruple", support, limit=limit)
        cache[key] = Q
    a, b = a[support], b[support]
    return float(np.einsum("abcd,a,b,c,d->", Q, a, a, a, a)
                 + 2 * np.einsum("abcd,a,b,c,d->", Q, a, a, b, b)
                 + np.einsum("abcd,a,b,c,d->", Q, b, b, b, b))


def pce_moments(coeffs: PceCoefficients, basis: PceBasis | None = None,
                net: Network | None = None, limit: int = DEFAULT_QUADRUPLE_LIMIT) -> Moments:
    """Analytic mean and variance of ``|V_i|^2`` and of squared series currents."""
    basis = basis or coeffs.basis
    net = net or coeffs.net
    norms = basis.norms
    vr, vi = coeffs.v_re, coeffs.v_im
    cache: dict = {}
    v2_mean = ((vr ** 2 + vi ** 2) * norms).sum(axis=1)
    v2_sq = np.array([_quartic_mean(basis, vr[i], vi[i], cache, limit) for i in range(vr.shape[0])])
    v2_var = np.maximum(v2_sq - v2_mean ** 2, 0.0)
    f, t = net.branch_ends()
    y2 = np.abs(_series_admittance(net)) ** 2
    dr, di = vr[f] - vr[t], vi[f] - vi[t]
    i2_mean = y2 * ((dr ** 2 + di ** 2) * norms).sum(axis=1)
    i2_sq = np.array([_quartic_mean(basis, dr[l], di[l], cache, limit) for l in range(dr.shape[0])])
    i2_var = np.maximum(y2 ** 2 * i2_sq - i2_mean ** 2, 0.0)
    return Moments(v2_mean, v2_var, i2_mean, i2_var)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class QuantityReport:
    labels: list
    histograms: list
    mean: np.ndarray
    variance: np.ndarray
    q_lower: np.ndarray
    q_upper: np.ndarray
    scale: np.ndarray


@dataclass
class UqReport:
    meta: dict
    quantities: dict

    def histogram(self, name: str, element: int) -> Histogram:
        return self.quantities[name].histograms[element]


def build_report(samples: SampleSet, net: Network, delta: float = 0.05,
                 fraction: float = BIN_FRACTION, names=QUANTITIES, meta=None) -> UqReport:
    scales = quantity_scales(net)
    labels = element_labels(net)
    out = {}
    for name in names:
        x = samples.values[name]
        hists = [build_histogram(x[:, e], scales[name][e], fraction) for e in range(x.shape[1])]
        out[name] = QuantityReport(labels[name], hists, x.mean(axis=0), x.var(axis=0),
                                   quantiles(x, delta, "lower"), quantiles(x, delta, "upper"),
                                   scales[name])
    info = dict(samples.meta)
    info.update(meta or {})
    info.update(delta=delta, bin_fraction=fraction, total=samples.M, failures=samples.failures,
                random_buses=[int(i) for i in random_voltage_buses(net)])
    return UqReport(info, out)


_CLASS_ROWS = (("vm", "Voltage"), ("sf", "Flow"), ("i2", "Current"),
               ("pg", "Active Gen"), ("qg", "Reactive Gen"))


def compare_reports(a: UqReport, b: UqReport, voltage_elements=None) -> dict[str, float]:
    """Average and maximum TV distance per quantity class.

    ``voltage_elements`` restricts the voltage class to the given bus positions
    (by default the buses flagged ``random`` in the report metadata, else all).
    """
    rows = {}
    for name, title in _CLASS_ROWS:
        if name not in a.quantities or name not in b.quantities:
            continue
        qa, qb = a.quantities[name], b.quantities[name]
        if qa.labels != qb.labels:
            raise BinningMismatch(f"{name}: reports cover different elements")
        idx = range(len(qa.labels))
        if name == "vm":
            sel = voltage_elements
            if sel is None and "random_buses" in a.meta:
                sel = a.meta["random_buses"]
            if sel is not None:
                idx = list(sel)
        tv = np.array([tv_distance(qa.histograms[e], qb.histograms[e]) for e in idx])
        if tv.size == 0:
            continue
        rows[f"Ave TV {title}"] = float(tv.mean())
        rows[f"Max TV {title}"] = float(tv.max())
    return rows


def tv_by_element(a: UqReport, b: UqReport, name: str) -> np.ndarray:
    qa, qb = a.quantities[name], b.quantities[name]
    return np.array([tv_distance(h1, h2) for h1, h2 in zip(qa.histograms, qb.histograms)])


def _fmt(x) -> str:
    return repr(float(x))


def write_report(report: UqReport, path) -> None:
    """Write a report as tab-delimited text.

    Layout: ``# key<TAB>value`` metadata lines, then a ``[summary]`` table
    (quantity, element, mean, variance, q_lower, q_upper, scale) and a
    ``[histogram]`` table (quantity, element, bin_width, bin, count).
    """
    lines = ["# spice-uq report"]
    for k in sorted(report.meta):
        v = report.meta[k]
        if isinstance(v, (list, tuple, np.ndarray)):
            v = ",".join(str(int(x)) for x in v)
        lines.append(f"# {k}\t{v}")
    lines.append("[summary]")
    lines.append("quantity\telement\tmean\tvariance\tq_lower\tq_upper\tscale")
    for name, qr in report.quantities.items():
        for e, lab in enumerate(qr.labels):
            lines.append("\t".join([name, lab, _fmt(qr.mean[e]), _fmt(qr.variance[e]),
                                    _fmt(qr.q_lower[e]), _fmt(qr.q_upper[e]), _fmt(qr.scale[e])]))
    lines.append("[histogram]")
    lines.append("quantity\telement\tbin_width\tbin\tcount")
    for name, qr in report.quantities.items():
        for lab, h in zip(qr.labels, qr.histograms):
            w = _fmt(h.bin_width)
            for k, c in zip(h.keys, h.counts):
                lines.append(f"{name}\t{lab}\t{w}\t{int(k)}\t{int(c)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_report(path) -> UqReport:
    meta: dict = {}
    summary: dict = {}
    hist: dict = {}
    section = None
    with open(path) as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("# "):
                parts = line[2:].split("\t", 1)
                if len(parts) == 2:
                    meta[parts[0]] = _parse_meta(parts[0], parts[1])
                continue
            if line.startswith("["):
                section = line.strip("[]")
                continue
            cells = line.split("\t")
            if cells[0] == "quantity":
                continue
            if section == "summary":
                summary.setdefault(cells[0], []).append(
                    (cells[1], *(float(c) for c in cells[2:7])))
            elif section == "histogram":
                hist.setdefault((cells[0], cells[1]), []).append(
                    (float(cells[2]), int(cells[3]), int(cells[4])))
    total = int(meta.get("total", 0))
    quantities = {}
    for name, rows in summary.items():
        labels = [r[0] for r in rows]
        hists = []
        for lab in labels:
            entries = hist.get((name, lab), [])
            width = entries[0][0] if entries else float("nan")
            keys = np.array([e[1] for e in entries], dtype=np.int64)
            counts = np.array([e[2] for e in entries], dtype=np.int64)
            hists.append(Histogram(width, keys, counts, total))
        cols = np.array([r[1:] for r in rows], dtype=float)
        quantities[name] = QuantityReport(labels, hists, cols[:, 0], cols[:, 1], cols[:, 2],
                                          cols[:, 3], cols[:, 4])
    return UqReport(meta, quantities)


def _parse_meta(key, value):
    if key == "random_buses":
        return [int(v) for v in value.split(",")] if value else []
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value
