import math

import numpy as np
import pytest

from conftest import two_bus
from spice_uq.pce_basis import make_basis
from spice_uq.pf_core import make_spec, solve_pf
from spice_uq.spice_solver import (PceCoefficients, SpiceConfig, VARIABLES, assemble_residual_deg2,
                                   build_mask, deterministic_pf, galerkin_residual,
                                   overload_injections, recourse_sensitivity, solve_degree1,
                                   solve_degree2, solve_full_pce, spice)
from spice_uq.stochastic import UncertaintyModel, inject, make_model, nominal_injections, sample
from spice_uq.uq_eval import evaluate_pce

LEG = "legendre_normalized"


def _setup(net, n, eps, dist="normalized_uniform"):
    model = make_model(net, n, eps, dist)
    fam = LEG if dist == "normalized_uniform" else "hermite_probabilists_normalized"
    return model, make_basis(n, 2, fam)


def _fd_matrix(fun, x, h=1e-6):
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.array(cols).T


# --- injections ------------------------------------------------------------

def test_zero_epsilon_injections(case30):
    model, basis = _setup(case30, 3, 0.0)
    p, q = overload_injections(case30, model, basis)
    assert not p[:, 1:].any() and not q[:, 1:].any()
    p0, q0 = nominal_injections(case30)
    np.testing.assert_array_equal(p[:, 0], p0)


def test_single_load_injection_coefficient():
    net = two_bus(1.0, 0.0)
    model = UncertaintyModel(1, (0,), 0.03)
    p, _ = overload_injections(net, model, make_basis(1, 2, LEG))
    assert p[1, 1] == pytest.approx(-0.03, abs=1e-15)
    assert not p[:, 2].any()


def test_two_generator_injection_share():
    net = two_bus(2.0, 0.0, n_gen=2)
    model = UncertaintyModel(1, (0,), 0.03)
    np.testing.assert_allclose(recourse_sensitivity(net, model)[:, 0], [0.03, 0.03], atol=1e-15)
    coeffs = spice(net, model, SpiceConfig(c_off=0.0))
    # lossless line: each generator's first-order output is its recourse share
    np.testing.assert_allclose(coeffs.gen_p[:, 1], [0.03, 0.03], atol=1e-12)


def test_family_mismatch_rejected(case9):
    model, _ = _setup(case9, 2, 0.01)
    with pytest.raises(ValueError):
        overload_injections(case9, model, make_basis(2, 2, "hermite_probabilists_normalized"))


def test_injection_coefficients_scale_with_epsilon(case30):
    m1, basis = _setup(case30, 3, 0.01)
    p1, q1 = overload_injections(case30, m1, basis)
    p2, q2 = overload_injections(case30, m1.with_epsilon(0.02), basis)
    np.testing.assert_array_equal(p2[:, 1:4], 2 * p1[:, 1:4])
    np.testing.assert_array_equal(q2[:, 1:4], 2 * q1[:, 1:4])


# --- degree 1 -----------------------------------------------------------------

def test_degree1_zero_epsilon(case9):
    model, basis = _setup(case9, 3, 0.0)
    det = deterministic_pf(case9)
    d1 = solve_degree1(case9, model, basis, det)
    assert np.abs(d1.v_re[:, 1:]).max() <= 1e-12 and np.abs(d1.v_im[:, 1:]).max() <= 1e-12
    np.testing.assert_allclose(d1.v_re[:, 0], det.v_re, atol=1e-12)


def test_degree1_matches_finite_difference():
    net = two_bus(1.0, 0.2)
    model = UncertaintyModel(1, (0,), 0.05)
    d1 = solve_degree1(net, model, make_basis(1, 2, LEG), deterministic_pf(net))
    h = 1e-4

    def pf(x):
        p, q = inject(net, model, np.array([x]))
        return solve_pf(make_spec(net, p, q), tol=1e-13)

    up, dn = pf(h), pf(-h)
    fd_r = (up.v_re - dn.v_re) / (2 * h)
    fd_i = (up.v_im - dn.v_im) / (2 * h)
    np.testing.assert_allclose(d1.v_re[1, 1], fd_r[1], rtol=1e-4)
    np.testing.assert_allclose(d1.v_im[1, 1], fd_i[1], rtol=1e-4)


# --- mask --------------------------------------------------------------------

def _fake_deg1(x1):
    n = len(x1)
    b1 = make_basis(n, 1, LEG)
    row = np.concatenate([[1.0], x1])[None, :]
    z = np.zeros_like(row)
    return PceCoefficients(b1, row, z, z, z, z, z)


def test_mask_example_thresholds():
    d1 = _fake_deg1([1.0, 1e-9, 1.0])
    basis = make_basis(3, 2, LEG)
    pairs = basis.index_set.pair_index()
    keep = build_mask(d1, 1e-10, basis).keep["v_re"][0]
    pos = {k: i for i, k in enumerate(sorted(pairs.values()))}
    # |1e-9 * 1| < 1e-10 * 1 is false: kept
    assert keep[pos[pairs[(0, 1)]]] and keep[pos[pairs[(1, 2)]]]
    keep = build_mask(d1, 1e-8, basis).keep["v_re"][0]
    assert not keep[pos[pairs[(0, 1)]]] and not keep[pos[pairs[(1, 2)]]]
    assert not keep[pos[pairs[(1, 1)]]]
    assert keep[pos[pairs[(0, 2)]]] and keep[pos[pairs[(0, 0)]]]


def test_mask_extremes(case9):
    model, basis = _setup(case9, 3, 0.01)
    d1 = solve_degree1(case9, model, basis, deterministic_pf(case9))
    assert build_mask(d1, 0.0, basis).fraction == 0.0
    assert build_mask(d1, 1e300, basis).fraction == 1.0


def test_sparsity_monotone_in_cutoff(case30):
    model, basis = _setup(case30, 3, 0.01)
    d1 = solve_degree1(case30, model, basis, deterministic_pf(case30))
    fr = [build_mask(d1, c, basis).fraction for c in (0, 1e-14, 1e-12, 1e-10, 1e-8, 1e-6, 1e-3, 1)]
    assert all(a <= b for a, b in zip(fr, fr[1:]))


# --- degree 2 -----------------------------------------------------------------

def test_term_counts_ten_areas():
    basis = make_basis(10, 2, LEG)
    net = two_bus()
    model = UncertaintyModel(10, (0,), 0.01)
    inj = overload_injections(net, model, basis)
    full = assemble_residual_deg2(net, basis, inj, None, False).term_counts()
    trunc = assemble_residual_deg2(net, basis, inj, None, True).term_counts()
    assert full["full"] == 4356
    assert trunc["assembled"] == 2 * 11 * 66 - 11 ** 2 == 1331


def test_full_solution_zeroes_untruncated_residual(case9):
    model, basis = _setup(case9, 2, 0.01)
    full = solve_full_pce(case9, model, basis)
    problem = assemble_residual_deg2(case9, basis, overload_injections(case9, model, basis),
                                     None, False)
    x = problem.restrict(np.concatenate([full.v_re.ravel(), full.v_im.ravel()]))
    assert np.abs(problem.residual(x)).max() <= 1e-8


def test_deterministic_start_zero_epsilon(case9):
    model, basis = _setup(case9, 2, 0.0)
    det = deterministic_pf(case9)
    problem = assemble_residual_deg2(case9, basis, overload_injections(case9, model, basis),
                                     None, True)
    z = np.zeros((2, 9, basis.K))
    z[0, :, 0], z[1, :, 0] = det.v_re, det.v_im
    assert np.abs(problem.residual(problem.restrict(z.ravel()))).max() <= 1e-8


def test_degree2_zero_epsilon_keeps_warm_start(case9):
    model, basis = _setup(case9, 2, 0.0)
    d1 = solve_degree1(case9, model, basis, deterministic_pf(case9))
    problem = assemble_residual_deg2(case9, basis, overload_injections(case9, model, basis),
                                     build_mask(d1, 1e-10, basis), True)
    out = solve_degree2(problem, d1, model)
    assert out.diagnostics["least_squares"]["objective"] <= 1e-20
    np.testing.assert_allclose(out.v_re[:, :d1.K], d1.v_re, atol=1e-12)
    assert not out.v_re[:, d1.K:].any()


def test_degree2_untruncated_objective_and_monotone(case9):
    model, basis = _setup(case9, 2, 0.05)
    d1 = solve_degree1(case9, model, basis, deterministic_pf(case9))
    problem = assemble_residual_deg2(case9, basis, overload_injections(case9, model, basis),
                                     build_mask(d1, 0.0, basis), False)
    out = solve_degree2(problem, d1, model)
    info = out.diagnostics["least_squares"]
    assert info["objective"] <= 1e-12
    assert all(b <= a for a, b in zip(info["history"], info["history"][1:]))


@pytest.mark.parametrize("truncate,c_off", [(False, 0.0), (True, 1e-10), (True, 1e-3)])
def test_degree2_jacobian_finite_difference(case9, truncate, c_off, rng):
    model, basis = _setup(case9, 2, 0.02)
    d1 = solve_degree1(case9, model, basis, deterministic_pf(case9))
    problem = assemble_residual_deg2(case9, basis, overload_injections(case9, model, basis),
                                     build_mask(d1, c_off, basis), truncate)
    x = 0.3 * rng.standard_normal(problem.n_unknowns) + 0.5
    J = problem.jacobian(x).toarray()
    Jfd = _fd_matrix(problem.residual, x)
    assert np.abs(J - Jfd).max() / np.abs(J).max() <= 1e-6


# --- full driver --------------------------------------------------------------

def test_spice_matches_full_pce(case9):
    model, basis = _setup(case9, 2, 0.01)
    full = solve_full_pce(case9, model, basis)
    sp_ = spice(case9, model, SpiceConfig(c_off=0.0, truncate_quartic=False), basis)
    for var in PceCoefficients.VARIABLES:
        np.testing.assert_allclose(sp_.variable(var), full.variable(var), atol=1e-6, rtol=0)


def test_spice_stage_one_is_deterministic_pf(case30):
    model, _ = _setup(case30, 3, 0.01)
    out = spice(case30, model)
    det = solve_pf(make_spec(case30, *nominal_injections(case30)))
    np.testing.assert_array_equal(out.diagnostics["deterministic"].v_re, det.v_re)
    np.testing.assert_array_equal(out.diagnostics["deterministic"].v_im, det.v_im)


@pytest.mark.parametrize("name,baseline", [("case9", 3.5e-11), ("case30", 1e-12)])
def test_spice_diagnostics_and_galerkin_baseline(name, baseline):
    from conftest import load_case
    net = load_case(name)
    model, _ = _setup(net, 3, 0.01)
    out = spice(net, model)
    d = out.diagnostics
    assert d["sparsity"] > 0
    assert set(d["times"]) >= {"deterministic", "degree1", "mask", "degree2"}
    assert d["galerkin_residual_inf"] == pytest.approx(galerkin_residual(out, model))
    # regression against the value recorded when this suite was written (10x headroom)
    assert d["galerkin_residual_inf"] <= 10 * baseline


def test_masked_entries_exactly_zero(case30):
    model, _ = _setup(case30, 3, 0.01)
    out = spice(case30, model)
    for var in VARIABLES:
        keep = out.mask.full(var, out.K)
        assert not out.variable(var)[~keep].any()
    assert out.mask.fraction > 0


def test_zero_epsilon_collapse(case30):
    model, _ = _setup(case30, 3, 0.0)
    out = spice(case30, model)
    det = deterministic_pf(case30)
    for var in ("v_re", "v_im", "p", "q", "gen_p", "gen_q"):
        assert np.abs(out.variable(var)[:, 1:]).max() <= 1e-8
    np.testing.assert_allclose(out.v_re[:, 0], det.v_re, atol=1e-8)


def test_degree_one_config(case9):
    model, _ = _setup(case9, 3, 0.01)
    out = spice(case9, model, SpiceConfig(degree=1))
    assert out.K == 4 and out.degree == 1


def test_mean_consistency(case9):
    model, basis = _setup(case9, 3, 0.02)
    out = spice(case9, model)
    vals = evaluate_pce(out, sample(model, 20000, 8))
    for name, var in (("v_re", "v_re"), ("p", "p")):
        x = vals.values[name]
        se = x.std(axis=0) / math.sqrt(x.shape[0])
        dev = np.abs(x.mean(axis=0) - out.X0(var))
        assert np.all(dev <= 4 * se + 1e-13)


def test_gaussian_family(case9):
    model, basis = _setup(case9, 2, 0.01, "normalized_gaussian")
    out = spice(case9, model)
    assert out.basis.family == "hermite_probabilists_normalized"
    full = solve_full_pce(case9, model, basis)
    np.testing.assert_allclose(out.v_re, full.v_re, atol=1e-6)
