import numpy as np
import pytest

from spice_uq import ccopf as cc
from spice_uq.netmodel import Branch, Bus, Generator, Load, Network
from spice_uq.pf_core import losses
from spice_uq.stochastic import UncertaintyModel, make_model


def _single_gen():
    buses = [Bus(1, "slack", 0.95, 1.05), Bus(2, "pq", 0.95, 1.05)]
    gens = [Generator(1, 0.5, 1.0, 0.0, 2.0, -1.0, 1.0, cost=(10.0, 5.0, 1.0))]
    return Network(buses, [Branch(1, 2, 0.02, 0.1, s_max=2.0)], gens, [Load(2, 0.5, 0.1)])


def _twin_gens():
    buses = [Bus(1, "slack", 0.95, 1.05), Bus(2, "pv", 0.95, 1.05), Bus(3, "pq", 0.95, 1.05)]
    gens = [Generator(b, 0.4, 1.0, 0.0, 2.0, -1.0, 1.0, cost=(20.0, 10.0, 0.0)) for b in (1, 2)]
    branches = [Branch(1, 3, 0.0, 0.1, s_max=2.0), Branch(2, 3, 0.0, 0.1, s_max=2.0)]
    return Network(buses, branches, gens, [Load(3, 0.8, 0.2)])


def _quantile_set(lim, **over):
    base = dict(v_lower=lim.v_min + 0.01, v_upper=lim.v_max - 0.01, s_upper=lim.s_max * 0.5,
                p_lower=lim.p_min + 0.01, p_upper=lim.p_max - 0.01,
                q_lower=lim.q_min + 0.01, q_upper=lim.q_max - 0.01)
    base.update(over)
    return cc.QuantileSet(**base)


# --- deterministic OPF -------------------------------------------------------------

def test_single_generator_covers_load_and_losses():
    net = _single_gen()
    op = cc.deterministic_opf(net, cc.EffectiveLimits.from_network(net))
    assert op.pg[0] == pytest.approx(0.5 + losses(net, op.state.V), abs=1e-6)
    assert op.cost == pytest.approx(net.generators[0].cost_of(op.pg[0]), rel=1e-12)


def test_twin_generators_share_equally():
    net = _twin_gens()
    op = cc.deterministic_opf(net, cc.EffectiveLimits.from_network(net))
    assert op.pg[0] == pytest.approx(op.pg[1], abs=1e-5)
    assert op.pg.sum() == pytest.approx(0.8, abs=1e-6)


def test_reference_cost_case30(case30):
    op = cc.deterministic_opf(case30, cc.EffectiveLimits.from_network(case30))
    # published optimum of this case is 576.89 $/h
    assert op.cost == pytest.approx(576.89, abs=0.01)


def test_tight_voltage_limit_changes_dispatch(case30):
    lim = cc.EffectiveLimits.from_network(case30)
    op0 = cc.deterministic_opf(case30, lim)
    lim.v_max = np.minimum(lim.v_max, op0.state.vm.max() - 0.02)
    op1 = cc.deterministic_opf(case30, lim)
    assert np.abs(op1.pg - op0.pg).max() > 1e-4 or np.abs(op1.state.vm - op0.state.vm).max() > 1e-4
    assert np.all(op1.state.vm <= lim.v_max + 1e-6) and np.all(op1.state.vm >= lim.v_min - 1e-6)
    assert np.all(op1.pg <= lim.p_max + 1e-6) and np.all(op1.pg >= lim.p_min - 1e-6)
    assert op1.cost >= op0.cost - 1e-6


def test_dispatch_network_reproduces_opf_state(case30):
    from spice_uq.spice_solver import deterministic_pf
    op = cc.deterministic_opf(case30, cc.EffectiveLimits.from_network(case30))
    st = deterministic_pf(op.net)
    np.testing.assert_allclose(st.v_re, op.state.v_re, atol=1e-6)
    np.testing.assert_allclose(st.v_im, op.state.v_im, atol=1e-6)


def test_crossed_limits_infeasible(case9):
    lim = cc.EffectiveLimits.from_network(case9)
    lim.v_min[3] = lim.v_max[3] + 0.01
    with pytest.raises(cc.Infeasible):
        cc.deterministic_opf(case9, lim)


def test_impossible_demand_infeasible():
    net = _single_gen()
    lim = cc.EffectiveLimits.from_network(net)
    lim.p_max[:] = 0.1
    with pytest.raises(cc.Infeasible):
        cc.deterministic_opf(net, lim)


# --- quantiles -------------------------------------------------------------------

def test_quantiles_zero_epsilon(case9):
    lim = cc.EffectiveLimits.from_network(case9)
    op = cc.deterministic_opf(case9, lim)
    Q = cc.evaluate_quantiles(case9, make_model(case9, 3, 0.0), op, 0.05, 200, 1)
    np.testing.assert_allclose(Q.v_lower, op.state.vm, atol=1e-12)
    np.testing.assert_allclose(Q.v_upper, op.state.vm, atol=1e-12)
    np.testing.assert_allclose(Q.p_upper, op.pg, atol=1e-8)


def test_quantile_bracketing_and_median(case9):
    lim = cc.EffectiveLimits.from_network(case9)
    op = cc.deterministic_opf(case9, lim)
    model = make_model(case9, 3, 0.05)
    Q = cc.evaluate_quantiles(case9, model, op, 0.05, 2000, 1)
    assert np.all(Q.v_lower <= Q.median["vm"]) and np.all(Q.median["vm"] <= Q.v_upper)
    assert np.all(Q.p_lower <= Q.median["pg"]) and np.all(Q.median["pg"] <= Q.p_upper)
    # with delta = 0.5 both one-sided quantiles are the nearest-rank median
    from spice_uq.spice_solver import spice
    from spice_uq.stochastic import sample
    from spice_uq.uq_eval import evaluate_pce
    vals = evaluate_pce(spice(op.net, model), sample(model, 2001, 1)).values
    half = cc.quantile_set(vals, 0.5)
    np.testing.assert_array_equal(half.v_upper, np.median(vals["vm"], axis=0))
    np.testing.assert_array_equal(half.v_lower, half.v_upper)


# --- tightening ------------------------------------------------------------------

def test_quantiles_inside_leave_limits(case30):
    lim = cc.EffectiveLimits.from_network(case30)
    new, d = cc.tighten(lim, _quantile_set(lim), lim)
    assert d.max() == 0.0
    for k in lim.__dict__:
        np.testing.assert_array_equal(getattr(new, k), getattr(lim, k))


@pytest.mark.parametrize("field,qname,shift,expect", [
    ("v_max", "v_upper", +0.01, -0.01), ("v_min", "v_lower", -0.01, +0.01),
    ("s_max", "s_upper", +0.05, -0.05),
    ("p_max", "p_upper", +0.02, -0.02), ("p_min", "p_lower", -0.02, +0.02),
    ("q_max", "q_upper", +0.03, -0.03), ("q_min", "q_lower", -0.03, +0.03),
])
def test_tighten_direction_per_class(case30, field, qname, shift, expect):
    orig = cc.EffectiveLimits.from_network(case30)
    base = _quantile_set(orig)
    q = getattr(base, qname).copy()
    q[0] = getattr(orig, field)[0] + shift
    if field == "s_max":
        q[0] = orig.s_max[0] + shift
    setattr(base, qname, q)
    new, _ = cc.tighten(orig, base, orig)
    assert getattr(new, field)[0] - getattr(orig, field)[0] == pytest.approx(expect, abs=1e-12)
    assert new.tighter_or_equal(orig)


def test_tighten_idempotent_at_fixed_point(case30):
    orig = cc.EffectiveLimits.from_network(case30)
    Q = _quantile_set(orig)
    a, _ = cc.tighten(orig, Q, orig)
    b, d = cc.tighten(a, Q, orig)
    assert d.max() == 0.0
    np.testing.assert_array_equal(a.v_max, b.v_max)


def test_tighten_detects_crossing(case30):
    orig = cc.EffectiveLimits.from_network(case30)
    Q = _quantile_set(orig, v_upper=orig.v_max + 0.5)
    with pytest.raises(cc.Infeasible):
        cc.tighten(orig, Q, orig)


# --- outer loop ----------------------------------------------------------------------

def test_zero_epsilon_single_iteration(case9):
    op, cert = cc.solve_cc_opf(case9, make_model(case9, 3, 0.0),
                               cc.CcOpfConfig(samples=200, validation_samples=100))
    assert cert.converged and len(cert.iterations) == 1
    ref = cc.deterministic_opf(case9, cc.EffectiveLimits.from_network(case9))
    assert op.cost == pytest.approx(ref.cost)
    assert all(v == 0.0 for v in cert.validation["rates"].values())


def test_plugin_opf_interface(case9):
    calls = []

    def opf(net, limits):
        calls.append(limits)
        return cc.deterministic_opf(net, limits)

    cc.solve_cc_opf(case9, make_model(case9, 3, 0.0), cc.CcOpfConfig(samples=100,
                                                                       validation_samples=0),
                    opf=opf)
    assert len(calls) == 1


def test_certificate_file(tmp_path, case9):
    _, cert = cc.solve_cc_opf(case9, make_model(case9, 3, 0.01),
                              cc.CcOpfConfig(samples=500, validation_samples=500))
    cc.write_certificate(cert, tmp_path / "c.tsv")
    text = (tmp_path / "c.tsv").read_text()
    assert "[iterations]" in text and "[validation]" in text
    assert text.count("\n") > len(cert.iterations) + 5
    for a, b in zip(cert.limits_history, cert.limits_history[1:]):
        assert b.tighter_or_equal(a)


def test_config_validation():
    with pytest.raises(ValueError):
        cc.CcOpfConfig(delta=0.6)
