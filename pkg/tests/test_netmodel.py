import numpy as np
import pytest

from spice_uq.netmodel import (Branch, Bus, CaseError, Generator, Load, Network, build_admittance,
                               from_dict, parse_case, to_dict, to_json)

THREE_BUS = """
function mpc = three_bus
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;
\t2\t1\t50\t10\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;
\t3\t1\t40\t5\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t90\t0\t100\t-100\t1.02\t100\t1\t200\t0;
];
mpc.branch = [
\t1\t2\t0.01\t0.1\t0.02\t150\t0\t0\t0\t0\t1\t-360\t360;
\t2\t3\t0.01\t0.1\t0.02\t150\t0\t0\t0\t0\t1\t-360\t360;
\t1\t3\t0.01\t0.1\t0.02\t150\t0\t0\t0\t0\t1\t-360\t360;
];
mpc.gencost = [
\t2\t0\t0\t3\t0.01\t20\t0;
];
"""


def test_parse_three_bus():
    net = parse_case(THREE_BUS, "three")
    assert net.n_bus == 3 and net.n_branch == 3
    assert [b.kind for b in net.buses] == ["slack", "pq", "pq"]
    assert len(net.loads) == 2
    assert net.loads[0].p_nom == pytest.approx(0.5)
    assert net.branches[0].s_max == pytest.approx(1.5)
    g = net.generators[0]
    assert g.p_nom == pytest.approx(0.9) and g.v_nom == pytest.approx(1.02)
    # cost converted to per-unit output: 0.01 MW^-2 -> 100 pu^-2
    assert g.cost_of(0.9) == pytest.approx(0.01 * 90 ** 2 + 20 * 90)


def test_two_slack_buses_rejected():
    text = THREE_BUS.replace("\t2\t1\t50", "\t2\t3\t50")
    with pytest.raises(CaseError, match="multiple slack buses"):
        parse_case(text)


def test_no_slack_rejected():
    text = THREE_BUS.replace("\t1\t3\t0\t0", "\t1\t1\t0\t0")
    with pytest.raises(CaseError, match="no slack bus"):
        parse_case(text)


def test_missing_bus_reference():
    text = THREE_BUS.replace("\t2\t3\t0.01", "\t2\t7\t0.01")
    with pytest.raises(CaseError):
        parse_case(text)


def test_syntax_error_reports_line():
    text = THREE_BUS.replace("\t3\t1\t40", "\t3\t1\tforty")
    with pytest.raises(CaseError, match="line"):
        parse_case(text)


def test_out_of_service_branch_dropped():
    text = THREE_BUS.replace("0\t0\t0\t0\t1\t-360\t360;\n];\nmpc.gencost",
                             "0\t0\t0\t0\t0\t-360\t360;\n];\nmpc.gencost")
    assert parse_case(text).n_branch == 2


def test_disconnected_network_rejected():
    buses = [Bus(1, "slack", 0.9, 1.1), Bus(2, "pq", 0.9, 1.1)]
    with pytest.raises(CaseError):
        Network(buses, [], [], [])


def test_bundled_cases(case9, case30, case118):
    assert (case9.n_bus, len(case9.loads)) == (9, 3)
    assert (case30.n_bus, len(case30.loads)) == (30, 20)
    assert (case118.n_bus, case118.n_branch) == (118, 186)


def test_single_reactance_admittance():
    net = Network([Bus(1, "slack", 0.9, 1.1), Bus(2, "pq", 0.9, 1.1)],
                  [Branch(1, 2, 0.0, 0.1)], [], [])
    adm = build_admittance(net)
    np.testing.assert_allclose(adm.B.toarray(), [[-10, 10], [10, -10]], atol=1e-12)
    np.testing.assert_allclose(adm.G.toarray(), 0.0, atol=1e-12)


def test_single_bus_admittance():
    net = Network([Bus(1, "slack", 0.9, 1.1)], [], [], [])
    adm = build_admittance(net)
    assert adm.G.toarray().tolist() == [[0.0]] and adm.B.toarray().tolist() == [[0.0]]


def test_unit_tap_matches_tap_free():
    base = [Bus(1, "slack", 0.9, 1.1), Bus(2, "pq", 0.9, 1.1)]
    a = build_admittance(Network(base, [Branch(1, 2, 0.02, 0.2, 0.05)], [], [])).Y.toarray()
    b = build_admittance(Network(base, [Branch(1, 2, 0.02, 0.2, 0.05, tap=1.0, shift=0.0)],
                                 [], [])).Y.toarray()
    np.testing.assert_array_equal(a, b)
    y = 1 / complex(0.02, 0.2)
    np.testing.assert_allclose(a, [[y + 0.025j, -y], [-y, y + 0.025j]], atol=1e-14)


def test_off_nominal_tap_is_asymmetric():
    base = [Bus(1, "slack", 0.9, 1.1), Bus(2, "pq", 0.9, 1.1)]
    Y = build_admittance(Network(base, [Branch(1, 2, 0.0, 0.2, tap=0.95, shift=5.0)],
                                 [], [])).Y.toarray()
    assert abs(Y[0, 1] - Y[1, 0]) > 1e-3


def test_lossless_row_sums_zero(case30):
    branches = [Branch(b.from_bus, b.to_bus, 0.0, b.x) for b in case30.branches]
    buses = [Bus(b.id, b.kind, b.v_min, b.v_max) for b in case30.buses]
    net = case30.replace(branches=branches, buses=buses)
    Y = build_admittance(net).Y
    assert np.abs(np.asarray(Y.sum(axis=1))).max() < 1e-12


def test_sparsity_pattern_is_adjacency(case9):
    Y = build_admittance(case9).Y.toarray()
    f, t = case9.branch_ends()
    want = np.eye(case9.n_bus, dtype=bool)
    want[f, t] = want[t, f] = True
    np.testing.assert_array_equal(np.abs(Y) > 0, want)


def test_json_round_trip(case30):
    again = parse_case(to_json(case30), case30.name)
    assert to_dict(again) == to_dict(case30)
    assert again.digest() == case30.digest()


def test_json_case_modification(case9):
    data = to_dict(case9)
    data["generators"][0]["q_max"] = 99.0
    assert from_dict(data).generators[0].q_max == 99.0


def test_loads_only_for_nonzero_demand(case118):
    assert len(case118.loads) == 99
    assert all(ld.p_nom != 0 or ld.q_nom != 0 for ld in case118.loads)
