import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridpulse.grid import (FaultScenario, FaultType, GridError, PowerFlowError, build_ybus,
                            dumps, fault_shunt, kron_reduce, loads, shunt_admittance,
                            solve_power_flow, stage_admittances, stage_networks)
from gridpulse.grid.network import augmented_ybus

from oracles import polar_mismatch, ybus_incidence

TWO_BUS = """gridmodel-v1 base_mva=100 frequency=60
[buses]
1,slack,0,0,0,0
2,PQ,0,0,0,0
[branches]
1,1,2,0,0.1,0,1,3
[generators]
1,0,1.0,5,0.2,0
"""


def two_bus():
    return loads(TWO_BUS)


# -- data file ------------------------------------------------------------------

def test_bundled_system_dimensions(grid39):
    assert (grid39.n_bus, len(grid39.branches), grid39.n_gen) == (39, 46, 10)
    assert grid39.buses[grid39.slack_index].id == 31
    assert [g.bus for g in grid39.generators] == list(range(30, 40))
    assert grid39.frequency == 60 and grid39.base_mva == 100


def test_dump_and_reload_is_identical(grid39):
    again = loads(dumps(grid39), name=grid39.name)
    assert again == grid39
    assert dumps(again) == dumps(grid39)


@pytest.mark.parametrize("text, message", [
    (TWO_BUS.replace("gridmodel-v1", "gridmodel-v0"), "tag"),
    (TWO_BUS.replace("2,PQ", "2,slack"), "exactly one slack"),
    (TWO_BUS.replace("1,1,2,0,0.1", "1,1,3,0,0.1"), "unknown bus"),
    (TWO_BUS.replace("0,0.1,0,1,3", "0,0,0,1,3"), "zero series impedance"),
    (TWO_BUS.replace("1,0,1.0,5,0.2,0", "7,0,1.0,5,0.2,0"), "unknown bus"),
    (TWO_BUS.replace("1,0,1.0,5,0.2,0", "1,0,1.0,0,0.2,0"), "positive H"),
    (TWO_BUS.replace("[branches]\n1,1,2,0,0.1,0,1,3\n", "[branches]\n"), "not connected"),
    (TWO_BUS.replace("1,1,2,0,0.1,0,1,3", "1,1,2,0,0.1,0,1"), "columns"),
    (TWO_BUS.replace("0,0.1,0", "0,abc,0"), "unparseable"),
])
def test_invalid_grid_files_are_rejected(text, message):
    with pytest.raises(GridError, match=message):
        loads(text)


def test_removable_branches_never_island(grid39):
    removable = grid39.removable_branches()
    assert len(removable) == 35
    for br in removable:
        assert len(grid39.islands([br])) == 1
    degree = {}
    for br in grid39.branches:
        for end in (br.from_bus, br.to_bus):
            degree[end] = degree.get(end, 0) + 1
    radial = {br.id for br in grid39.branches if 1 in (degree[br.from_bus], degree[br.to_bus])}
    assert radial and not set(removable) & radial



def test_split_branch_conserves_series_impedance(grid39):
    br = grid39.branch(4)
    split, node = grid39.split_branch(4, 0.3)
    assert split.n_bus == grid39.n_bus + 1
    halves = [b for b in split.branches if node in (b.from_bus, b.to_bus)]
    assert len(halves) == 2
    assert sum(h.z for h in halves) == pytest.approx(br.z, rel=1e-12)
    assert sum(h.b for h in halves) == pytest.approx(br.b, rel=1e-12)
    assert split.split_branch(4, 0.0)[1] == br.from_bus
    assert grid39.split_branch(4, 1.0)[1] == br.to_bus


# -- admittance matrices --------------------------------------------------------------

def test_single_branch_admittance():
    Y = build_ybus(two_bus())
    np.testing.assert_allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-12)


def test_shunt_adds_to_diagonal_only():
    Y = build_ybus(two_bus(), shunts={1: 0.05j})
    np.testing.assert_allclose(Y, [[-10j + 0.05j, 10j], [10j, -10j]], atol=1e-12)


def test_ybus_matches_incidence_assembly(grid39):
    Y = build_ybus(grid39)
    ref = ybus_incidence(grid39)
    assert Y.shape == (39, 39)
    np.testing.assert_allclose(Y, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(Y, Y.T, rtol=1e-12, atol=1e-12)


def test_row_sums_are_shunt_totals_without_taps(grid39):
    flat = dataclasses.replace(
        grid39, branches=[dataclasses.replace(b, tap=1.0) for b in grid39.branches])
    Y = build_ybus(flat)
    shunt = np.array([complex(b.gs, b.bs) for b in flat.buses])
    for br in flat.branches:
        for end in (br.from_bus, br.to_bus):
            shunt[flat.bus_index(end)] += 0.5j * br.b
    np.testing.assert_allclose(Y.sum(axis=1), shunt, atol=1e-9)


def test_ybus_edit_errors(grid39):
    with pytest.raises(GridError, match="unknown branch"):
        build_ybus(grid39, removed=[999])
    with pytest.raises(GridError, match="disconnects"):
        build_ybus(grid39, removed=[5])


def test_removing_then_readding_a_branch_restores_the_matrix(grid39):
    br = grid39.branch(12)
    pre = build_ybus(grid39)
    post = build_ybus(grid39, removed=[12])
    f, t = grid39.bus_index(br.from_bus), grid39.bus_index(br.to_bus)
    y, a = 1 / br.z, br.tap
    post[f, f] += (y + 0.5j * br.b) / a**2
    post[t, t] += y + 0.5j * br.b
    post[f, t] -= y / a
    post[t, f] -= y / a
    np.testing.assert_allclose(post, pre, atol=1e-12)


# -- power flow -------------------------------------------------------------------------

def test_no_load_flat_start_is_the_solution():
    op = solve_power_flow(two_bus())
    np.testing.assert_allclose(op.va, 0.0, atol=1e-14)
    np.testing.assert_allclose(op.vm, 1.0, atol=1e-14)
    np.testing.assert_allclose(op.p_gen, 0.0, atol=1e-14)
    assert op.iterations == 0


@pytest.mark.parametrize("scale", [0.7, 1.0, 1.4])
def test_power_flow_residual_by_independent_evaluator(grid39, scale):
    op = solve_power_flow(grid39, scale)
    model = op.model
    Y = ybus_incidence(model)
    p = np.array([-b.pd for b in model.buses])
    q = np.array([-b.qd for b in model.buses])
    for k, g in enumerate(model.generators):
        i = model.bus_index(g.bus)
        p[i] += op.p_gen[k]
        q[i] += op.q_gen[k]
    dp, dq = polar_mismatch(Y, op.v, p, q)
    assert max(np.abs(dp).max(), np.abs(dq).max()) < 1e-8
    assert op.mismatch < 1e-8 and op.vm.shape == (39,)


def test_slack_output_closes_the_power_balance(grid39, op39):
    Y = build_ybus(grid39)
    s_inj = op39.v * np.conj(Y @ op39.v)
    losses = s_inj.real.sum()
    load = sum(b.pd for b in grid39.buses)
    slack = op39.p_gen[grid39.generators.index(
        next(g for g in grid39.generators if g.bus == 31))]
    others = op39.p_gen.sum() - slack
    assert slack == pytest.approx(load + losses - others, abs=1e-8)


def test_power_flow_guards(grid39):
    with pytest.raises(ValueError):
        solve_power_flow(grid39, 0.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        solve_power_flow(grid39, 0.45)
    assert any("outside the validated range" in str(w.message) for w in caught)
    with pytest.raises(PowerFlowError) as info:
        solve_power_flow(grid39, 1.0, max_iter=1)
    assert info.value.mismatch > 1e-8


def test_mechanical_power_balances_initial_electrical_power(grid39, op39):
    from gridpulse.transim import electrical_power
    pre = kron_reduce(augmented_ybus(grid39, op39), range(39, 49))
    pe = electrical_power(op39.emf, op39.delta0, pre)
    np.testing.assert_allclose(pe, op39.p_mech, atol=1e-9)


# -- fault shunts ------------------------------------------------------------------------

def test_fault_shunt_rules():
    assert fault_shunt("3pg", 0.1j, 0.3j) == 0
    assert fault_shunt("slg", 0.1j, 0.3j) == pytest.approx(0.4j)
    assert fault_shunt("ll", 0.1j, 0.3j, 0.01) == pytest.approx(0.01 + 0.1j)
    assert fault_shunt("llg", 0.1j, 0.3j) == pytest.approx(0.075j, abs=1e-15)
    with pytest.raises(ValueError, match="parallel"):
        fault_shunt("llg", 0.1j, -0.1j)
    with pytest.raises(ValueError, match="unknown fault type"):
        fault_shunt("4pg", 0.1j, 0.1j)


def test_bolted_shunt_is_large_finite_admittance():
    assert shunt_admittance(0j) == 1e6
    assert shunt_admittance(0.5j) == pytest.approx(-2j)


@pytest.mark.parametrize("branch, location", [(4, 0.5), (12, 0.2), (30, 0.9)])
def test_fault_severity_ordering_on_shipped_system(grid39, op39, branch, location):
    mag = {}
    for ft in FaultType:
        sc = FaultScenario(ft, branch, location, 1.0, 0.1)
        mag[ft] = abs(stage_admittances(grid39, op39, sc)["fault_admittance"])
    assert mag[FaultType.THREE_PHASE] >= mag[FaultType.LINE_LINE_GROUND] >= mag[FaultType.LINE_LINE]
    assert mag[FaultType.LINE_LINE_GROUND] >= mag[FaultType.SINGLE_LINE_GROUND]


@given(st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False),
       st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False))
def test_llg_is_parallel_combination(z2, z0):
    if abs(z2 + z0) < 1e-6:
        return
    z = fault_shunt("llg", z2, z0)
    assert abs(1 / z - (1 / z2 + 1 / z0)) <= 1e-9 * abs(1 / z) if z2 and z0 and z else True


# -- Kron reduction ------------------------------------------------------------------------

def test_keep_everything_is_identity(rng):
    A = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    red = kron_reduce(A, range(4))
    np.testing.assert_array_equal(red.matrix, A)


def test_star_to_delta():
    y = 3.0 - 4.0j
    Y = np.zeros((4, 4), complex)
    for leaf in range(3):
        Y[leaf, leaf] += y
        Y[3, 3] += y
        Y[leaf, 3] -= y
        Y[3, leaf] -= y
    red = kron_reduce(Y, [0, 1, 2]).matrix
    for i in range(3):
        assert red[i, i] == pytest.approx(2 * y / 3)
        for j in range(3):
            if i != j:
                assert red[i, j] == pytest.approx(-y / 3)


def test_prefault_reduction_matches_dense_solve(grid39, op39):
    Ya = augmented_ybus(grid39, op39)
    keep = list(range(39, 49))
    red = kron_reduce(Ya, keep)
    assert red.matrix.shape == (10, 10)
    np.testing.assert_allclose(red.matrix, red.matrix.T, rtol=1e-12, atol=1e-12)
    # oracle: impedance matrix of the kept nodes inverted back
    Z = np.linalg.inv(Ya)[np.ix_(keep, keep)]
    np.testing.assert_allclose(red.matrix, np.linalg.inv(Z), rtol=1e-8, atol=1e-8)


@given(st.integers(0, 2**32 - 1))
def test_reduction_preserves_terminal_behaviour(seed):
    from gridpulse.grid import ieee39
    model = _cached()[0]
    op = _cached()[1]
    Ya = augmented_ybus(model, op)
    keep = list(range(39, 49))
    red = kron_reduce(Ya, keep)
    r = np.random.default_rng(seed)
    inj = r.normal(size=10) + 1j * r.normal(size=10)
    full = np.zeros(49, complex)
    full[keep] = inj
    v_full = np.linalg.solve(Ya, full)
    v_red = np.linalg.solve(red.matrix, inj)
    np.testing.assert_allclose(v_red, v_full[keep], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(red.node_voltages(v_red, range(39)), v_full[:39],
                               rtol=1e-9, atol=1e-12)
    del ieee39


_CACHE = []


def _cached():
    if not _CACHE:
        from gridpulse.grid import ieee39
        m = ieee39()
        _CACHE.extend([m, solve_power_flow(m)])
    return _CACHE


def test_singular_block_names_floating_nodes():
    Y = np.zeros((3, 3), complex)
    Y[0, 0] = Y[1, 1] = 1.0
    Y[0, 1] = Y[1, 0] = -1.0
    with pytest.raises(GridError, match=r"\[2\]"):
        kron_reduce(Y, [0])


# -- stage networks ------------------------------------------------------------------------

def test_stage_networks_are_symmetric_generator_matrices(grid39, op39):
    sc = FaultScenario(FaultType.SINGLE_LINE_GROUND, 4, 0.5, 1.0, 0.1)
    for net in stage_networks(grid39, op39, sc):
        assert net.matrix.shape == (10, 10)
        np.testing.assert_allclose(net.matrix, net.matrix.T, rtol=1e-10, atol=1e-10)


def test_location_zero_attaches_at_from_bus(grid39, op39):
    sc = FaultScenario(FaultType.THREE_PHASE, 4, 0.0, 1.0, 0.1)
    st_ = stage_admittances(grid39, op39, sc)
    assert st_["split_model"].n_bus == grid39.n_bus
    assert st_["fault_node"] == grid39.bus_index(grid39.branch(4).from_bus)


def test_fault_types_differ_only_at_the_fault_node(grid39, op39):
    a = stage_admittances(grid39, op39, FaultScenario(FaultType.THREE_PHASE, 12, 0.4, 1.0, 0.1))
    b = stage_admittances(grid39, op39,
                          FaultScenario(FaultType.SINGLE_LINE_GROUND, 12, 0.4, 1.0, 0.1))
    diff = np.abs(a["faulton"] - b["faulton"]) > 0
    k = a["fault_node"]
    assert diff[k, k] and diff.sum() == 1


def test_postfault_network_drops_the_faulted_line(grid39, op39):
    sc = FaultScenario(FaultType.LINE_LINE, 12, 0.4, 1.0, 0.1)
    st_ = stage_admittances(grid39, op39, sc)
    np.testing.assert_allclose(st_["postfault"], augmented_ybus(grid39, op39, removed=[12]))
    np.testing.assert_allclose(st_["prefault"], augmented_ybus(grid39, op39))


def test_islanding_outage_is_reported(grid39, op39):
    with pytest.raises(GridError, match="islands"):
        stage_networks(grid39, op39, FaultScenario(FaultType.THREE_PHASE, 5, 0.5, 1.0, 0.1))
