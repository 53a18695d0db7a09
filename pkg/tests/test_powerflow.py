import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import triangle, two_bus
from gridnp import kernels
from gridnp.grid_model import Branch, Bus, Generator, NetworkCase, base_topology, build_admittance, load_case
from gridnp.powerflow import (
    InjectionVector, NewtonSolver, PowerFlowSolution, SolverOptions, branch_flows, jacobian,
    mismatch, nominal_injection, solve_newton,
)

pypower = pytest.importorskip("pypower.api")


def _state(vm, va):
    return PowerFlowSolution(np.asarray(vm, float), np.asarray(va, float), False, 0, np.inf)


def _pypower_case9():
    res, ok = pypower.runpf(pypower.case9(), pypower.ppoption(VERBOSE=0, OUT_ALL=0))
    assert ok
    return res["bus"][:, 7], np.deg2rad(res["bus"][:, 8])


# --------------------------------------------------------------------- mismatch

def test_flat_state_zero_injection_residual_is_exactly_zero():
    case = two_bus()
    y = build_admittance(case, base_topology(case))
    r = mismatch(case, y, _state([1, 1], [0, 0]), InjectionVector(np.zeros(2), np.zeros(2)))
    assert np.all(r == 0.0)


def test_two_bus_line_flow_residual():
    case = two_bus()
    y = build_admittance(case, base_topology(case))
    p_sched = -0.3
    inj = InjectionVector(np.array([0.0, p_sched]), np.zeros(2))
    r = mismatch(case, y, _state([1, 1], [0, -0.1]), inj)
    assert r[0] == pytest.approx(-np.sin(0.1) / 0.1 - p_sched, abs=1e-12)


def test_converged_case9_residual(case9):
    topo = base_topology(case9)
    sol = solve_newton(case9, topo)
    r = mismatch(case9, build_admittance(case9, topo), sol, nominal_injection(case9))
    assert np.max(np.abs(r)) < 1e-8


# --------------------------------------------------------------------- jacobian

def _fd_jacobian(case, ybus, vm, va, inj, h=1e-6):
    s = NewtonSolver(case, ybus)
    cols = [(0, k) for k in s.pvpq] + [(1, k) for k in s.pq]
    out = np.empty((s.dim, len(cols)))
    for j, (which, k) in enumerate(cols):
        up, dn = [vm.copy(), va.copy()], [vm.copy(), va.copy()]
        idx = 1 if which == 0 else 0
        up[idx][k] += h
        dn[idx][k] -= h
        out[:, j] = (s.residual(up[0], up[1], inj) - s.residual(dn[0], dn[1], inj)) / (2 * h)
    return out


def _assert_fd_close(j, fd):
    err = np.abs(j - fd) / np.maximum(np.abs(j), 1.0)
    assert err.max() < 1e-5


def test_jacobian_matches_finite_differences_case9(case9, rng):
    ybus = build_admittance(case9, base_topology(case9))
    inj = nominal_injection(case9)
    for _ in range(5):
        vm = rng.uniform(0.9, 1.1, case9.n_bus)
        va = rng.uniform(-0.3, 0.3, case9.n_bus)
        j = jacobian(case9, ybus, _state(vm, va), inj)
        _assert_fd_close(j, _fd_jacobian(case9, ybus, vm, va, inj))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_jacobian_fd_property_random_states(seed):
    case = load_case("case9")
    r = np.random.default_rng(seed)
    ybus = build_admittance(case, base_topology(case))
    vm = r.uniform(0.85, 1.15, case.n_bus)
    va = r.uniform(-0.5, 0.5, case.n_bus)
    inj = nominal_injection(case)
    _assert_fd_close(jacobian(case, ybus, _state(vm, va), inj), _fd_jacobian(case, ybus, vm, va, inj))


def test_two_bus_jacobian_at_flat_start():
    # P2 = sin(theta2) / x, so dP2/dtheta2 = +1/x at theta = 0
    case = two_bus(x=0.1)
    y = build_admittance(case, base_topology(case))
    j = jacobian(case, y, _state([1, 1], [0, 0]))
    assert j[0, 0] == pytest.approx(10.0, abs=1e-12)


def test_lossless_flat_start_dp_dv_block_vanishes():
    buses = (Bus(1, "slack", v_setpoint=1.0), Bus(2, "pq", p_load=0.2), Bus(3, "pq", p_load=0.1))
    case = NetworkCase(100.0, buses, (Branch(1, 2, 0.0, 0.1), Branch(2, 3, 0.0, 0.2), Branch(1, 3, 0.0, 0.25)),
                       (Generator(1, 0.0),))
    y = build_admittance(case, base_topology(case))
    j = jacobian(case, y, _state([1, 1, 1], [0, 0, 0]))
    npvpq = 2
    assert np.all(j[:npvpq, npvpq:] == 0.0)


# --------------------------------------------------------------------- solver

def test_case9_matches_independent_solver(case9):
    sol = solve_newton(case9, base_topology(case9))
    assert sol.converged and sol.iterations <= 6
    vm_ref, va_ref = _pypower_case9()
    np.testing.assert_allclose(sol.v_mag, vm_ref, atol=1e-6)
    np.testing.assert_allclose(sol.v_ang, va_ref, atol=1e-6)


def test_pv_and_slack_hold_setpoints(case9):
    sol = solve_newton(case9, base_topology(case9))
    for i, b in enumerate(case9.buses):
        if b.kind in ("slack", "pv"):
            assert sol.v_mag[i] == b.v_setpoint
    assert sol.v_ang[case9.slack] == 0.0


def test_unloaded_flat_network_converges_immediately():
    buses = (Bus(1, "slack", v_setpoint=1.0), Bus(2, "pq"), Bus(3, "pv", v_setpoint=1.0))
    case = NetworkCase(100.0, buses, (Branch(1, 2, 0.01, 0.1), Branch(2, 3, 0.02, 0.1)),
                       (Generator(1, 0.0), Generator(3, 0.0)))
    sol = solve_newton(case, base_topology(case))
    assert sol.converged and sol.iterations <= 2
    np.testing.assert_allclose(sol.v_mag, 1.0, atol=1e-10)


def _scaled_injection(case, lam):
    inj = nominal_injection(case)
    p = np.array([-b.p_load * lam for b in case.buses])
    q = np.array([-b.q_load * lam for b in case.buses])
    for g in case.generators:
        p[case.bus_index[g.bus]] += g.pg * lam
    return InjectionVector(p, q)


def test_loads_times_ten_does_not_converge(case9):
    sol = solve_newton(case9, base_topology(case9), _scaled_injection(case9, 10.0))
    assert not sol.converged
    assert sol.max_mismatch > 1e-8


def test_continuation_confirms_no_solution_at_ten_times_load(case9):
    """Trace the solution branch with warm starts; the nose point lies well below 10x."""
    topo = base_topology(case9)
    s = NewtonSolver(case9, build_admittance(case9, topo))
    lam, step = 1.0, 0.25
    prev = s.solve(_scaled_injection(case9, lam))
    assert prev.converged
    min_sv = []
    while step > 1e-4:
        trial = s.solve(_scaled_injection(case9, lam + step),
                        SolverOptions(flat_start=False, initial=(prev.v_mag, prev.v_ang), max_iter=30))
        if trial.converged:
            lam += step
            prev = trial
            jac = s.jacobian(prev.v_mag, prev.v_ang).toarray()
            min_sv.append(np.linalg.svd(jac, compute_uv=False).min())
        else:
            step /= 2
    assert lam < 10.0
    # the Jacobian approaches singularity at the nose, as a fold requires
    assert min_sv[-1] < 0.2 * min_sv[0]
    # and the independent solver also fails at 10x
    ppc = pypower.case9()
    ppc["bus"] = ppc["bus"].astype(float)
    ppc["gen"] = ppc["gen"].astype(float)
    ppc["bus"][:, 2:4] *= 10.0
    ppc["gen"][:, 1] *= 10.0
    _, ok = pypower.runpf(ppc, pypower.ppoption(VERBOSE=0, OUT_ALL=0))
    assert not ok


def test_solver_is_deterministic(case9, topos9):
    for topo in topos9:
        a = solve_newton(case9, topo)
        b = solve_newton(case9, topo)
        assert np.array_equal(a.v_mag, b.v_mag) and np.array_equal(a.v_ang, b.v_ang)


def test_branch_order_permutation_invariance(case9, rng):
    perm = rng.permutation(case9.n_branch)
    shuffled = dataclasses.replace(case9, branches=tuple(case9.branches[i] for i in perm))
    a = solve_newton(case9, base_topology(case9))
    b = solve_newton(shuffled, base_topology(shuffled))
    np.testing.assert_allclose(a.v_mag, b.v_mag, atol=1e-10)


def test_warm_start_reaches_same_solution(case9, topos9):
    base = solve_newton(case9, topos9[0])
    for topo in topos9:
        cold = solve_newton(case9, topo)
        warm = solve_newton(case9, topo, opts=SolverOptions(flat_start=False, initial=(base.v_mag, base.v_ang)))
        np.testing.assert_allclose(cold.v_mag, warm.v_mag, atol=1e-8)


# --------------------------------------------------------------------- branch flows

def test_zero_injection_flows_vanish():
    buses = (Bus(1, "slack", v_setpoint=1.0), Bus(2, "pq"), Bus(3, "pv", v_setpoint=1.0))
    case = NetworkCase(100.0, buses, (Branch(1, 2, 0.01, 0.1), Branch(2, 3, 0.02, 0.1), Branch(1, 3, 0.0, 0.3)),
                       (Generator(1, 0.0), Generator(3, 0.0)))
    topo = base_topology(case)
    for f in branch_flows(case, topo, solve_newton(case, topo)):
        assert abs(f.s_from) < 1e-9 and abs(f.s_to) < 1e-9


def test_lossless_branch_conserves_active_power():
    case = two_bus(r=0.0, x=0.1, b=0.0, p_load=0.5, q_load=0.2)
    topo = base_topology(case)
    (f,) = branch_flows(case, topo, solve_newton(case, topo))
    assert f.s_from.real == pytest.approx(-f.s_to.real, abs=1e-9)
    # the reactance absorbs |I|^2 x of reactive power
    i2 = (f.mva_from / case.base_mva / solve_newton(case, topo).v_mag[0]) ** 2
    assert (f.s_from.imag + f.s_to.imag) / case.base_mva == pytest.approx(i2 * 0.1, abs=1e-9)


def test_lossless_branch_equal_mva_at_equal_terminal_voltage():
    buses = (Bus(1, "slack", v_setpoint=1.0), Bus(2, "pv", p_load=0.4, v_setpoint=1.0))
    case = NetworkCase(100.0, buses, (Branch(1, 2, 0.0, 0.1),), (Generator(1, 0.0), Generator(2, 0.0)))
    topo = base_topology(case)
    (f,) = branch_flows(case, topo, solve_newton(case, topo))
    assert f.mva_from == pytest.approx(f.mva_to, abs=1e-9)


@pytest.mark.parametrize("topo_index", range(7))
def test_power_balance_with_losses(case9, topos9, topo_index):
    topo = topos9[topo_index]
    sol = solve_newton(case9, topo)
    s = NewtonSolver(case9, build_admittance(case9, topo))
    p, q = s.injections(sol.v_mag, sol.v_ang)
    flows = branch_flows(case9, topo, sol)
    losses = sum(f.s_from + f.s_to for f in flows) / case9.base_mva
    # generation minus load equals series losses minus charging
    assert p.sum() == pytest.approx(losses.real, abs=1e-6)
    assert q.sum() == pytest.approx(losses.imag, abs=1e-6)
    assert p.sum() > 0


def test_out_of_service_branch_carries_nothing(case9, topos9):
    topo = topos9[3]
    flows = branch_flows(case9, topo, solve_newton(case9, topo))
    assert flows[topo.outage].mva_from == 0.0


def test_triangle_case_converges():
    case = triangle()
    sol = solve_newton(case, base_topology(case))
    assert sol.converged and np.all(sol.v_mag > 0)


# --------------------------------------------------------------------- backends

@pytest.mark.parametrize("name", ["case9", "case118"])
def test_backends_agree(name):
    if "compiled" not in kernels.BACKENDS:
        pytest.skip("compiled extension not built")
    case = load_case(name)
    s = NewtonSolver(case, build_admittance(case, base_topology(case)))
    r = np.random.default_rng(5)
    vm = r.uniform(0.9, 1.1, case.n_bus)
    va = r.uniform(-0.4, 0.4, case.n_bus)
    py, cc = kernels.get_backend("python"), kernels.get_backend("compiled")
    args = (s.indptr, s.indices, s.g, s.b, vm, va)
    p1, q1 = py.injections(*args)
    p2, q2 = cc.injections(*args)
    np.testing.assert_allclose(p1, p2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(q1, q2, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(py.jacobian_entries(*args, p1, q1), cc.jacobian_entries(*args, p1, q1),
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(py.jacobian_data(*args, p1, q1, s._dest, s._nnz),
                               cc.jacobian_data(*args, p1, q1, s._dest, s._nnz), rtol=1e-12, atol=1e-12)


def test_backend_selection_env(monkeypatch):
    import importlib

    monkeypatch.setenv("GRIDNP_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("GRIDNP_PURE_PYTHON")
        importlib.reload(kernels)
