"""Polar Newton-Raphson AC power flow and branch flow evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import kernels
from .grid_model import AdmittanceMatrix, NetworkCase, Topology, branch_stamp, build_admittance


class PowerFlowError(RuntimeError):
    pass


class SingularJacobian(PowerFlowError):
    pass


@dataclass(frozen=True)
class InjectionVector:
    """Net bus injections in per-unit, generation positive and load negative."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        if np.shape(self.p) != np.shape(self.q):
            raise ValueError("p and q must have equal length")


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


@dataclass(frozen=True)
class BranchFlow:
    branch: int
    s_from: complex
    s_to: complex
    mva_from: float

    @property
    def mva_to(self) -> float:
        return abs(self.s_to)


@dataclass
class SolverOptions:
    tolerance: float = 1e-8
    max_iter: int = 20
    flat_start: bool = True
    # warm start (v_mag, v_ang); used only when flat_start is False
    initial: Optional[tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)


def nominal_injection(case: NetworkCase) -> InjectionVector:
    idx = case.bus_index
    p = np.array([-b.p_load for b in case.buses])
    q = np.array([-b.q_load for b in case.buses])
    for g in case.generators:
        if g.status:
            p[idx[g.bus]] += g.pg
            q[idx[g.bus]] += g.qg
    return InjectionVector(p, q)


def flat_state(case: NetworkCase) -> PowerFlowSolution:
    vm = np.array([b.v_setpoint if b.kind != "pq" else 1.0 for b in case.buses], dtype=float)
    return PowerFlowSolution(vm, np.zeros(case.n_bus), False, 0, np.inf)


class NewtonSolver:
    """Newton-Raphson solver bound to one case and admittance matrix.

    Index bookkeeping and the Jacobian sparsity layout are computed once so
    repeated Monte Carlo solves only pay for the kernels and the LU solve.
    """

    def __init__(self, case: NetworkCase, ybus: AdmittanceMatrix):
        self.case = case
        self.ybus = ybus
        csr = ybus.tocsr()
        self.indptr = csr.indptr.astype(np.intp)
        self.indices = csr.indices.astype(np.intp)
        self.g = np.ascontiguousarray(csr.data.real)
        self.b = np.ascontiguousarray(csr.data.imag)
        self.slack = case.slack
        self.pv = case.pv
        self.pq = case.pq
        self.pvpq = np.sort(np.concatenate([self.pv, self.pq]))
        self._layout()

    def _layout(self):
        n = self.case.n_bus
        npvpq = len(self.pvpq)
        pos_a = np.full(n, -1)
        pos_a[self.pvpq] = np.arange(npvpq)
        pos_v = np.full(n, -1)
        pos_v[self.pq] = np.arange(len(self.pq))
        rows = np.repeat(np.arange(n), np.diff(self.indptr))
        cols = self.indices
        ra, ca = pos_a[rows], pos_a[cols]
        rv, cv = pos_v[rows], pos_v[cols]
        blocks = [
            (0, (ra >= 0) & (ca >= 0), ra, ca),
            (1, (ra >= 0) & (cv >= 0), ra, npvpq + cv),
            (2, (rv >= 0) & (ca >= 0), npvpq + rv, ca),
            (3, (rv >= 0) & (cv >= 0), npvpq + rv, npvpq + cv),
        ]
        jr = np.concatenate([r[m] for _, m, r, _ in blocks])
        jc = np.concatenate([c[m] for _, m, _, c in blocks])
        self.dim = npvpq + len(self.pq)
        # storage slot in CSC order for every (block, admittance entry) pair
        order = sp.csc_matrix((np.arange(1, len(jr) + 1, dtype=float), (jr, jc)),
                              shape=(self.dim, self.dim))
        order.sort_indices()
        slot = np.empty(len(jr), dtype=np.intp)
        slot[order.data.astype(np.intp) - 1] = np.arange(len(jr))
        dest = np.full((4, len(rows)), -1, dtype=np.intp)
        offset = 0
        for k, m, _, _ in blocks:
            sel = np.flatnonzero(m)
            dest[k, sel] = slot[offset:offset + len(sel)]
            offset += len(sel)
        self._dest = dest
        self._nnz = len(jr)
        self._csc_indices = order.indices.copy()
        self._csc_indptr = order.indptr.copy()

    def injections(self, vm: np.ndarray, va: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return kernels.injections(self.indptr, self.indices, self.g, self.b, vm, va)

    def residual(self, vm, va, inj: InjectionVector) -> np.ndarray:
        p, q = self.injections(vm, va)
        return np.concatenate([p[self.pvpq] - inj.p[self.pvpq], q[self.pq] - inj.q[self.pq]])

    def jacobian(self, vm, va, p=None, q=None) -> sp.csc_matrix:
        if p is None:
            p, q = self.injections(vm, va)
        data = kernels.jacobian_data(self.indptr, self.indices, self.g, self.b, vm, va, p, q,
                                     self._dest, self._nnz)
        return sp.csc_matrix((data, self._csc_indices, self._csc_indptr),
                             shape=(self.dim, self.dim))

    def solve(self, inj: InjectionVector, opts: Optional[SolverOptions] = None) -> PowerFlowSolution:
        opts = opts or SolverOptions()
        start = flat_state(self.case)
        vm, va = start.v_mag, start.v_ang
        if not opts.flat_start and opts.initial is not None:
            vm = np.array(opts.initial[0], dtype=float)
            va = np.array(opts.initial[1], dtype=float)
            # regulated magnitudes always come from the case
            fixed = np.setdiff1d(np.arange(self.case.n_bus), self.pq)
            vm[fixed] = start.v_mag[fixed]
            va[self.slack] = 0.0
        npvpq = len(self.pvpq)
        best = (np.inf, vm.copy(), va.copy(), 0)
        it = 0
        converged = False
        while True:
            p, q = self.injections(vm, va)
            f = np.concatenate([p[self.pvpq] - inj.p[self.pvpq], q[self.pq] - inj.q[self.pq]])
            norm = float(np.max(np.abs(f))) if f.size else 0.0
            if not np.isfinite(norm) or np.any(vm <= 0):
                break
            if norm < best[0]:
                best = (norm, vm.copy(), va.copy(), it)
            if norm <= opts.tolerance:
                converged = True
                break
            if it >= opts.max_iter:
                break
            jac = self.jacobian(vm, va, p, q)
            try:
                dx = splu(jac, permc_spec="MMD_AT_PLUS_A").solve(-f)
            except RuntimeError as exc:
                raise SingularJacobian(str(exc)) from None
            va = va.copy()
            vm = vm.copy()
            va[self.pvpq] += dx[:npvpq]
            vm[self.pq] += dx[npvpq:]
            it += 1
        if converged:
            return PowerFlowSolution(vm, va, True, it, norm)
        return PowerFlowSolution(best[1], best[2], False, it, best[0])


def _state_arrays(state: PowerFlowSolution):
    return np.asarray(state.v_mag, dtype=float), np.asarray(state.v_ang, dtype=float)


def mismatch(case: NetworkCase, ybus: AdmittanceMatrix, state: PowerFlowSolution,
             inj: InjectionVector) -> np.ndarray:
    """Calculated minus scheduled injections: P at pv/pq buses, then Q at pq buses."""
    vm, va = _state_arrays(state)
    return NewtonSolver(case, ybus).residual(vm, va, inj)


def jacobian(case: NetworkCase, ybus: AdmittanceMatrix, state: PowerFlowSolution,
             inj: Optional[InjectionVector] = None) -> np.ndarray:
    """Dense Jacobian of :func:`mismatch` w.r.t. (angles at pv/pq, magnitudes at pq)."""
    vm, va = _state_arrays(state)
    return NewtonSolver(case, ybus).jacobian(vm, va).toarray()


def solve_newton(case: NetworkCase, topo: Topology, inj: Optional[InjectionVector] = None,
                 opts: Optional[SolverOptions] = None) -> PowerFlowSolution:
    inj = inj if inj is not None else nominal_injection(case)
    return NewtonSolver(case, build_admittance(case, topo)).solve(inj, opts)


def branch_flows(case: NetworkCase, topo: Topology, sol: PowerFlowSolution) -> list[BranchFlow]:
    idx = case.bus_index
    v = sol.voltage
    flows = []
    for k, (br, on) in enumerate(zip(case.branches, topo.status_vector)):
        if not (on and br.status):
            flows.append(BranchFlow(k, 0j, 0j, 0.0))
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        yff, yft, ytf, ytt = branch_stamp(br)
        i_f = yff * v[f] + yft * v[t]
        i_t = ytf * v[f] + ytt * v[t]
        s_f = v[f] * np.conj(i_f) * case.base_mva
        s_t = v[t] * np.conj(i_t) * case.base_mva
        flows.append(BranchFlow(k, complex(s_f), complex(s_t), float(abs(s_f))))
    return flows
