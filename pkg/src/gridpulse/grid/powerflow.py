"""Newton-Raphson power flow and classical-model machine initialisation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import GridError, GridModel
from .network import build_ybus

TOLERANCE = 1e-8
MAX_ITER = 30
LOAD_SCALE_RANGE = (0.5, 2.0)


class PowerFlowError(RuntimeError):
    def __init__(self, message, mismatch=float("nan"), iterations=0):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass(frozen=True)
class OperatingPoint:
    """Solved steady state plus the classical-model machine quantities.

    ``model`` is the load-scaled model the flow was solved on.
    """

    model: GridModel
    v: np.ndarray
    load_scale: float
    p_gen: np.ndarray
    q_gen: np.ndarray
    emf: np.ndarray
    delta0: np.ndarray
    p_mech: np.ndarray
    mismatch: float
    iterations: int

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.v)

    @property
    def n_bus(self) -> int:
        return len(self.v)

    @property
    def emf_phasors(self) -> np.ndarray:
        return self.emf * np.exp(1j * self.delta0)


def bus_mismatch(Y: np.ndarray, v: np.ndarray, s_spec: np.ndarray) -> np.ndarray:
    """Complex power mismatch ``V conj(Y V) - S_spec`` per bus."""
    return v * np.conj(Y @ v) - s_spec


def _jacobian(Y, v):
    ibus = Y @ v
    vnorm = v / np.abs(v)
    dS_dVa = 1j * np.diag(v) @ np.conj(np.diag(ibus) - Y @ np.diag(v))
    dS_dVm = np.diag(v) @ np.conj(Y @ np.diag(vnorm)) + np.conj(np.diag(ibus)) @ np.diag(vnorm)
    return dS_dVa, dS_dVm


def solve_power_flow(model: GridModel, load_scale: float = 1.0, *,
                     tol: float = TOLERANCE, max_iter: int = MAX_ITER,
                     valid_range=LOAD_SCALE_RANGE) -> OperatingPoint:
    """Solve the flow at ``load_scale`` times the base loads and PV dispatch.

    Newton-Raphson in polar form from a flat start (PQ magnitudes 1.0, all
    angles 0, PV and slack magnitudes at their set points). Reactive limits
    are not enforced.
    """
    if not load_scale > 0:
        raise ValueError(f"load_scale must be positive, got {load_scale}")
    lo, hi = valid_range
    if not lo <= load_scale <= hi:
        warnings.warn(f"load_scale {load_scale} outside the validated range [{lo}, {hi}]",
                      RuntimeWarning, stacklevel=2)
    scaled = model.scaled(load_scale)
    gen_buses = [scaled.bus_index(g.bus) for g in scaled.generators]
    if len(set(gen_buses)) != len(gen_buses):
        raise GridError("at most one generator per bus is supported")

    Y = build_ybus(scaled)
    n = scaled.n_bus
    s_load = np.array([complex(b.pd, b.qd) for b in scaled.buses])
    s_gen = np.zeros(n, dtype=complex)
    vm = np.ones(n)
    for g, i in zip(scaled.generators, gen_buses):
        s_gen[i] = g.pg
        vm[i] = g.vset
    s_spec = s_gen - s_load
    types = [b.type for b in scaled.buses]
    pv = [i for i, t in enumerate(types) if t == "PV"]
    pq = [i for i, t in enumerate(types) if t == "PQ"]
    for i in pv + [scaled.slack_index]:
        if i not in gen_buses:
            raise GridError(f"bus {scaled.buses[i].id} is {types[i]} but has no generator")
    pvpq = pv + pq
    v = vm.astype(complex)

    norm = np.inf
    for it in range(max_iter + 1):
        mis = bus_mismatch(Y, v, s_spec)
        F = np.concatenate([mis[pvpq].real, mis[pq].imag])
        norm = float(np.max(np.abs(F))) if F.size else 0.0
        if not np.isfinite(norm):
            raise PowerFlowError(f"power flow diverged at iteration {it}", norm, it)
        if norm < tol:
            break
        if it == max_iter:
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations "
                f"(load_scale={load_scale}, mismatch={norm:.3e} pu)", norm, it)
        dVa, dVm = _jacobian(Y, v)
        J = np.block([[dVa[np.ix_(pvpq, pvpq)].real, dVm[np.ix_(pvpq, pq)].real],
                      [dVa[np.ix_(pq, pvpq)].imag, dVm[np.ix_(pq, pq)].imag]])
        dx = np.linalg.solve(J, -F)
        va, vmag = np.angle(v), np.abs(v)
        va[pvpq] += dx[:len(pvpq)]
        vmag[pq] += dx[len(pvpq):]
        v = vmag * np.exp(1j * va)

    s_inj = v * np.conj(Y @ v)
    s_g = s_inj[gen_buses] + s_load[gen_buses]
    vt = v[gen_buses]
    xd = np.array([g.xd_prime for g in scaled.generators])
    current = np.conj(s_g / vt)
    e = vt + 1j * xd * current
    return OperatingPoint(
        model=scaled, v=v, load_scale=float(load_scale),
        p_gen=s_g.real.copy(), q_gen=s_g.imag.copy(),
        emf=np.abs(e), delta0=np.angle(e),
        # lossless X'd: air-gap power equals terminal output
        p_mech=s_g.real.copy(),
        mismatch=norm, iterations=it)
