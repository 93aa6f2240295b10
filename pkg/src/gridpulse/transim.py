"""Classical-model multi-machine transient simulation and out-of-step labelling."""

from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .grid import FaultScenario, FaultType, GridModel, OperatingPoint, ReducedNetwork

POST_FAULT_HORIZON = 5.0
STEP = 1e-3
THRESHOLD = math.pi
TRACE_HEADER = "t,gen,delta,omega,pe,vt"


class SimulationError(RuntimeError):
    def __init__(self, message, time=float("nan")):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class MachineState:
    delta: np.ndarray
    omega: np.ndarray
    t: float = 0.0


@dataclass
class TraceSet:
    """Signals sampled every ``dt`` seconds, arrays shaped (samples, generators).

    ``pe`` and ``vt`` at an event instant are left limits: the sample at
    ``t_fault`` still sees the prefault network and the sample at
    ``t_clear`` still sees the faulted one.
    """

    t: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    pe: np.ndarray
    vt: np.ndarray
    t_fault: float
    t_clear: float
    stable: bool = True
    critical_pair: tuple | None = None
    crossing_time: float | None = None
    scenario: FaultScenario | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def n_gen(self) -> int:
        return self.delta.shape[1]

    def signal(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def index_of(self, time: float) -> int:
        """Sample index at ``time``; the time must sit on the grid."""
        k = (time - self.t[0]) / self.dt
        idx = int(round(k))
        if abs(k - idx) > 1e-6 or not 0 <= idx < len(self.t):
            raise ValueError(f"time {time} is not a sample of this trace")
        return idx


# -- pair classes ------------------------------------------------------------

def generator_pairs(n_gen: int) -> list[tuple[int, int]]:
    """All (i, j), i < j, in lexicographic order; list position is the class id."""
    return list(itertools.combinations(range(n_gen), 2))


def pair_to_class(pair, n_gen: int) -> int:
    i, j = sorted(pair)
    if not 0 <= i < j < n_gen:
        raise ValueError(f"invalid generator pair {pair} for {n_gen} generators")
    # offset of row i in the upper triangle, then column
    return i * n_gen - i * (i + 1) // 2 + (j - i - 1)


def class_to_pair(cls: int, n_gen: int) -> tuple[int, int]:
    pairs = generator_pairs(n_gen)
    if not 0 <= cls < len(pairs):
        raise ValueError(f"pair class {cls} outside [0, {len(pairs)})")
    return pairs[cls]


# -- physics -------------------------------------------------------------------

def electrical_power(emf: np.ndarray, delta: np.ndarray, net) -> np.ndarray:
    """Air-gap power P_e,i = sum_j E_i E_j (G_ij cos d_ij + B_ij sin d_ij)."""
    Y = net.matrix if isinstance(net, ReducedNetwork) else np.asarray(net)
    emf = np.asarray(emf, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if Y.shape != (emf.size, emf.size) or delta.shape != emf.shape:
        raise ValueError(f"dimension mismatch: Y {Y.shape}, E {emf.shape}, delta {delta.shape}")
    e = emf * np.exp(1j * delta)
    return (e * np.conj(Y @ e)).real


def _on_grid(time: float, dt: float) -> int:
    k = time / dt
    idx = int(round(k))
    if abs(k - idx) > 1e-6:
        raise ValueError(f"event time {time} s is not a multiple of the step {dt} s")
    return idx


def simulate(model: GridModel, op: OperatingPoint, nets, scenario: FaultScenario,
             horizon: float = POST_FAULT_HORIZON, dt: float = STEP,
             damping=None, threshold: float = THRESHOLD) -> TraceSet:
    """Integrate the swing equations through the prefault/faulton/postfault stages.

    Fixed-step RK4 on ``M dw/dt = Pm - Pe - D w``, ``d(delta)/dt = w`` with
    ``M = 2H / w_s``; the active network switches exactly at the fault and
    clearing instants. Mechanical power is balanced against the prefault
    network so the initial state is an exact equilibrium. The returned traces
    are labelled with :func:`label_stability`.
    """
    pre, on, post = nets
    ng = model.n_gen
    k_fault = _on_grid(scenario.onset, dt)
    k_clear = _on_grid(scenario.clear_time, dt)
    if not 0 <= k_fault < k_clear:
        raise ValueError("fault must start at t >= 0 and last at least one step")
    n_steps = k_clear + int(round(horizon / dt))

    h = np.array([g.h for g in model.generators])
    m = 2.0 * h / model.omega_s
    d = np.array([g.d for g in model.generators] if damping is None
                 else np.broadcast_to(np.asarray(damping, float), (ng,)))
    emf = op.emf
    delta0 = op.delta0.astype(float)
    pm = electrical_power(emf, delta0, pre)

    t = np.arange(n_steps + 1) * dt
    deltas = np.empty((n_steps + 1, ng))
    omegas = np.empty((n_steps + 1, ng))
    deltas[0], omegas[0] = delta0, 0.0
    bounds = (0, k_fault, k_clear, n_steps)
    for net, k0, k1 in zip(nets, bounds[:-1], bounds[1:]):
        if k1 > k0:
            Y = net.matrix
            ok = _rk4(deltas, omegas, k0, k1, np.ascontiguousarray(Y.real),
                      np.ascontiguousarray(Y.imag), emf, pm, d, 1.0 / m, dt)
            if ok >= 0:
                raise SimulationError(f"state became non-finite at t = {t[ok]:.6f} s",
                                      float(t[ok]))

    # recorded network quantities use the stage active just before each sample
    term = [model.bus_index(g.bus) for g in model.generators]
    pes = np.empty_like(deltas)
    vts = np.empty_like(deltas)
    for net, lo, hi in ((pre, 0, k_fault + 1), (on, k_fault + 1, k_clear + 1),
                        (post, k_clear + 1, n_steps + 1)):
        if hi <= lo:
            continue
        e = emf * np.exp(1j * deltas[lo:hi])
        pes[lo:hi] = (e * np.conj(e @ net.matrix.T)).real
        R = net.recovery[[net.eliminated.index(b) for b in term]]
        vts[lo:hi] = np.abs(e @ R.T)

    traces = TraceSet(t=t, delta=deltas, omega=omegas, pe=pes, vt=vts,
                      t_fault=float(t[k_fault]), t_clear=float(t[k_clear]),
                      scenario=scenario)
    stable, pair, when = label_stability(traces, threshold)
    traces.stable, traces.critical_pair, traces.crossing_time = stable, pair, when
    return traces


@numba.njit(cache=True)
def _rk4(deltas, omegas, k0, k1, G, B, emf, pm, d, inv_m, dt):
    """Advance rows k0 -> k1 of ``deltas``/``omegas`` in place on one network.

    Returns -1 on success or the first sample index whose state is non-finite.
    """
    n = emf.shape[0]
    delta = deltas[k0].copy()
    omega = omegas[k0].copy()
    kd = np.empty((4, n))
    kw = np.empty((4, n))
    x = np.empty(n)
    w = np.empty(n)
    c = np.empty(n)
    s = np.empty(n)
    half = 0.5 * dt
    for k in range(k0, k1):
        for stage in range(4):
            if stage == 0:
                for i in range(n):
                    x[i] = delta[i]
                    w[i] = omega[i]
            else:
                h = dt if stage == 3 else half
                for i in range(n):
                    x[i] = delta[i] + h * kd[stage - 1, i]
                    w[i] = omega[i] + h * kw[stage - 1, i]
            for i in range(n):
                c[i] = emf[i] * np.cos(x[i])
                s[i] = emf[i] * np.sin(x[i])
            for i in range(n):
                # E_i E_j (G cos(d_i - d_j) + B sin(d_i - d_j))
                acc = 0.0
                for j in range(n):
                    acc += G[i, j] * (c[i] * c[j] + s[i] * s[j]) \
                        + B[i, j] * (s[i] * c[j] - c[i] * s[j])
                kd[stage, i] = w[i]
                kw[stage, i] = (pm[i] - acc - d[i] * w[i]) * inv_m[i]
        finite = True
        for i in range(n):
            delta[i] += dt / 6.0 * (kd[0, i] + 2.0 * kd[1, i] + 2.0 * kd[2, i] + kd[3, i])
            omega[i] += dt / 6.0 * (kw[0, i] + 2.0 * kw[1, i] + 2.0 * kw[2, i] + kw[3, i])
            if not (np.isfinite(delta[i]) and np.isfinite(omega[i])):
                finite = False
        deltas[k + 1] = delta
        omegas[k + 1] = omega
        if not finite:
            return k + 1
    return -1


def label_stability(traces: TraceSet, threshold: float = THRESHOLD):
    """Return ``(stable, critical_pair, first_crossing_time)``.

    A scenario is unstable when any pairwise rotor-angle difference reaches
    ``threshold`` at or after the fault onset. The critical pair is the one
    crossing first; simultaneous crossings go to the lexicographically
    smaller pair.
    """
    start = int(np.searchsorted(traces.t, traces.t_fault - 1e-9))
    delta = np.asarray(traces.delta)[start:]
    if delta.shape[0] == 0:
        raise ValueError("no samples after the fault onset")
    pairs = generator_pairs(delta.shape[1])
    if not pairs:
        return True, None, None
    i_idx = np.array([p[0] for p in pairs])
    j_idx = np.array([p[1] for p in pairs])
    crossed = np.abs(delta[:, i_idx] - delta[:, j_idx]) >= threshold
    hit = crossed.any(axis=0)
    if not hit.any():
        return True, None, None
    first = np.where(hit, crossed.argmax(axis=0), np.iinfo(np.int64).max)
    # argmin returns the first (lexicographically smallest) pair among ties
    best = int(np.argmin(first))
    return False, pairs[best], float(traces.t[start + first[best]])


def run_scenario(model: GridModel, scenario: FaultScenario, **kwargs) -> TraceSet:
    """Power flow, stage networks and simulation for one scenario."""
    from .grid import solve_power_flow, stage_networks

    op = solve_power_flow(model, scenario.load_scale)
    nets = stage_networks(model, op, scenario)
    return simulate(model, op, nets, scenario, **kwargs)


# -- trace files ---------------------------------------------------------------

def _scenario_fields(sc: FaultScenario) -> dict:
    return {"fault_type": sc.fault_type.value, "branch": sc.branch, "location": repr(float(sc.location)),
            "onset": repr(float(sc.onset)), "duration": repr(float(sc.duration)),
            "load_scale": repr(float(sc.load_scale)), "seed": int(sc.seed),
            "z_fault": repr(complex(sc.z_fault))}


def write_traces(traces: TraceSet, path) -> Path:
    """Long-format CSV (one row per sample and generator) plus ``<path>.meta``."""
    path = Path(path)
    buf = io.StringIO()
    buf.write(TRACE_HEADER + "\n")
    cols = [traces.delta.tolist(), traces.omega.tolist(), traces.pe.tolist(), traces.vt.tolist()]
    for k, tk in enumerate(traces.t.tolist()):
        for g in range(traces.n_gen):
            buf.write(f"{tk!r},{g},{cols[0][k][g]!r},{cols[1][k][g]!r},"
                      f"{cols[2][k][g]!r},{cols[3][k][g]!r}\n")
    path.write_text(buf.getvalue(), encoding="utf-8")
    meta = {"t_fault": repr(float(traces.t_fault)), "t_clear": repr(float(traces.t_clear)),
            "stable": int(traces.stable),
            "critical_pair": "none" if traces.critical_pair is None
            else f"{traces.critical_pair[0]}-{traces.critical_pair[1]}",
            "crossing_time": "none" if traces.crossing_time is None
            else repr(float(traces.crossing_time))}
    if traces.scenario is not None:
        meta.update(_scenario_fields(traces.scenario))
    meta.update(traces.meta)
    meta_path = path.with_name(path.name + ".meta")
    meta_path.write_text("".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="utf-8")
    return path


def read_traces(path) -> TraceSet:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != TRACE_HEADER:
        raise ValueError(f"{path}: expected header {TRACE_HEADER!r}")
    data = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
    gens = data[:, 1].astype(int)
    ng = int(gens.max()) + 1
    if data.shape[0] % ng:
        raise ValueError(f"{path}: ragged trace table")
    rows = data.reshape(-1, ng, 6)
    t = rows[:, 0, 0]
    meta = {}
    meta_path = path.with_name(path.name + ".meta")
    if meta_path.exists():
        for line in meta_path.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
    traces = TraceSet(t=t, delta=rows[:, :, 2].copy(), omega=rows[:, :, 3].copy(),
                      pe=rows[:, :, 4].copy(), vt=rows[:, :, 5].copy(),
                      t_fault=float(meta.get("t_fault", "nan")),
                      t_clear=float(meta.get("t_clear", "nan")), meta=meta)
    if "stable" in meta:
        traces.stable = meta["stable"] == "1"
        if meta.get("critical_pair", "none") != "none":
            a, b = meta["critical_pair"].split("-")
            traces.critical_pair = (int(a), int(b))
            traces.crossing_time = float(meta["crossing_time"])
    if "fault_type" in meta:
        traces.scenario = FaultScenario(
            FaultType.parse(meta["fault_type"]), int(meta["branch"]), float(meta["location"]),
            float(meta["onset"]), float(meta["duration"]), float(meta["load_scale"]),
            int(meta["seed"]), complex(meta["z_fault"]))
    return traces
