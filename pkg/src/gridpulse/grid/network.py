"""Admittance matrices, fault shunts and Kron reduction to generator internal nodes."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from .model import GridError, GridModel

BOLTED_ADMITTANCE = 1e6


class FaultType(str, enum.Enum):
    THREE_PHASE = "3pg"
    LINE_LINE = "ll"
    LINE_LINE_GROUND = "llg"
    SINGLE_LINE_GROUND = "slg"

    @classmethod
    def parse(cls, value) -> "FaultType":
        if isinstance(value, cls):
            return value
        aliases = {"3ph": "3pg", "3p": "3pg", "lg": "slg", "1pg": "slg", "2p": "ll", "2pg": "llg"}
        value = str(value).strip().lower()
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            raise ValueError(f"unknown fault type {value!r}; expected one of "
                             f"{[f.value for f in cls]}") from None


@dataclass(frozen=True)
class FaultScenario:
    """One randomized contingency on a branch."""

    fault_type: FaultType
    branch: int
    location: float
    onset: float
    duration: float
    load_scale: float = 1.0
    seed: int = 0
    z_fault: complex = 0j

    @property
    def clear_time(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True)
class ReducedNetwork:
    """Admittance matrix seen from the generator internal nodes.

    ``recovery`` maps internal EMF phasors to the voltages of the eliminated
    nodes, listed in ``eliminated`` (indices into the unreduced matrix).
    """

    matrix: np.ndarray
    stage: str
    recovery: np.ndarray
    kept: tuple
    eliminated: tuple

    @property
    def G(self) -> np.ndarray:
        return self.matrix.real

    @property
    def B(self) -> np.ndarray:
        return self.matrix.imag

    def node_voltages(self, emf: np.ndarray, nodes) -> np.ndarray:
        """Voltage phasors at unreduced ``nodes`` for internal EMF phasors ``emf``."""
        pos = {n: k for k, n in enumerate(self.eliminated)}
        rows = [pos[n] for n in nodes]
        return self.recovery[rows] @ emf


def build_ybus(model: GridModel, removed=(), shunts=None) -> np.ndarray:
    """Bus admittance matrix with ``removed`` branch ids out and ``shunts`` added.

    ``shunts`` maps bus id to an extra admittance to ground (pu).
    """
    removed = set(removed)
    known = {br.id for br in model.branches}
    unknown = removed - known
    if unknown:
        raise GridError(f"unknown branch ids {sorted(unknown)}")
    if removed:
        islands = model.islands(removed)
        if len(islands) > 1:
            raise GridError(f"removing branches {sorted(removed)} disconnects the "
                            f"network into {islands}")
    n = model.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for bus in model.buses:
        i = model.bus_index(bus.id)
        Y[i, i] += complex(bus.gs, bus.bs)
    for br in model.branches:
        if br.id in removed:
            continue
        f, t = model.bus_index(br.from_bus), model.bus_index(br.to_bus)
        y = 1.0 / br.z
        ych = 0.5j * br.b
        a = br.tap
        Y[f, f] += (y + ych) / (a * a)
        Y[t, t] += y + ych
        Y[f, t] -= y / a
        Y[t, f] -= y / a
    for bus_id, y in (shunts or {}).items():
        i = model.bus_index(bus_id)
        Y[i, i] += y
    return Y


def fault_shunt(fault_type, z_neg: complex, z_zero: complex, z_fault: complex = 0j) -> complex:
    """Impedance to ground that stands in for a fault in the positive-sequence network."""
    fault_type = FaultType.parse(fault_type)
    values = (z_neg, z_zero, z_fault)
    if not all(np.isfinite(complex(v).real) and np.isfinite(complex(v).imag) for v in values):
        raise ValueError("fault impedances must be finite")
    if fault_type is FaultType.THREE_PHASE:
        return complex(z_fault)
    if fault_type is FaultType.SINGLE_LINE_GROUND:
        return complex(z_fault + z_neg + z_zero)
    if fault_type is FaultType.LINE_LINE:
        return complex(z_fault + z_neg)
    total = z_neg + z_zero
    if total == 0:
        raise ValueError("LLG fault with z_neg + z_zero = 0 has no parallel equivalent")
    return complex(z_fault + z_neg * z_zero / total)


def shunt_admittance(z: complex, bolted: float = BOLTED_ADMITTANCE) -> complex:
    """Admittance of a fault shunt; impedances below ``1/bolted`` become ``bolted``."""
    if abs(z) <= 1.0 / bolted:
        return complex(bolted)
    return 1.0 / z


def kron_reduce(Y: np.ndarray, keep, stage: str = "prefault") -> ReducedNetwork:
    """Eliminate every node not in ``keep``: Y_kk - Y_ke Y_ee^-1 Y_ek."""
    Y = np.asarray(Y, dtype=complex)
    n = Y.shape[0]
    keep = [int(k) for k in keep]
    keep_set = set(keep)
    elim = [i for i in range(n) if i not in keep_set]
    Ykk = Y[np.ix_(keep, keep)]
    if not elim:
        return ReducedNetwork(Ykk.copy(), stage, np.zeros((0, len(keep)), complex),
                              tuple(keep), ())
    Yee = Y[np.ix_(elim, elim)]
    Yek = Y[np.ix_(elim, keep)]
    Yke = Y[np.ix_(keep, elim)]
    try:
        if np.linalg.cond(Yee) > 1e14:
            raise np.linalg.LinAlgError
        solved = np.linalg.solve(Yee, Yek)
    except np.linalg.LinAlgError:
        raise GridError(f"eliminated block is singular; floating node set "
                        f"{_floating_nodes(Y, elim, keep_set)}") from None
    reduced = Ykk - Yke @ solved
    return ReducedNetwork(reduced, stage, -solved, tuple(keep), tuple(elim))


def _floating_nodes(Y, elim, keep_set):
    """Eliminated components with no path to a kept node and no shunt."""
    elim_set = set(elim)
    seen, floating = set(), []
    for start in elim:
        if start in seen:
            continue
        comp, stack = [], [start]
        seen.add(start)
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in np.nonzero(Y[i])[0]:
                j = int(j)
                if j in elim_set and j not in seen:
                    seen.add(j)
                    stack.append(j)
        touches_kept = any(Y[i, j] != 0 for i in comp for j in keep_set)
        grounded = abs(Y[np.ix_(comp, comp)].sum()) > 1e-12
        if not touches_kept and not grounded:
            floating.append(sorted(comp))
    return floating or [sorted(elim)]


# -- dynamic stages --------------------------------------------------------

def augmented_ybus(model: GridModel, op, removed=(), shunts=None) -> np.ndarray:
    """Bus matrix extended with one internal node per generator.

    Loads enter as constant admittances at the operating point voltages;
    internal node ``n_bus + k`` connects to generator ``k``'s terminal
    through ``j X'd``. Buses added by a split are appended with no load.
    """
    Y = build_ybus(model, removed, shunts)
    nb, ng = model.n_bus, model.n_gen
    Ya = np.zeros((nb + ng, nb + ng), dtype=complex)
    Ya[:nb, :nb] = Y
    vm = op.vm
    for i in range(op.n_bus):
        bus = op.model.buses[i]
        if bus.pd or bus.qd:
            Ya[i, i] += complex(bus.pd, -bus.qd) / vm[i] ** 2
    for k, gen in enumerate(model.generators):
        t = model.bus_index(gen.bus)
        y = 1.0 / complex(0.0, gen.xd_prime)
        Ya[t, t] += y
        Ya[nb + k, nb + k] += y
        Ya[t, nb + k] -= y
        Ya[nb + k, t] -= y
    return Ya


def _zero_sequence_model(model: GridModel) -> GridModel:
    branches = [dataclasses.replace(br, r=br.r * br.z0_scale, x=br.x * br.z0_scale)
                for br in model.branches]
    return dataclasses.replace(model, branches=branches)


def driving_point(Y: np.ndarray, node: int, n_bus: int | None = None) -> complex:
    """Thevenin impedance seen at ``node`` with all sources shorted.

    For an augmented matrix pass ``n_bus``: the internal EMF nodes after the
    first ``n_bus`` rows are grounded by dropping them.
    """
    if n_bus is not None:
        Y = Y[:n_bus, :n_bus]
    e = np.zeros(Y.shape[0], dtype=complex)
    e[node] = 1.0
    return complex(np.linalg.solve(Y, e)[node])


def stage_admittances(model: GridModel, op, scenario: FaultScenario,
                      bolted: float = BOLTED_ADMITTANCE) -> dict:
    """Unreduced stage matrices for ``scenario`` plus their internal-node indices.

    The prefault and postfault matrices use the model's own node numbering;
    the faulton matrix uses the numbering of the split model (split bus
    appended after the original buses). Keys: ``prefault``, ``faulton``,
    ``postfault``, ``keep`` (prefault/postfault), ``keep_faulton``,
    ``fault_node``, ``fault_admittance``, ``split_model``.
    """
    br = model.branch(scenario.branch)
    if not 0.0 <= scenario.location <= 1.0:
        raise GridError(f"location fraction {scenario.location} outside [0, 1]")
    islands = model.islands([br.id])
    if len(islands) > 1:
        slack_id = model.buses[model.slack_index].id
        stranded = [isl for isl in islands if slack_id not in isl]
        raise GridError(f"outage of branch {br.id} islands buses {stranded}")

    split, node = model.split_branch(br.id, scenario.location)
    Y_open = augmented_ybus(split, op)
    k = split.bus_index(node)
    nb_split = split.n_bus
    z1 = driving_point(Y_open, k, nb_split)
    z0 = driving_point(augmented_ybus(_zero_sequence_model(split), op), k, nb_split)
    zf = fault_shunt(scenario.fault_type, z1, z0, scenario.z_fault)
    y_f = shunt_admittance(zf, bolted)
    Y_on = Y_open.copy()
    Y_on[k, k] += y_f

    nb, ng = model.n_bus, model.n_gen
    return {
        "prefault": augmented_ybus(model, op),
        "faulton": Y_on,
        "postfault": augmented_ybus(model, op, removed=[br.id]),
        "keep": list(range(nb, nb + ng)),
        "keep_faulton": list(range(split.n_bus, split.n_bus + ng)),
        "fault_node": k,
        "fault_admittance": y_f,
        "split_model": split,
    }


def stage_networks(model: GridModel, op, scenario: FaultScenario,
                   bolted: float = BOLTED_ADMITTANCE):
    """Reduced (prefault, faulton, postfault) networks for ``scenario``."""
    st = stage_admittances(model, op, scenario, bolted)
    return (kron_reduce(st["prefault"], st["keep"], "prefault"),
            kron_reduce(st["faulton"], st["keep_faulton"], "faulton"),
            kron_reduce(st["postfault"], st["keep"], "postfault"))
