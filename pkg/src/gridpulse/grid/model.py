"""Static network description and the ``gridmodel-v1`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

FORMAT_TAG = "gridmodel-v1"
BUS_TYPES = ("slack", "PV", "PQ")

# fixed, versioned column order per section
BUS_COLUMNS = ("id", "type", "pd", "qd", "gs", "bs")
BRANCH_COLUMNS = ("id", "from", "to", "r", "x", "b", "tap", "z0_scale")
GENERATOR_COLUMNS = ("bus", "pg", "vset", "h", "xd_prime", "d")


class GridError(ValueError):
    """Raised for malformed or physically inconsistent network data."""


@dataclass(frozen=True)
class Bus:
    id: int
    type: str
    pd: float = 0.0
    qd: float = 0.0
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    z0_scale: float = 3.0

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class Generator:
    bus: int
    pg: float
    vset: float
    h: float
    xd_prime: float
    d: float = 0.0


@dataclass(frozen=True)
class GridModel:
    """Buses, branches and classical-model generators on a common MVA base.

    Generators are indexed in file order (0-based); that index is the
    generator number used by every downstream module.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    frequency: float = 60.0
    base_mva: float = 100.0
    name: str = ""
    _bus_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        index = {}
        for i, bus in enumerate(self.buses):
            if bus.id in index:
                raise GridError(f"duplicate bus id {bus.id}")
            if bus.type not in BUS_TYPES:
                raise GridError(f"bus {bus.id}: unknown type {bus.type!r}")
            index[bus.id] = i
        object.__setattr__(self, "_bus_index", index)

        slack = [b.id for b in self.buses if b.type == "slack"]
        if len(slack) != 1:
            raise GridError(f"expected exactly one slack bus, found {slack}")
        seen = set()
        for br in self.branches:
            if br.id in seen:
                raise GridError(f"duplicate branch id {br.id}")
            seen.add(br.id)
            for end in (br.from_bus, br.to_bus):
                if end not in index:
                    raise GridError(f"branch {br.id} references unknown bus {end}")
            if br.r == 0.0 and br.x == 0.0:
                raise GridError(f"branch {br.id} has zero series impedance")
            if br.tap <= 0.0:
                raise GridError(f"branch {br.id} has non-positive tap {br.tap}")
        for k, gen in enumerate(self.generators):
            if gen.bus not in index:
                raise GridError(f"generator {k} sits on unknown bus {gen.bus}")
            if gen.h <= 0.0 or gen.xd_prime <= 0.0:
                raise GridError(f"generator {k} needs positive H and X'd")
        islands = self.islands()
        if len(islands) > 1:
            raise GridError(f"network is not connected: islands {islands}")

    # -- lookups -----------------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def omega_s(self) -> float:
        """Synchronous speed in electrical rad/s."""
        return 2.0 * np.pi * self.frequency

    def bus_index(self, bus_id: int) -> int:
        try:
            return self._bus_index[bus_id]
        except KeyError:
            raise GridError(f"unknown bus id {bus_id}") from None

    def branch(self, branch_id: int) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise GridError(f"unknown branch id {branch_id}")

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.type == "slack")

    @property
    def gen_bus_indices(self) -> np.ndarray:
        return np.array([self.bus_index(g.bus) for g in self.generators], dtype=int)

    # -- topology ----------------------------------------------------------
    def islands(self, removed=()) -> list[list[int]]:
        """Connected bus-id groups with the given branch ids taken out."""
        removed = set(removed)
        rows, cols = [], []
        for br in self.branches:
            if br.id in removed:
                continue
            rows.append(self.bus_index(br.from_bus))
            cols.append(self.bus_index(br.to_bus))
        n = self.n_bus
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, labels = connected_components(graph, directed=False)
        groups = [[] for _ in range(n_comp)]
        for i, lab in enumerate(labels):
            groups[lab].append(self.buses[i].id)
        return sorted(groups, key=lambda g: g[0])

    def removable_branches(self) -> list[int]:
        """Branch ids whose outage keeps the network in one piece."""
        return [br.id for br in self.branches if len(self.islands([br.id])) == 1]

    def split_branch(self, branch_id: int, fraction: float) -> tuple["GridModel", int]:
        """Insert a bus along a branch at ``fraction`` of its length from the from-bus.

        Returns the new model and the bus id of the split node. At the
        endpoints no bus is added and the endpoint id is returned.
        """
        if not 0.0 <= fraction <= 1.0:
            raise GridError(f"location fraction {fraction} outside [0, 1]")
        br = self.branch(branch_id)
        if fraction <= 1e-9:
            return self, br.from_bus
        if fraction >= 1.0 - 1e-9:
            return self, br.to_bus
        new_bus = max(b.id for b in self.buses) + 1
        new_id = max(b.id for b in self.branches) + 1
        near = dataclasses.replace(
            br, to_bus=new_bus, r=br.r * fraction, x=br.x * fraction, b=br.b * fraction)
        far = dataclasses.replace(
            br, id=new_id, from_bus=new_bus, r=br.r * (1 - fraction),
            x=br.x * (1 - fraction), b=br.b * (1 - fraction), tap=1.0)
        branches = [near if b.id == branch_id else b for b in self.branches] + [far]
        buses = list(self.buses) + [Bus(new_bus, "PQ")]
        return dataclasses.replace(self, buses=buses, branches=branches), new_bus

    def scaled(self, load_scale: float) -> "GridModel":
        """Loads and PV dispatch multiplied by ``load_scale``."""
        buses = [dataclasses.replace(b, pd=b.pd * load_scale, qd=b.qd * load_scale)
                 for b in self.buses]
        gens = [dataclasses.replace(g, pg=g.pg * load_scale) for g in self.generators]
        return dataclasses.replace(self, buses=buses, generators=gens)


# -- file format ---------------------------------------------------------------

def _parse_header(line: str) -> dict:
    parts = line.split()
    if not parts or parts[0] != FORMAT_TAG:
        raise GridError(f"missing {FORMAT_TAG!r} tag on first line")
    meta = {}
    for item in parts[1:]:
        key, _, value = item.partition("=")
        meta[key] = float(value)
    return meta


def loads(text: str, name: str = "") -> GridModel:
    lines = text.splitlines()
    if not lines:
        raise GridError("empty grid file")
    meta = _parse_header(lines[0])
    sections = {"buses": [], "branches": [], "generators": []}
    current = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            current = line.strip("[]").strip()
            if current not in sections:
                raise GridError(f"line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise GridError(f"line {lineno}: data outside a section")
        sections[current].append((lineno, [c.strip() for c in line.split(",")]))

    def rows(section, columns):
        for lineno, cells in sections[section]:
            if len(cells) != len(columns):
                raise GridError(f"line {lineno}: expected {len(columns)} columns "
                                f"({','.join(columns)}), got {len(cells)}")
            yield lineno, cells

    try:
        buses = [Bus(int(c[0]), c[1], *map(float, c[2:]))
                 for _, c in rows("buses", BUS_COLUMNS)]
        branches = [Branch(int(c[0]), int(c[1]), int(c[2]), *map(float, c[3:]))
                    for _, c in rows("branches", BRANCH_COLUMNS)]
        gens = [Generator(int(c[0]), *map(float, c[1:]))
                for _, c in rows("generators", GENERATOR_COLUMNS)]
    except ValueError as exc:
        if isinstance(exc, GridError):
            raise
        raise GridError(f"unparseable number: {exc}") from None
    return GridModel(buses, branches, gens,
                     frequency=meta.get("frequency", 60.0),
                     base_mva=meta.get("base_mva", 100.0), name=name)


def load(path) -> GridModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise GridError(f"cannot read grid file {path}: {exc}") from None
    return loads(text, name=path.stem)


def dumps(model: GridModel) -> str:
    out = [f"{FORMAT_TAG} base_mva={model.base_mva:g} frequency={model.frequency:g}",
           f"# [buses]       {','.join(BUS_COLUMNS)}",
           f"# [branches]    {','.join(BRANCH_COLUMNS)}",
           f"# [generators]  {','.join(GENERATOR_COLUMNS)}",
           "[buses]"]
    out += [f"{b.id},{b.type},{b.pd!r},{b.qd!r},{b.gs!r},{b.bs!r}" for b in model.buses]
    out.append("[branches]")
    out += [f"{b.id},{b.from_bus},{b.to_bus},{b.r!r},{b.x!r},{b.b!r},{b.tap!r},{b.z0_scale!r}"
            for b in model.branches]
    out.append("[generators]")
    out += [f"{g.bus},{g.pg!r},{g.vset!r},{g.h!r},{g.xd_prime!r},{g.d!r}"
            for g in model.generators]
    return "\n".join(out) + "\n"


def ieee39() -> GridModel:
    """The bundled IEEE 39-bus New England system."""
    text = resources.files("gridpulse.grid").joinpath("data/ieee39.grid").read_text("utf-8")
    return loads(text, name="ieee39")
