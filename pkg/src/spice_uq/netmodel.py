"""Grid case parsing and bus admittance assembly.

Two input formats are accepted by :func:`parse_case`:

* MATPOWER case text (``mpc.bus``, ``mpc.gen``, ``mpc.branch`` and optionally
  ``mpc.gencost`` tables, version 2 column order).
* The JSON network schema produced by :func:`to_json`::

    {
      "base_mva": 100.0,
      "buses":      [{"id", "kind", "v_min", "v_max", "nominal_v", "gs", "bs"}],
      "loads":      [{"bus", "p_nom", "q_nom"}],
      "generators": [{"bus", "p_nom", "q_nom", "v_nom", "p_min", "p_max",
                      "q_min", "q_max", "cost"}],
      "branches":   [{"from_bus", "to_bus", "r", "x", "charging", "tap",
                      "shift", "s_max"}]
    }

  ``kind`` is one of ``"slack"``, ``"pv"``, ``"pq"``; ``shift`` is in degrees;
  ``cost`` lists polynomial coefficients in per-unit power, highest order first.

All quantities are per-unit on ``base_mva``.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp


class CaseError(ValueError):
    """Raised for malformed or inconsistent case data."""


BUS_KINDS = ("slack", "pv", "pq")
_MATPOWER_KIND = {1: "pq", 2: "pv", 3: "slack"}


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    v_min: float
    v_max: float
    nominal_v: float = 1.0
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    s_max: float = 0.0

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Generator:
    bus: int
    p_nom: float
    v_nom: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    q_nom: float = 0.0
    cost: tuple[float, ...] = ()

    def cost_of(self, p):
        """Polynomial generation cost at per-unit output ``p``."""
        if not self.cost:
            return 0.0 * p
        return np.polyval(self.cost, p)


@dataclass(frozen=True)
class Load:
    bus: int
    p_nom: float
    q_nom: float


@dataclass(frozen=True)
class AdmittanceMatrix:
    G: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def Y(self) -> sp.csr_matrix:
        return (self.G + 1j * self.B).tocsr()


@dataclass(frozen=True, eq=False)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    base_mva: float = 100.0
    name: str = ""
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "loads", tuple(self.loads))
        self._index.clear()
        self._index.update({b.id: i for i, b in enumerate(self.buses)})
        validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    def bus_index(self, bus_id: int) -> int:
        return self._index[bus_id]

    @property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    def kinds(self) -> np.ndarray:
        return np.array([b.kind for b in self.buses])

    def gen_bus_index(self) -> np.ndarray:
        return np.array([self._index[g.bus] for g in self.generators], dtype=int)

    def load_bus_index(self) -> np.ndarray:
        return np.array([self._index[ld.bus] for ld in self.loads], dtype=int)

    def branch_ends(self) -> tuple[np.ndarray, np.ndarray]:
        f = np.array([self._index[br.from_bus] for br in self.branches], dtype=int)
        t = np.array([self._index[br.to_bus] for br in self.branches], dtype=int)
        return f, t

    def voltage_setpoints(self) -> np.ndarray:
        """Voltage magnitude setpoint per bus: first generator's ``v_nom`` on
        slack/PV buses, the bus ``nominal_v`` elsewhere."""
        v = np.array([b.nominal_v for b in self.buses], dtype=float)
        seen = set()
        for g in self.generators:
            i = self._index[g.bus]
            if i not in seen and self.buses[i].kind != "pq":
                v[i] = g.v_nom
                seen.add(i)
        return v

    def replace(self, **changes) -> "Network":
        data = dict(buses=self.buses, branches=self.branches, generators=self.generators,
                    loads=self.loads, base_mva=self.base_mva, name=self.name)
        data.update(changes)
        return Network(**data)

    def digest(self) -> str:
        return hashlib.sha256(to_json(self).encode()).hexdigest()[:16]


def validate(net: Network) -> None:
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        raise CaseError("duplicate bus ids")
    n_slack = sum(b.kind == "slack" for b in net.buses)
    if n_slack == 0:
        raise CaseError("no slack bus")
    if n_slack > 1:
        raise CaseError("multiple slack buses")
    idx = set(ids)
    for b in net.buses:
        if b.kind not in BUS_KINDS:
            raise CaseError(f"bus {b.id}: unknown kind {b.kind!r}")
        if not 0 < b.v_min <= b.v_max:
            raise CaseError(f"bus {b.id}: need 0 < v_min <= v_max")
    for br in net.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in idx:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus} references missing bus {end}")
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        if br.s_max < 0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} has negative s_max")
    for g in net.generators:
        if g.bus not in idx:
            raise CaseError(f"generator references missing bus {g.bus}")
    for ld in net.loads:
        if ld.bus not in idx:
            raise CaseError(f"load references missing bus {ld.bus}")
        if not (np.isfinite(ld.p_nom) and np.isfinite(ld.q_nom)):
            raise CaseError(f"load at bus {ld.bus} is not finite")
    if not _connected(net):
        raise CaseError("network is not connected")


def _connected(net: Network) -> bool:
    if net.n_bus == 0:
        return False
    adj = adjacency_lists(net)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return len(seen) == net.n_bus


def adjacency_lists(net: Network) -> list[list[int]]:
    """Sorted neighbour lists over bus positions."""
    adj: list[set[int]] = [set() for _ in net.buses]
    f, t = net.branch_ends()
    for a, b in zip(f, t):
        if a != b:
            adj[a].add(b)
            adj[b].add(a)
    return [sorted(s) for s in adj]


# ---------------------------------------------------------------------------
# Admittance


def branch_admittances(net: Network):
    """Per-branch two-port entries ``(yff, yft, ytf, ytt)`` as complex arrays."""
    ys = np.array([br.series_admittance for br in net.branches], dtype=complex)
    bc = np.array([br.charging for br in net.branches], dtype=float)
    tap = np.array([br.tap if br.tap else 1.0 for br in net.branches], dtype=float)
    shift = np.deg2rad([br.shift for br in net.branches])
    a = tap * np.exp(1j * np.asarray(shift, dtype=float))
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * tap)
    yft = -ys / np.conj(a)
    ytf = -ys / a
    return yff, yft, ytf, ytt


def build_admittance(net: Network) -> AdmittanceMatrix:
    n = net.n_bus
    f, t = net.branch_ends()
    yff, yft, ytf, ytt = branch_admittances(net)
    ysh = np.array([complex(b.gs, b.bs) for b in net.buses])
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, ysh])
    Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    Y.sum_duplicates()
    return AdmittanceMatrix(G=Y.real.tocsr(), B=Y.imag.tocsr())


def branch_flow_matrices(net: Network) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """``Yf, Yt`` such that from/to end currents are ``Yf @ V`` and ``Yt @ V``."""
    nl, n = net.n_branch, net.n_bus
    f, t = net.branch_ends()
    yff, yft, ytf, ytt = branch_admittances(net)
    r = np.arange(nl)
    Yf = sp.csr_matrix((np.r_[yff, yft], (np.r_[r, r], np.r_[f, t])), shape=(nl, n))
    Yt = sp.csr_matrix((np.r_[ytf, ytt], (np.r_[r, r], np.r_[f, t])), shape=(nl, n))
    return Yf, Yt


# ---------------------------------------------------------------------------
# Parsing

_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[]+);")


def parse_case(text: str, name: str = "") -> Network:
    """Parse MATPOWER case text or the JSON network schema into a Network."""
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseError(f"line {exc.lineno}: invalid JSON ({exc.msg})") from None
        return from_dict(data, name=name)
    return _parse_matpower(text, name)


def load_case(path) -> Network:
    from pathlib import Path

    p = Path(path)
    if not p.exists():
        p = bundled_case_path(str(path))
    return parse_case(p.read_text(), name=p.stem)


def bundled_case_path(name: str):
    from importlib import resources

    stem = name[:-2] if name.endswith(".m") else name
    p = resources.files("spice_uq") / "cases" / f"{stem}.m"
    if not p.is_file():
        raise CaseError(f"no case file or bundled case named {name!r}")
    return p


def _parse_matpower(text: str, name: str) -> Network:
    lines = text.splitlines()
    tables: dict[str, list[list[float]]] = {}
    scalars: dict[str, str] = {}
    current = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if current is None:
            m = _TABLE_RE.search(line)
            if m:
                current = m.group(1)
                tables[current] = []
                line = line[m.end():]
            else:
                m = _SCALAR_RE.search(line)
                if m:
                    scalars[m.group(1)] = m.group(2).strip().strip("'\"")
                continue
        done = "]" in line
        body = line.split("]", 1)[0]
        for chunk in body.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                tables[current].append([float(v) for v in chunk.replace(",", " ").split()])
            except ValueError:
                raise CaseError(f"line {lineno}: cannot parse row {chunk!r}") from None
        if done:
            current = None
    if current is not None:
        raise CaseError(f"line {len(lines)}: unterminated table mpc.{current}")
    for key in ("bus", "gen", "branch"):
        if key not in tables:
            raise CaseError(f"missing table mpc.{key}")
    for key, rows in tables.items():
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise CaseError(f"table mpc.{key} has ragged rows")
    base = float(scalars.get("baseMVA", 100.0))
    bus = np.array(tables["bus"], dtype=float).reshape(-1, 13) if tables["bus"] else np.zeros((0, 13))
    gen = np.array(tables["gen"], dtype=float)
    branch = np.array(tables["branch"], dtype=float)
    gencost = np.array(tables.get("gencost", []), dtype=float)
    return _from_matpower_arrays(base, bus, gen, branch, gencost, name)


def _from_matpower_arrays(base, bus, gen, branch, gencost, name) -> Network:
    ids = set(int(b) for b in bus[:, 0])
    for row in gen:
        if int(row[0]) not in ids:
            raise CaseError(f"generator references missing bus {int(row[0])}")
    for row in branch:
        for end in (int(row[0]), int(row[1])):
            if end not in ids:
                raise CaseError(f"branch {int(row[0])}-{int(row[1])} references missing bus {end}")
    n_slack = int(np.sum(bus[:, 1] == 3))
    if n_slack == 0:
        raise CaseError("no slack bus")
    if n_slack > 1:
        raise CaseError("multiple slack buses")
    live_gen = [k for k in range(len(gen)) if gen.shape[1] < 8 or gen[k, 7] > 0]
    gen_buses = {int(gen[k, 0]) for k in live_gen}

    buses, loads = [], []
    for row in bus:
        bid, code = int(row[0]), int(row[1])
        if code == 4:
            raise CaseError(f"bus {bid}: isolated buses are not supported")
        kind = _MATPOWER_KIND.get(code)
        if kind is None:
            raise CaseError(f"bus {bid}: unknown bus type {code}")
        if kind == "pv" and bid not in gen_buses:
            kind = "pq"
        buses.append(Bus(id=bid, kind=kind, v_min=row[12], v_max=row[11], nominal_v=row[7],
                         gs=row[4] / base, bs=row[5] / base))
        if row[2] != 0 or row[3] != 0:
            loads.append(Load(bus=bid, p_nom=row[2] / base, q_nom=row[3] / base))

    generators = []
    for k in live_gen:
        row = gen[k]
        cost: tuple[float, ...] = ()
        if len(gencost) > k and int(gencost[k, 0]) == 2:
            ncost = int(gencost[k, 3])
            c = gencost[k, 4:4 + ncost]
            # $/MW^d -> $/pu^d
            d = np.arange(ncost - 1, -1, -1)
            cost = tuple(float(v) for v in c * base ** d)
        generators.append(Generator(bus=int(row[0]), p_nom=row[1] / base, q_nom=row[2] / base,
                                    q_max=row[3] / base, q_min=row[4] / base, v_nom=row[5],
                                    p_max=row[8] / base, p_min=row[9] / base, cost=cost))

    branches = []
    for row in branch:
        if row.shape[0] > 10 and row[10] <= 0:
            continue
        branches.append(Branch(from_bus=int(row[0]), to_bus=int(row[1]), r=row[2], x=row[3],
                               charging=row[4], s_max=row[5] / base,
                               tap=row[8] if row[8] != 0 else 1.0, shift=row[9]))
    return Network(buses=buses, branches=branches, generators=generators, loads=loads,
                   base_mva=base, name=name)


# ---------------------------------------------------------------------------
# JSON schema


def to_dict(net: Network) -> dict:
    return {
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [asdict(b) for b in net.buses],
        "loads": [asdict(ld) for ld in net.loads],
        "generators": [dict(asdict(g), cost=list(g.cost)) for g in net.generators],
        "branches": [asdict(br) for br in net.branches],
    }


def to_json(net: Network) -> str:
    return json.dumps(to_dict(net), indent=1, sort_keys=True)


def from_dict(data: dict, name: str = "") -> Network:
    try:
        buses = [Bus(**b) for b in data["buses"]]
        loads = [Load(**ld) for ld in data.get("loads", [])]
        gens = [Generator(**dict(g, cost=tuple(g.get("cost", ())))) for g in data.get("generators", [])]
        branches = [Branch(**br) for br in data.get("branches", [])]
    except (KeyError, TypeError) as exc:
        raise CaseError(f"invalid network JSON: {exc}") from None
    return Network(buses=buses, branches=branches, generators=gens, loads=loads,
                   base_mva=float(data.get("base_mva", 100.0)), name=data.get("name", name) or name)
