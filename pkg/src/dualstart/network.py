"""Grid data model and MATPOWER v2 case I/O.

Everything downstream works in per-unit on the system MVA base. Bus indices
are dense 0..n-1 after parsing; the original MATPOWER numbering is dropped.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

SLACK = "slack"
GENERATOR = "generator"
LOAD = "load"

_BUS_KIND_FROM_TYPE = {1: LOAD, 2: GENERATOR, 3: SLACK}
_BUS_TYPE_FROM_KIND = {LOAD: 1, GENERATOR: 2, SLACK: 3}


class CaseFormatError(ValueError):
    """Raised when a case file cannot be interpreted."""


@dataclass(frozen=True)
class CostPolynomial:
    """Quadratic generation cost c(P) = c2*P^2 + c1*P + c0, P in per-unit."""

    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0

    def value(self, p):
        return self.c2 * p * p + self.c1 * p + self.c0

    def derivative(self, p):
        return 2.0 * self.c2 * p + self.c1

    def __add__(self, other: "CostPolynomial") -> "CostPolynomial":
        return CostPolynomial(self.c2 + other.c2, self.c1 + other.c1, self.c0 + other.c0)


@dataclass(frozen=True)
class Bus:
    id: int
    bus_kind: str
    v_min: float
    v_max: float
    p_load: float
    q_load: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float            # series conductance, admittance convention g - jb
    b: float            # series susceptance (positive for inductive lines)
    b_charge: float = 0.0
    s_max: float | None = None   # None means unbounded
    in_service: bool = True

    @property
    def b_hat(self) -> float:
        return self.b - 0.5 * self.b_charge


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: CostPolynomial


@dataclass(frozen=True)
class LoadProfile:
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _frozen_array(self.p))
        object.__setattr__(self, "q", _frozen_array(self.q))


def _frozen_array(x) -> np.ndarray:
    a = np.array(x, dtype=float)
    a.setflags(write=False)
    return a


@dataclass
class Network:
    """Immutable grid description: buses, branches, generators, one slack bus."""

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    slack_bus: int

    def __post_init__(self):
        self.buses = tuple(self.buses)
        self.branches = tuple(self.branches)
        self.generators = tuple(self.generators)
        self._build_arrays()

    def _build_arrays(self):
        n = len(self.buses)
        live = [br for br in self.branches if br.in_service]
        self.n_bus = n
        self.v_min = _frozen_array([b.v_min for b in self.buses])
        self.v_max = _frozen_array([b.v_max for b in self.buses])
        self.p_load = _frozen_array([b.p_load for b in self.buses])
        self.q_load = _frozen_array([b.q_load for b in self.buses])

        f = np.array([br.from_bus for br in live], dtype=int)
        t = np.array([br.to_bus for br in live], dtype=int)
        g = np.array([br.g for br in live], dtype=float)
        b = np.array([br.b for br in live], dtype=float)
        bh = np.array([br.b_hat for br in live], dtype=float)
        smax = np.array(
            [np.inf if br.s_max is None else br.s_max for br in live], dtype=float
        )
        # one entry per directed flow: first the from->to half, then to->from
        self.edge_from = np.concatenate([f, t])
        self.edge_to = np.concatenate([t, f])
        self.edge_from.setflags(write=False)
        self.edge_to.setflags(write=False)
        self.edge_g = _frozen_array(np.concatenate([g, g]))
        self.edge_b = _frozen_array(np.concatenate([b, b]))
        self.edge_b_hat = _frozen_array(np.concatenate([bh, bh]))
        self.edge_s_max = _frozen_array(np.concatenate([smax, smax]))
        self.n_live_branch = len(live)

        self.gen_mask = np.zeros(n, dtype=bool)
        self.gen_p_min = np.zeros(n)
        self.gen_p_max = np.zeros(n)
        self.gen_q_min = np.zeros(n)
        self.gen_q_max = np.zeros(n)
        self.cost_c2 = np.zeros(n)
        self.cost_c1 = np.zeros(n)
        self.cost_c0 = np.zeros(n)
        for gen in self.generators:
            i = gen.bus
            self.gen_mask[i] = True
            self.gen_p_min[i] = gen.p_min
            self.gen_p_max[i] = gen.p_max
            self.gen_q_min[i] = gen.q_min
            self.gen_q_max[i] = gen.q_max
            self.cost_c2[i] = gen.cost.c2
            self.cost_c1[i] = gen.cost.c1
            self.cost_c0[i] = gen.cost.c0
        for a in (self.gen_mask, self.gen_p_min, self.gen_p_max, self.gen_q_min,
                  self.gen_q_max, self.cost_c2, self.cost_c1, self.cost_c0):
            a.setflags(write=False)

    @property
    def gen_buses(self) -> np.ndarray:
        return np.flatnonzero(self.gen_mask)


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str       # "bus 3", "branch 1-2", "network"
    message: str

    def render(self) -> str:
        return f"{self.code} {self.subject} {self.message}"


# ---------------------------------------------------------------------------
# MATPOWER v2 parsing
# ---------------------------------------------------------------------------

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^;\[]+);")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(name: str, body: str) -> list[list[float]]:
    rows = []
    for chunk in re.split(r"[;\n]", body):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            rows.append([float(tok) for tok in chunk.replace(",", " ").split()])
        except ValueError as exc:
            raise CaseFormatError(f"malformed row in mpc.{name}: {chunk!r}") from exc
    return rows


def parse_matpower_case(text: str) -> Network:
    """Parse MATPOWER v2 case text into a per-unit Network.

    Requires baseMVA plus bus, gen, branch and gencost tables. Multiple
    generators at one bus are merged (bounds summed, cost polynomials added).
    Transformer taps/shifts and bus shunts are rejected rather than
    mis-modeled; out-of-service branches are kept with in_service=False.
    """
    stripped = _strip_comments(text)
    tables = {m.group(1): _parse_matrix(m.group(1), m.group(2))
              for m in _MATRIX_RE.finditer(stripped)}
    scalars = {m.group(1): m.group(2).strip() for m in _SCALAR_RE.finditer(stripped)}

    for required in ("bus", "gen", "branch", "gencost"):
        if required not in tables:
            raise CaseFormatError(f"missing table mpc.{required}")
    if "baseMVA" not in scalars:
        raise CaseFormatError("missing mpc.baseMVA")
    try:
        base = float(scalars["baseMVA"])
    except ValueError as exc:
        raise CaseFormatError("malformed mpc.baseMVA") from exc
    if base <= 0:
        raise CaseFormatError("baseMVA must be positive")

    bus_rows = tables["bus"]
    id_map: dict[int, int] = {}
    buses = []
    for row in bus_rows:
        if len(row) < 13:
            raise CaseFormatError(f"bus row has {len(row)} columns, expected >= 13")
        ext_id = int(row[0])
        bus_type = int(row[1])
        if bus_type == 4:
            raise CaseFormatError(f"bus {ext_id}: isolated buses (type 4) unsupported")
        if bus_type not in _BUS_KIND_FROM_TYPE:
            raise CaseFormatError(f"bus {ext_id}: unknown bus type {bus_type}")
        if row[4] != 0.0 or row[5] != 0.0:
            raise CaseFormatError(f"bus {ext_id}: bus shunts (Gs/Bs) unsupported")
        if ext_id in id_map:
            raise CaseFormatError(f"duplicate bus id {ext_id}")
        idx = len(buses)
        id_map[ext_id] = idx
        buses.append(Bus(
            id=idx,
            bus_kind=_BUS_KIND_FROM_TYPE[bus_type],
            v_min=float(row[12]),
            v_max=float(row[11]),
            p_load=float(row[2]) / base,
            q_load=float(row[3]) / base,
        ))

    slack_ids = [b.id for b in buses if b.bus_kind == SLACK]
    if len(slack_ids) != 1:
        raise CaseFormatError(f"expected exactly one slack bus, found {len(slack_ids)}")

    branches = []
    for row in tables["branch"]:
        if len(row) < 11:
            raise CaseFormatError(f"branch row has {len(row)} columns, expected >= 11")
        fb, tb = int(row[0]), int(row[1])
        if fb not in id_map or tb not in id_map:
            raise CaseFormatError(f"branch {fb}-{tb}: unknown bus id")
        if fb == tb:
            raise CaseFormatError(f"branch {fb}-{tb}: self loop")
        r, x = float(row[2]), float(row[3])
        if r == 0.0 and x == 0.0:
            raise CaseFormatError(f"branch {fb}-{tb}: zero impedance")
        tap, shift = float(row[8]), float(row[9])
        if tap not in (0.0, 1.0):
            raise CaseFormatError(f"branch {fb}-{tb}: off-nominal tap {tap} unsupported")
        if shift != 0.0:
            raise CaseFormatError(f"branch {fb}-{tb}: phase shift {shift} unsupported")
        denom = r * r + x * x
        rate_a = float(row[5])
        branches.append(Branch(
            from_bus=id_map[fb],
            to_bus=id_map[tb],
            g=r / denom,
            b=x / denom,
            b_charge=float(row[4]),
            s_max=None if rate_a == 0.0 else rate_a / base,
            in_service=float(row[10]) > 0,
        ))

    gen_rows = tables["gen"]
    cost_rows = tables["gencost"]
    if len(cost_rows) != len(gen_rows):
        raise CaseFormatError(
            f"gencost has {len(cost_rows)} rows for {len(gen_rows)} generators")

    merged: dict[int, Generator] = {}
    for row, cost_row in zip(gen_rows, cost_rows):
        if len(row) < 10:
            raise CaseFormatError(f"gen row has {len(row)} columns, expected >= 10")
        if len(cost_row) < 4:
            raise CaseFormatError("gencost row too short")
        if int(cost_row[0]) != 2:
            raise CaseFormatError("only polynomial gencost (model 2) supported")
        ncost = int(cost_row[3])
        coeffs = cost_row[4:4 + ncost]
        if ncost > 3 or len(coeffs) != ncost:
            raise CaseFormatError("polynomial gencost limited to at most 3 coefficients")
        if float(row[7]) <= 0:       # GEN_STATUS: offline units are dropped
            continue
        ext_bus = int(row[0])
        if ext_bus not in id_map:
            raise CaseFormatError(f"generator at unknown bus {ext_bus}")
        bus = id_map[ext_bus]
        # MW-domain coefficients highest order first; rescale to per-unit power
        padded = [0.0] * (3 - ncost) + [float(c) for c in coeffs]
        cost = CostPolynomial(c2=padded[0] * base * base, c1=padded[1] * base, c0=padded[2])
        gen = Generator(
            bus=bus,
            p_min=float(row[9]) / base,
            p_max=float(row[8]) / base,
            q_min=float(row[4]) / base,
            q_max=float(row[3]) / base,
            cost=cost,
        )
        if bus in merged:
            prev = merged[bus]
            gen = Generator(
                bus=bus,
                p_min=prev.p_min + gen.p_min,
                p_max=prev.p_max + gen.p_max,
                q_min=prev.q_min + gen.q_min,
                q_max=prev.q_max + gen.q_max,
                cost=prev.cost + gen.cost,
            )
        merged[bus] = gen

    net = Network(
        base_mva=base,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(merged[b] for b in sorted(merged)),
        slack_bus=slack_ids[0],
    )
    problems = validate(net)
    if problems:
        raise CaseFormatError("; ".join(v.render() for v in problems))
    return net


def write_matpower_case(net: Network, name: str = "case_export") -> str:
    """Serialize a Network back to MATPOWER v2 text (round-trip safe)."""
    base = net.base_mva
    lines = [f"function mpc = {name}", "mpc.version = '2';", f"mpc.baseMVA = {base!r};"]

    lines.append("mpc.bus = [")
    for b in net.buses:
        lines.append(
            f"\t{b.id + 1}\t{_BUS_TYPE_FROM_KIND[b.bus_kind]}\t{b.p_load * base!r}"
            f"\t{b.q_load * base!r}\t0\t0\t1\t1\t0\t0\t1\t{b.v_max!r}\t{b.v_min!r};"
        )
    lines.append("];")

    lines.append("mpc.gen = [")
    for g in net.generators:
        lines.append(
            f"\t{g.bus + 1}\t0\t0\t{g.q_max * base!r}\t{g.q_min * base!r}\t1"
            f"\t{base!r}\t1\t{g.p_max * base!r}\t{g.p_min * base!r};"
        )
    lines.append("];")

    lines.append("mpc.branch = [")
    for br in net.branches:
        denom = br.g * br.g + br.b * br.b
        r, x = br.g / denom, br.b / denom
        rate = 0.0 if br.s_max is None else br.s_max * base
        status = 1 if br.in_service else 0
        lines.append(
            f"\t{br.from_bus + 1}\t{br.to_bus + 1}\t{r!r}\t{x!r}\t{br.b_charge!r}"
            f"\t{rate!r}\t0\t0\t0\t0\t{status}\t-360\t360;"
        )
    lines.append("];")

    lines.append("mpc.gencost = [")
    for g in net.generators:
        c = g.cost
        lines.append(
            f"\t2\t0\t0\t3\t{c.c2 / (base * base)!r}\t{c.c1 / base!r}\t{c.c0!r};"
        )
    lines.append("];")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate(net: Network) -> list[Violation]:
    """Collect every invariant violation; an empty list means the network is valid."""
    out: list[Violation] = []
    n = len(net.buses)

    for i, bus in enumerate(net.buses):
        if bus.id != i:
            out.append(Violation("BUS_INDEX", f"bus {bus.id}", f"expected dense index {i}"))
        if not (0 < bus.v_min <= bus.v_max):
            out.append(Violation(
                "VOLTAGE_BOUNDS", f"bus {bus.id}",
                f"need 0 < v_min <= v_max, got [{bus.v_min}, {bus.v_max}]"))
        if not (np.isfinite(bus.p_load) and np.isfinite(bus.q_load)):
            out.append(Violation("LOAD_FINITE", f"bus {bus.id}", "non-finite load"))

    slack_count = sum(1 for b in net.buses if b.bus_kind == SLACK)
    if slack_count != 1:
        out.append(Violation("SLACK_COUNT", "network", f"{slack_count} slack buses, need 1"))
    elif net.buses[net.slack_bus].bus_kind != SLACK:
        out.append(Violation("SLACK_MISMATCH", f"bus {net.slack_bus}",
                             "slack_bus field does not point at the slack bus"))
    if not any(g.bus == net.slack_bus for g in net.generators):
        out.append(Violation("SLACK_NO_GEN", f"bus {net.slack_bus}",
                             "slack bus has no generator"))

    seen_gen_bus = set()
    for g in net.generators:
        subj = f"bus {g.bus}"
        if not (0 <= g.bus < n):
            out.append(Violation("GEN_BUS", subj, "generator bus does not exist"))
            continue
        if g.bus in seen_gen_bus:
            out.append(Violation("GEN_DUPLICATE", subj, "more than one generator at bus"))
        seen_gen_bus.add(g.bus)
        if g.p_min > g.p_max:
            out.append(Violation("GEN_P_BOUNDS", subj, f"p_min {g.p_min} > p_max {g.p_max}"))
        if g.q_min > g.q_max:
            out.append(Violation("GEN_Q_BOUNDS", subj, f"q_min {g.q_min} > q_max {g.q_max}"))
        if g.cost.c2 < 0:
            out.append(Violation("COST_CONVEXITY", subj, f"c2 = {g.cost.c2} < 0"))
        elif g.cost.derivative(g.p_min) < 0 and g.cost.derivative(g.p_max) < 0:
            out.append(Violation("COST_DECREASING", subj,
                                 "cost decreasing on the whole dispatch range"))

    for br in net.branches:
        subj = f"branch {br.from_bus}-{br.to_bus}"
        if br.from_bus == br.to_bus:
            out.append(Violation("BRANCH_SELF_LOOP", subj, "from_bus equals to_bus"))
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            out.append(Violation("BRANCH_BUS", subj, "endpoint bus does not exist"))
        if br.s_max is not None and br.s_max <= 0:
            out.append(Violation("FLOW_LIMIT", subj, f"s_max = {br.s_max} not positive"))

    # connectivity over in-service branches
    if n > 0:
        adj = [[] for _ in range(n)]
        for br in net.branches:
            if br.in_service and 0 <= br.from_bus < n and 0 <= br.to_bus < n:
                adj[br.from_bus].append(br.to_bus)
                adj[br.to_bus].append(br.from_bus)
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        for i in range(n):
            if i not in seen:
                out.append(Violation("DISCONNECTED", f"bus {i}",
                                     "unreachable over in-service branches"))
    return out


def nominal_load(net: Network) -> LoadProfile:
    """Load profile copying each bus's stored demand."""
    return LoadProfile(p=net.p_load.copy(), q=net.q_load.copy())


def networks_equal(a: Network, b: Network, tol: float = 1e-12) -> bool:
    """Field-wise equality within tol; used by round-trip tests."""
    if a.base_mva != b.base_mva or a.slack_bus != b.slack_bus:
        return False
    if len(a.buses) != len(b.buses) or len(a.branches) != len(b.branches) \
            or len(a.generators) != len(b.generators):
        return False

    def close(x, y):
        return abs(x - y) <= tol * max(1.0, abs(x), abs(y))

    for ba, bb in zip(a.buses, b.buses):
        if ba.id != bb.id or ba.bus_kind != bb.bus_kind:
            return False
        if not all(close(getattr(ba, f), getattr(bb, f))
                   for f in ("v_min", "v_max", "p_load", "q_load")):
            return False
    for ra, rb in zip(a.branches, b.branches):
        if (ra.from_bus, ra.to_bus, ra.in_service) != (rb.from_bus, rb.to_bus, rb.in_service):
            return False
        if (ra.s_max is None) != (rb.s_max is None):
            return False
        if not all(close(getattr(ra, f), getattr(rb, f)) for f in ("g", "b", "b_charge")):
            return False
        if ra.s_max is not None and not close(ra.s_max, rb.s_max):
            return False
    for ga, gb in zip(a.generators, b.generators):
        if ga.bus != gb.bus:
            return False
        if not all(close(getattr(ga, f), getattr(gb, f))
                   for f in ("p_min", "p_max", "q_min", "q_max")):
            return False
        if not all(close(getattr(ga.cost, f), getattr(gb.cost, f)) for f in ("c2", "c1", "c0")):
            return False
    return True
