"""Training-data generation: perturbed loads, multi-start labeling, controlled
local/global mixes, and delimited-text persistence.

A Sample records one converged solution cluster for one load. Within a load's
cluster set the cheapest cluster has rank 0 and the label "global"; everything
else is a strictly local solution. Datasets are plain text so experiment
inputs stay auditable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .acopf import DualVector, GenDispatch, OperatingPoint
from .network import LoadProfile, Network, nominal_load
from .solver import CONVERGED, SolverConfig, multi_start

GLOBAL = "global"
LOCAL = "local"


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    load: LoadProfile
    point: OperatingPoint
    gen: GenDispatch
    duals: DualVector
    cost: float
    label: str
    cluster_rank: int


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 500
    load_variation_pct: float = 1.0
    local_fraction: float = 0.0
    train_fraction: float = 0.9
    seed: int = 0
    k_starts: int = 16

    def __post_init__(self):
        if self.n_samples < 10:
            raise ValueError("n_samples must be at least 10")
        if not 0.0 <= self.load_variation_pct <= 50.0:
            raise ValueError("load_variation_pct must lie in [0, 50]")
        if not 0.0 <= self.local_fraction <= 1.0:
            raise ValueError("local_fraction must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def generate_loads(net: Network, n: int, pct: float, seed: int) -> list[LoadProfile]:
    """Independent uniform perturbations of the nominal load.

    Every bus's p and q are drawn independently from
    [nominal*(1 - pct/100), nominal*(1 + pct/100)].
    """
    if pct < 0:
        raise ValueError("pct must be nonnegative")
    base = nominal_load(net)
    rng = np.random.default_rng(seed)
    width = pct / 100.0
    out = []
    for _ in range(n):
        fp = rng.uniform(1.0 - width, 1.0 + width, size=net.n_bus)
        fq = rng.uniform(1.0 - width, 1.0 + width, size=net.n_bus)
        out.append(LoadProfile(p=base.p * fp, q=base.q * fq))
    return out


def build_samples(net: Network, loads: list[LoadProfile], k_starts: int,
                  cfg: SolverConfig | None = None) -> tuple[list[Sample], int]:
    """Solve every load with multi-start and emit one Sample per cluster.

    Output is ordered by load index with each load's clusters contiguous and
    sorted by cost (rank 0 first). Loads where no start converges are skipped;
    the second return value counts them.
    """
    cfg = cfg or SolverConfig()
    samples: list[Sample] = []
    skipped = 0
    for load_index, load in enumerate(loads):
        clusters = multi_start(net, load, k_starts,
                               replace(cfg, seed=cfg.seed + 7919 * load_index))
        if not clusters:
            skipped += 1
            continue
        for rank, res in enumerate(clusters):
            samples.append(Sample(
                load=load,
                point=res.point,
                gen=res.gen,
                duals=res.duals,
                cost=res.cost,
                label=GLOBAL if rank == 0 else LOCAL,
                cluster_rank=rank,
            ))
    return samples, skipped


def _group_by_load(samples: list[Sample]) -> list[list[Sample]]:
    """Contiguous runs sharing an identical load are one load's cluster set."""
    groups: list[list[Sample]] = []
    for s in samples:
        if groups and np.array_equal(groups[-1][0].load.p, s.load.p) \
                and np.array_equal(groups[-1][0].load.q, s.load.q):
            groups[-1].append(s)
        else:
            groups.append([s])
    return groups


def mix(samples: list[Sample], local_fraction: float, seed: int) -> list[Sample]:
    """Keep one sample per load, hitting the requested share of local ones.

    A seeded permutation marks round(fraction * n_loads) loads for a local
    pick; marked loads take their worst-cost local cluster, everything else
    takes the global one. Loads missing the requested label fall back to the
    other, and the realized share must stay within two percentage points of
    the target once there are at least 500 loads.
    """
    if not 0.0 <= local_fraction <= 1.0:
        raise DatasetError("local_fraction must lie in [0, 1]")
    groups = _group_by_load(samples)
    n = len(groups)
    if n == 0:
        return []
    rng = np.random.default_rng(seed)
    want_local = np.zeros(n, dtype=bool)
    want_local[rng.permutation(n)[:round(local_fraction * n)]] = True

    chosen: list[Sample] = []
    realized_local = 0
    for flag, group in zip(want_local, groups):
        locals_ = [s for s in group if s.label == LOCAL]
        globals_ = [s for s in group if s.label == GLOBAL]
        if flag and locals_:
            pick = max(locals_, key=lambda s: s.cluster_rank)
        elif not flag and globals_:
            pick = globals_[0]
        else:
            pick = group[0] if not flag else max(group, key=lambda s: s.cluster_rank)
        chosen.append(pick)
        realized_local += pick.label == LOCAL
    if n >= 500 and abs(realized_local / n - local_fraction) > 0.02:
        raise DatasetError(
            f"insufficient samples to hit local fraction {local_fraction}: "
            f"realized {realized_local / n:.3f} over {n} loads")
    return chosen


def split(samples: list[Sample], train_fraction: float,
          seed: int) -> tuple[list[Sample], list[Sample]]:
    """Disjoint shuffled split with floor-exact sizes."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_train = int(np.floor(train_fraction * len(samples)))
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# Persistence: one header row, bus-major columns, repr-exact floats
# ---------------------------------------------------------------------------

_SCALAR_COLUMNS = ["cost", "label", "cluster_rank"]
_VECTOR_FIELDS = ["p_load", "q_load", "v", "theta", "pg", "qg", "mu_p", "mu_q"]


def _header(n: int) -> str:
    cols = [f"{f}_{i}" for f in _VECTOR_FIELDS for i in range(n)]
    return ",".join(cols + _SCALAR_COLUMNS)


def _sample_vectors(s: Sample) -> list[np.ndarray]:
    return [s.load.p, s.load.q, s.point.v, s.point.theta,
            s.gen.p, s.gen.q, s.duals.mu_p, s.duals.mu_q]


def write(samples: list[Sample], path, n_bus: int | None = None) -> None:
    """Write samples as delimited text; empty datasets still get a header."""
    if n_bus is None:
        if not samples:
            raise DatasetError("cannot infer bus count for an empty dataset")
        n_bus = len(samples[0].load.p)
    lines = [_header(n_bus)]
    for s in samples:
        fields = [repr(float(x)) for vec in _sample_vectors(s) for x in vec]
        fields += [repr(float(s.cost)), s.label, str(int(s.cluster_rank))]
        lines.append(",".join(fields))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read(path) -> list[Sample]:
    """Read a dataset written by write(); errors name the offending line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise DatasetError(f"{path}: empty file, expected a header row")
    header = lines[0].split(",")
    n_vec = len(header) - len(_SCALAR_COLUMNS)
    if n_vec <= 0 or n_vec % len(_VECTOR_FIELDS) != 0:
        raise DatasetError(f"{path}:1: unrecognized header")
    n = n_vec // len(_VECTOR_FIELDS)
    if header != _header(n).split(","):
        raise DatasetError(f"{path}:1: unrecognized header")

    samples = []
    expected = len(header)
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != expected:
            raise DatasetError(
                f"{path}:{ln}: expected {expected} columns, found {len(parts)}")
        label = parts[-2]
        if label not in (GLOBAL, LOCAL):
            raise DatasetError(f"{path}:{ln}: unknown label {label!r}")
        try:
            values = np.array([float(v) for v in parts[:-3]], dtype=float)
            cost = float(parts[-3])
            rank = int(parts[-1])
        except ValueError as exc:
            raise DatasetError(f"{path}:{ln}: malformed number: {exc}") from exc
        vecs = values.reshape(len(_VECTOR_FIELDS), n)
        samples.append(Sample(
            load=LoadProfile(p=vecs[0], q=vecs[1]),
            point=OperatingPoint(v=vecs[2], theta=vecs[3]),
            gen=GenDispatch(p=vecs[4], q=vecs[5]),
            duals=DualVector(mu_p=vecs[6], mu_q=vecs[7]),
            cost=cost,
            label=label,
            cluster_rank=rank,
        ))
    return samples
