"""End-to-end warm-start learning and the evaluation harness.

Two networks are trained from solved samples: the first regresses balance
multipliers from the load, the second regresses the dualized subproblem's
minimizer from load plus multipliers. At prediction time their composition
yields an operating point that initializes the full ACOPF solve.

The comparison baseline regresses generator setpoints from the load with a
sigmoid network whose output range is mapped onto the generator boxes; a
power-flow step recovers a feasible operating point, but its reported cost is
that of the predicted dispatch, which the recovery step does not alter.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import mlp
from .acopf import (
    DualVector,
    GenDispatch,
    OperatingPoint,
    flat_start,
    generation_cost,
    implied_dispatch,
)
from .dataset import Sample
from .network import LoadProfile, Network, write_matpower_case
from .solver import (
    CONVERGED,
    PowerFlowError,
    SolveResult,
    SolverConfig,
    multi_start,
    random_start,
    solve_acopf,
    solve_partial_lagrangian,
    solve_power_flow,
)

BUNDLE_VERSION = 1


class FingerprintMismatchError(ValueError):
    """A model or start point was produced for a different network."""


class LagrangianTargetError(RuntimeError):
    """Too many dualized subproblem solves failed while building targets."""


def network_fingerprint(net: Network) -> str:
    """Stable hash of the network, via its canonical case-text serialization."""
    return hashlib.sha256(write_matpower_case(net).encode("utf-8")).hexdigest()


@dataclass
class TrainedModel:
    params: mlp.MlpParams
    scalers: tuple[mlp.Scaler, mlp.Scaler]
    history: dict

    def predict(self, x: np.ndarray) -> np.ndarray:
        return mlp.predict(self.params, self.scalers, x)


@dataclass
class TrainedPipeline:
    dual_net: TrainedModel          # load (2n) -> multipliers (2n)
    lagrangian_net: TrainedModel    # load + multipliers (4n) -> v, theta (2n-1)
    net_fingerprint: str


def _load_features(samples: list[Sample]) -> np.ndarray:
    return np.array([np.concatenate([s.load.p, s.load.q]) for s in samples])


def _dual_targets(samples: list[Sample]) -> np.ndarray:
    return np.array([np.concatenate([s.duals.mu_p, s.duals.mu_q]) for s in samples])


def _point_vector(net: Network, x: OperatingPoint) -> np.ndarray:
    return np.concatenate([x.v, np.delete(x.theta, net.slack_bus)])


def train_dual_net(net: Network, train_samples: list[Sample],
                   cfg: mlp.TrainConfig) -> TrainedModel:
    """Fit the load-to-multipliers regressor (relu hidden, linear output)."""
    x = _load_features(train_samples)
    y = _dual_targets(train_samples)
    params, scalers, history = mlp.train(x, y, cfg)
    return TrainedModel(params=params, scalers=scalers, history=history)


def lagrangian_targets(net: Network, samples: list[Sample],
                       solver_cfg: SolverConfig,
                       cache: dict | None = None,
                       max_failure_fraction: float = 0.05):
    """Dualized-subproblem minimizers for each sample's own multipliers.

    Returns (inputs, targets, kept_indices). Failed solves are tolerated up
    to max_failure_fraction of the samples, then abort with diagnostics.
    """
    cache = cache if cache is not None else {}
    inputs, targets, kept = [], [], []
    failures = []
    for idx, s in enumerate(samples):
        key = (s.load.p.tobytes(), s.load.q.tobytes(),
               s.duals.mu_p.tobytes(), s.duals.mu_q.tobytes())
        try:
            if key in cache:
                point = cache[key]
            else:
                point, _ = solve_partial_lagrangian(net, s.load, s.duals,
                                                    cfg=solver_cfg)
                cache[key] = point
        except Exception as exc:   # noqa: BLE001 - collected as diagnostics
            failures.append((idx, str(exc)))
            continue
        inputs.append(np.concatenate([s.load.p, s.load.q, s.duals.mu_p, s.duals.mu_q]))
        targets.append(_point_vector(net, point))
        kept.append(idx)
    if failures and len(failures) > max_failure_fraction * len(samples):
        detail = "; ".join(f"sample {i}: {msg}" for i, msg in failures[:5])
        raise LagrangianTargetError(
            f"{len(failures)}/{len(samples)} dualized solves failed: {detail}")
    return np.array(inputs), np.array(targets), kept


def train_lagrangian_net(net: Network, train_samples: list[Sample],
                         solver_cfg: SolverConfig, cfg: mlp.TrainConfig,
                         cache: dict | None = None) -> TrainedModel:
    """Fit the (load, multipliers) to minimizer regressor on recomputed targets."""
    x, y, _ = lagrangian_targets(net, train_samples, solver_cfg, cache)
    params, scalers, history = mlp.train(x, y, cfg)
    return TrainedModel(params=params, scalers=scalers, history=history)


def train_pipeline(net: Network, train_samples: list[Sample],
                   solver_cfg: SolverConfig, cfg: mlp.TrainConfig,
                   cache: dict | None = None) -> TrainedPipeline:
    dual = train_dual_net(net, train_samples, cfg)
    lagr = train_lagrangian_net(net, train_samples, solver_cfg,
                                replace(cfg, seed=cfg.seed + 1), cache)
    return TrainedPipeline(dual_net=dual, lagrangian_net=lagr,
                           net_fingerprint=network_fingerprint(net))


def predict_warm_start(pipeline: TrainedPipeline, net: Network,
                       load: LoadProfile) -> OperatingPoint:
    """Compose the two regressors into a start point.

    Voltages are clipped into their bounds and the slack angle is reset to
    zero; the mapping is pure, so equal loads give equal starts.
    """
    if pipeline.net_fingerprint != network_fingerprint(net):
        raise FingerprintMismatchError("pipeline was trained for a different network")
    features = np.concatenate([load.p, load.q])
    mu = pipeline.dual_net.predict(features)
    out = pipeline.lagrangian_net.predict(np.concatenate([features, mu]))
    n = net.n_bus
    v = np.clip(out[:n], net.v_min, net.v_max)
    theta = np.insert(out[n:], net.slack_bus, 0.0)
    return OperatingPoint(v=v, theta=theta)


def solve_with_warm_start(net: Network, load: LoadProfile,
                          pipeline: TrainedPipeline,
                          cfg: SolverConfig | None = None) -> SolveResult:
    """Algorithm: predict a start from the two networks, then solve the ACOPF."""
    start = predict_warm_start(pipeline, net, load)
    res = solve_acopf(net, load, start, cfg)
    res.start_type = "warm"
    return res


# ---------------------------------------------------------------------------
# Regression baseline: load -> generator setpoints, feasibility by power flow
# ---------------------------------------------------------------------------

@dataclass
class BaselineModel:
    model: TrainedModel
    net_fingerprint: str


def _baseline_boxes(net: Network) -> tuple[np.ndarray, np.ndarray]:
    gb = net.gen_buses
    lo = np.concatenate([net.gen_p_min[gb], net.v_min[gb]])
    hi = np.concatenate([net.gen_p_max[gb], net.v_max[gb]])
    return lo, hi


def baseline_train(net: Network, train_samples: list[Sample],
                   cfg: mlp.TrainConfig) -> BaselineModel:
    """Sigmoid-everywhere regressor from load to generator P and V setpoints.

    The sigmoid output range is mapped onto the setpoint boxes, which keeps
    raw predictions inside the generator limits by construction.
    """
    gb = net.gen_buses
    x = _load_features(train_samples)
    y = np.array([np.concatenate([s.gen.p[gb], s.point.v[gb]])
                  for s in train_samples])
    lo, hi = _baseline_boxes(net)
    params, scalers, history = mlp.train(
        x, y, cfg, activation="sigmoid", output_activation="sigmoid",
        y_scaler=mlp.Scaler.box(lo, hi))
    return BaselineModel(model=TrainedModel(params, scalers, history),
                         net_fingerprint=network_fingerprint(net))


def baseline_predict(baseline: BaselineModel, net: Network,
                     load: LoadProfile) -> SolveResult:
    """Predict setpoints, recover a feasible point by power flow, report the
    predicted dispatch cost (the power-flow step does not change it)."""
    if baseline.net_fingerprint != network_fingerprint(net):
        raise FingerprintMismatchError("baseline was trained for a different network")
    t0 = time.perf_counter()
    gb = net.gen_buses
    out = baseline.model.predict(np.concatenate([load.p, load.q]))
    n_gen = len(gb)
    p_pred = np.zeros(net.n_bus)
    vm = np.ones(net.n_bus)
    p_pred[gb] = np.clip(out[:n_gen], net.gen_p_min[gb], net.gen_p_max[gb])
    vm[gb] = np.clip(out[n_gen:], net.v_min[gb], net.v_max[gb])

    status = CONVERGED
    iterations = 0
    try:
        point = solve_power_flow(net, load, p_pred, vm, flat_start(net))
        recovered = implied_dispatch(net, point, load)
        gen = GenDispatch(p=p_pred.copy(), q=recovered.q)
    except PowerFlowError:
        status = "power_flow_failed"
        point = flat_start(net)
        gen = GenDispatch(p=p_pred.copy(), q=np.zeros(net.n_bus))

    n = net.n_bus
    return SolveResult(
        point=point,
        gen=gen,
        duals=DualVector(mu_p=np.zeros(n), mu_q=np.zeros(n)),
        cost=generation_cost(net, gen),
        status=status,
        iterations=iterations,
        wall_time=time.perf_counter() - t0,
        start_type="baseline",
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    instance: int
    method: str
    cost: float
    ratio: float
    iterations: int
    wall_time: float
    status: str


@dataclass
class EvalReport:
    records: list[EvalRecord]
    mean_ratio: dict[str, float]
    mean_iterations: dict[str, float]
    iteration_speedup: float        # warm vs random, from iteration counts
    wall_time_speedup: float        # warm vs random, from measured seconds

    def table(self, include_wall_time: bool = False) -> str:
        """Delimited per-instance table; wall time is opt-in because measured
        seconds are not reproducible across runs."""
        cols = ["instance", "method", "cost", "ratio", "iterations", "status"]
        if include_wall_time:
            cols.insert(5, "wall_time")
        lines = [",".join(cols)]
        for r in self.records:
            row = [str(r.instance), r.method, repr(r.cost), repr(r.ratio),
                   str(r.iterations), r.status]
            if include_wall_time:
                row.insert(5, repr(r.wall_time))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def plot_data(self) -> str:
        """x = instance index, y = one ratio column per method."""
        methods = sorted({r.method for r in self.records})
        by_key = {(r.instance, r.method): r for r in self.records}
        instances = sorted({r.instance for r in self.records})
        lines = [",".join(["instance"] + [f"{m}_ratio" for m in methods])]
        for i in instances:
            row = [str(i)]
            for m in methods:
                rec = by_key.get((i, m))
                row.append(repr(rec.ratio) if rec else "nan")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = []
        for m in sorted(self.mean_ratio):
            lines.append(f"mean_ratio {m} = {self.mean_ratio[m]!r}")
        for m in sorted(self.mean_iterations):
            lines.append(f"mean_iterations {m} = {self.mean_iterations[m]!r}")
        lines.append(f"iteration_speedup warm_vs_random = {self.iteration_speedup!r}")
        lines.append(f"wall_time_speedup warm_vs_random = {self.wall_time_speedup!r}")
        return "\n".join(lines) + "\n"


def evaluate(net: Network, test_loads: list[LoadProfile],
             pipeline: TrainedPipeline, baseline: BaselineModel | None,
             cfg: SolverConfig | None = None, k_reference: int = 16) -> EvalReport:
    """Per test load: multi-start reference, warm-started solve, baseline
    prediction, and one random-start solve.

    Ratios divide by the best cost any solver found for that instance (the
    multi-start reference, improved by the warm/random solves when they find
    something cheaper). The baseline's predicted cost is not a solver point
    and may fall below the reference.
    """
    cfg = cfg or SolverConfig()
    records: list[EvalRecord] = []
    for idx, load in enumerate(test_loads):
        inst_cfg = replace(cfg, seed=cfg.seed + 31 * idx + 1)
        clusters = multi_start(net, load, k_reference, inst_cfg)

        warm = solve_with_warm_start(net, load, pipeline, inst_cfg)
        rng = np.random.default_rng(inst_cfg.seed + 13)
        rand = solve_acopf(net, load, random_start(net, rng, cfg.start_dist), inst_cfg)
        rand.start_type = "random"

        ref_candidates = [c.cost for c in clusters]
        ref_candidates += [r.cost for r in (warm, rand) if r.status == CONVERGED]
        if not ref_candidates:
            continue
        ref = min(ref_candidates)

        rows = [("reference", min(ref_candidates), 0, 0.0, CONVERGED),
                ("warm", warm.cost, warm.iterations, warm.wall_time, warm.status),
                ("random", rand.cost, rand.iterations, rand.wall_time, rand.status)]
        if baseline is not None:
            base = baseline_predict(baseline, net, load)
            rows.append(("baseline", base.cost, base.iterations, base.wall_time,
                         base.status))
        for method, cost, iters, wall, status in rows:
            records.append(EvalRecord(
                instance=idx, method=method, cost=cost,
                ratio=cost / ref if ref != 0 else np.nan,
                iterations=iters, wall_time=wall, status=status))

    def _mean(metric, method):
        vals = [getattr(r, metric) for r in records if r.method == method]
        return float(np.mean(vals)) if vals else float("nan")

    methods = sorted({r.method for r in records})
    mean_ratio = {m: _mean("ratio", m) for m in methods}
    mean_iter = {m: _mean("iterations", m) for m in methods}
    it_w, it_r = mean_iter.get("warm", np.nan), mean_iter.get("random", np.nan)
    wt_w, wt_r = _mean("wall_time", "warm"), _mean("wall_time", "random")
    return EvalReport(
        records=records,
        mean_ratio=mean_ratio,
        mean_iterations=mean_iter,
        iteration_speedup=float(1.0 - it_w / it_r) if it_r else float("nan"),
        wall_time_speedup=float(1.0 - wt_w / wt_r) if wt_r else float("nan"),
    )


# ---------------------------------------------------------------------------
# Bundle serialization
# ---------------------------------------------------------------------------

def save_bundle(pipeline: TrainedPipeline,
                baseline: BaselineModel | None = None) -> bytes:
    payload = {
        "bundle_version": BUNDLE_VERSION,
        "net_fingerprint": pipeline.net_fingerprint,
        "dual_net": mlp.to_payload(pipeline.dual_net.params,
                                   pipeline.dual_net.scalers),
        "lagrangian_net": mlp.to_payload(pipeline.lagrangian_net.params,
                                         pipeline.lagrangian_net.scalers),
    }
    if baseline is not None:
        payload["baseline"] = mlp.to_payload(baseline.model.params,
                                             baseline.model.scalers)
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def load_bundle(blob: bytes) -> tuple[TrainedPipeline, BaselineModel | None]:
    try:
        payload = json.loads(blob.decode("utf-8"))
        version = int(payload["bundle_version"])
        if version > BUNDLE_VERSION:
            raise mlp.MlpFormatError(f"unsupported bundle version {version}")
        fingerprint = payload["net_fingerprint"]
        dual = TrainedModel(*mlp.from_payload(payload["dual_net"]), history={})
        lagr = TrainedModel(*mlp.from_payload(payload["lagrangian_net"]), history={})
    except mlp.MlpFormatError:
        raise
    except (KeyError, TypeError, ValueError, UnicodeDecodeError,
            json.JSONDecodeError) as exc:
        raise mlp.MlpFormatError(f"corrupt bundle: {exc}") from exc
    pipeline = TrainedPipeline(dual_net=dual, lagrangian_net=lagr,
                               net_fingerprint=fingerprint)
    baseline = None
    if "baseline" in payload:
        baseline = BaselineModel(
            model=TrainedModel(*mlp.from_payload(payload["baseline"]), history={}),
            net_fingerprint=fingerprint)
    return pipeline, baseline
