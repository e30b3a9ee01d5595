"""Nonlinear solvers: full ACOPF, the dualized subproblem, and power flow.

The ACOPF solver is an augmented-Lagrangian method: an outer loop maintains
multiplier estimates for the balance equalities (non-generator buses) and the
generator box / flow-limit inequalities, while scipy's L-BFGS-B minimizes the
merit surface over (v, theta) with voltage bounds handled by box projection.
The converged multiplier estimates double as the dual labels used for
training, mapped back to per-bus balance multipliers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .acopf import (
    DualVector,
    GenDispatch,
    OperatingPoint,
    balance_residuals,
    bus_injections,
    flat_start,
    generation_cost,
    implied_dispatch,
    merit_function,
    wrap_angles,
    _accumulate_gradient,
    _drop_slack,
    _edge_terms,
)
from .network import LoadProfile, Network

CONVERGED = "converged"
MAX_ITER = "max_iter"
DIVERGED = "diverged"

_RHO_CAP = 1e12
_DIVERGENCE_NORM = 1e6


class SolveError(RuntimeError):
    """A solve that is expected to succeed did not."""


class PowerFlowError(SolveError):
    """Newton-Raphson failed (singular Jacobian or no convergence)."""


@dataclass(frozen=True)
class SolverConfig:
    rho_init: float = 1e3
    rho_growth: float = 10.0
    tol_residual: float = 1e-9
    tol_grad: float = 1e-9
    max_outer: int = 30
    max_inner: int = 400
    seed: int = 0
    start_dist: str = "uniform"   # or "gaussian"

    def __post_init__(self):
        if min(self.rho_init, self.tol_residual, self.tol_grad) <= 0:
            raise ValueError("tolerances and rho_init must be positive")
        if self.rho_growth <= 1:
            raise ValueError("rho_growth must exceed 1")
        if self.start_dist not in ("uniform", "gaussian"):
            raise ValueError(f"unknown start_dist {self.start_dist!r}")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SolverConfig":
        kwargs = {}
        for f in ("rho_init", "rho_growth", "tol_residual", "tol_grad"):
            if f in mapping:
                kwargs[f] = float(mapping[f])
        for f in ("max_outer", "max_inner", "seed"):
            if f in mapping:
                kwargs[f] = int(mapping[f])
        if "start_dist" in mapping:
            kwargs["start_dist"] = str(mapping["start_dist"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "SolverConfig":
        return cls.from_mapping(load_key_value_file(path))


def load_key_value_file(path) -> dict:
    """Parse a 'key = value' config file; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


@dataclass
class SolveResult:
    point: OperatingPoint
    gen: GenDispatch
    duals: DualVector
    cost: float
    status: str
    iterations: int            # cumulative inner (quasi-Newton) iterations
    wall_time: float
    outer_iterations: int = 0
    start_type: str = "flat"


def _pack(net: Network, x: OperatingPoint) -> np.ndarray:
    return np.concatenate([x.v, np.delete(x.theta, net.slack_bus)])


def _unpack(net: Network, z: np.ndarray) -> OperatingPoint:
    n = net.n_bus
    theta = np.insert(z[n:], net.slack_bus, 0.0)
    return OperatingPoint(v=z[:n].copy(), theta=theta)


def _bounds(net: Network) -> list[tuple[float, float]]:
    bounds = [(lo, hi) for lo, hi in zip(net.v_min, net.v_max)]
    bounds += [(-np.inf, np.inf)] * (net.n_bus - 1)
    return bounds


def _inner_minimize(net, load, z0, rho, lam_p, lam_q, eta, cfg) -> tuple[np.ndarray, int]:
    def fun(z):
        x = _unpack(net, z)
        return merit_function(net, x, load, rho, lam_p, lam_q, eta)

    res = minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=_bounds(net),
                   options={"maxiter": cfg.max_inner, "ftol": 1e-16,
                            "gtol": cfg.tol_grad, "maxcor": 20})
    return res.x, int(res.nit)


def _constraint_values(net: Network, x: OperatingPoint, load: LoadProfile):
    p_inj, q_inj = bus_injections(net, x)
    pg = load.p + p_inj
    qg = load.q + q_inj
    mask = net.gen_mask
    h_p = np.where(mask, 0.0, pg)
    h_q = np.where(mask, 0.0, qg)
    g_pub = np.where(mask, pg - net.gen_p_max, 0.0)
    g_plb = np.where(mask, net.gen_p_min - pg, 0.0)
    g_qub = np.where(mask, qg - net.gen_q_max, 0.0)
    g_qlb = np.where(mask, net.gen_q_min - qg, 0.0)

    terms = _edge_terms(net, x.v, x.theta)
    s2 = terms[0] ** 2 + terms[1] ** 2
    limited = np.isfinite(net.edge_s_max)
    g_flow = np.where(limited, s2 - net.edge_s_max**2, -1.0)
    return h_p, h_q, g_pub, g_plb, g_qub, g_qlb, g_flow


def solve_acopf(net: Network, load: LoadProfile, init: OperatingPoint | None = None,
                cfg: SolverConfig | None = None) -> SolveResult:
    """Augmented-Lagrangian ACOPF solve from a given initialization.

    Returns one KKT point reachable from init; its duals field carries the
    final per-bus balance multiplier estimates. At generator buses the balance
    constraint is eliminated by substitution, so the balance multiplier is
    recovered as c'(Pg) plus the net box-limit multiplier.
    """
    cfg = cfg or SolverConfig()
    if init is None:
        init = flat_start(net)
    t0 = time.perf_counter()
    n = net.n_bus
    z = _pack(net, init)
    lam_p = np.zeros(n)
    lam_q = np.zeros(n)
    eta = {
        "p_ub": np.zeros(n), "p_lb": np.zeros(n),
        "q_ub": np.zeros(n), "q_lb": np.zeros(n),
        "flow": np.zeros(len(net.edge_from)),
    }
    rho = cfg.rho_init
    inner_total = 0
    status = MAX_ITER
    prev_viol = np.inf
    outer_done = 0

    for outer in range(cfg.max_outer):
        z, nit = _inner_minimize(net, load, z, rho, lam_p, lam_q, eta, cfg)
        inner_total += nit
        outer_done = outer + 1
        x = _unpack(net, z)
        h_p, h_q, g_pub, g_plb, g_qub, g_qlb, g_flow = _constraint_values(net, x, load)

        lam_p = lam_p + rho * h_p
        lam_q = lam_q + rho * h_q
        eta["p_ub"] = np.maximum(0.0, eta["p_ub"] + rho * g_pub)
        eta["p_lb"] = np.maximum(0.0, eta["p_lb"] + rho * g_plb)
        eta["q_ub"] = np.maximum(0.0, eta["q_ub"] + rho * g_qub)
        eta["q_lb"] = np.maximum(0.0, eta["q_lb"] + rho * g_qlb)
        eta["flow"] = np.maximum(0.0, eta["flow"] + rho * g_flow)

        viol = max(
            np.max(np.abs(h_p)), np.max(np.abs(h_q)),
            np.max(np.maximum(0.0, g_pub), initial=0.0),
            np.max(np.maximum(0.0, g_plb), initial=0.0),
            np.max(np.maximum(0.0, g_qub), initial=0.0),
            np.max(np.maximum(0.0, g_qlb), initial=0.0),
            np.max(np.maximum(0.0, g_flow), initial=0.0),
        )
        if not np.isfinite(viol) or viol > _DIVERGENCE_NORM:
            status = DIVERGED
            break
        if viol <= cfg.tol_residual:
            status = CONVERGED
            break
        if viol > 0.25 * prev_viol:
            rho = min(rho * cfg.rho_growth, _RHO_CAP)
        prev_viol = viol

    x = _unpack(net, z)
    x.theta = wrap_angles(x.theta)
    x.theta[net.slack_bus] = 0.0
    gen = implied_dispatch(net, x, load)
    mask = net.gen_mask
    mu_p = np.where(mask,
                    2.0 * net.cost_c2 * gen.p + net.cost_c1
                    + eta["p_ub"] - eta["p_lb"],
                    lam_p)
    mu_q = np.where(mask, eta["q_ub"] - eta["q_lb"], lam_q)
    return SolveResult(
        point=x,
        gen=gen,
        duals=DualVector(mu_p=mu_p, mu_q=mu_q),
        cost=generation_cost(net, gen),
        status=status,
        iterations=inner_total,
        wall_time=time.perf_counter() - t0,
        outer_iterations=outer_done,
    )


def closed_form_dispatch(net: Network, mu: DualVector) -> GenDispatch:
    """Per-bus minimizer of cost minus dual revenue over the generator box.

    Quadratic costs give Pg = clip((mu_p - c1) / (2 c2), p_min, p_max); a
    linear cost sends Pg to whichever bound the sign of (c1 - mu_p) prefers.
    Qg carries no cost, so it sits at q_max when mu_q > 0, else q_min.
    """
    mask = net.gen_mask
    with np.errstate(divide="ignore", invalid="ignore"):
        interior = (mu.mu_p - net.cost_c1) / (2.0 * net.cost_c2)
    linear = np.where(mu.mu_p > net.cost_c1, net.gen_p_max, net.gen_p_min)
    p = np.where(net.cost_c2 > 0.0,
                 np.clip(np.nan_to_num(interior, nan=0.0, posinf=0.0, neginf=0.0),
                         net.gen_p_min, net.gen_p_max),
                 linear)
    q = np.where(mu.mu_q > 0.0, net.gen_q_max, net.gen_q_min)
    return GenDispatch(p=np.where(mask, p, 0.0), q=np.where(mask, q, 0.0))


def solve_partial_lagrangian(net: Network, load: LoadProfile, mu: DualVector,
                             init: OperatingPoint | None = None,
                             cfg: SolverConfig | None = None
                             ) -> tuple[OperatingPoint, GenDispatch]:
    """Minimize the dualized objective subject to the box and flow limits.

    The dispatch block separates and is solved in closed form per bus; the
    (v, theta) block minimizes the dual-weighted flow terms with voltage box
    projection and a quadratic flow-limit penalty at rho_init.
    """
    cfg = cfg or SolverConfig()
    if init is None:
        init = flat_start(net)
    gen = closed_form_dispatch(net, mu)
    rho = cfg.rho_init
    limited = np.isfinite(net.edge_s_max)

    def fun(z):
        x = _unpack(net, z)
        terms = _edge_terms(net, x.v, x.theta)
        p_inj = np.zeros(net.n_bus)
        q_inj = np.zeros(net.n_bus)
        np.add.at(p_inj, net.edge_from, terms[0])
        np.add.at(q_inj, net.edge_from, terms[1])
        value = float(mu.mu_p @ (load.p + p_inj) + mu.mu_q @ (load.q + q_inj))
        fp = np.zeros(len(net.edge_from))
        fq = np.zeros(len(net.edge_from))
        if np.any(limited):
            s2 = terms[0][limited] ** 2 + terms[1][limited] ** 2 \
                - net.edge_s_max[limited] ** 2
            active = rho * np.maximum(0.0, s2)
            value += float(np.sum(np.maximum(0.0, s2) * active)) / 2.0
            fp[limited] = 2.0 * terms[0][limited] * active
            fq[limited] = 2.0 * terms[1][limited] * active
        gv, gt = _accumulate_gradient(net, terms, mu.mu_p, mu.mu_q, fp, fq)
        return value, np.concatenate([gv, _drop_slack(net, gt)])

    res = minimize(fun, _pack(net, init), jac=True, method="L-BFGS-B",
                   bounds=_bounds(net),
                   options={"maxiter": cfg.max_inner, "ftol": 1e-16,
                            "gtol": cfg.tol_grad, "maxcor": 20})
    if not np.all(np.isfinite(res.x)):
        raise SolveError("partial Lagrangian minimization diverged")
    if res.status == 1:   # hit maxiter
        raise SolveError("partial Lagrangian minimization exceeded max_inner")
    x = _unpack(net, res.x)
    x.theta = wrap_angles(x.theta)
    x.theta[net.slack_bus] = 0.0
    return x, gen


def solve_power_flow(net: Network, load: LoadProfile, fixed_p: np.ndarray,
                     fixed_vm: np.ndarray, init: OperatingPoint | None = None,
                     tol: float = 1e-8, max_iter: int = 60) -> OperatingPoint:
    """Newton-Raphson power flow with the standard slack/PV/PQ split.

    fixed_p holds generator active outputs (used at non-slack generator
    buses); fixed_vm holds voltage magnitude setpoints (used at every
    generator bus, slack included). Raises PowerFlowError on a singular
    Jacobian or non-convergence.
    """
    n = net.n_bus
    mask = net.gen_mask
    slack = net.slack_bus
    pv = np.flatnonzero(mask & (np.arange(n) != slack))
    pq = np.flatnonzero(~mask)
    nonslack = np.concatenate([pv, pq])
    nonslack.sort()

    v = np.where(mask, fixed_vm, init.v if init is not None else 1.0).astype(float)
    theta = (init.theta.copy() if init is not None else np.zeros(n))
    theta[slack] = 0.0

    p_spec = np.where(mask, fixed_p, 0.0) - load.p
    q_spec = -load.q

    for _ in range(max_iter):
        x = OperatingPoint(v=v, theta=theta)
        p_inj, q_inj = bus_injections(net, x)
        mis_p = p_spec[nonslack] - p_inj[nonslack]
        mis_q = q_spec[pq] - q_inj[pq]
        mismatch = np.concatenate([mis_p, mis_q])
        if not np.all(np.isfinite(mismatch)):
            raise PowerFlowError("power flow produced non-finite mismatch")
        if np.max(np.abs(mismatch)) < tol:
            theta = wrap_angles(theta)
            theta[slack] = 0.0
            return OperatingPoint(v=v, theta=theta)

        dp_dth, dp_dv, dq_dth, dq_dv = _injection_jacobian(net, v, theta)
        jac = np.block([
            [dp_dth[np.ix_(nonslack, nonslack)], dp_dv[np.ix_(nonslack, pq)]],
            [dq_dth[np.ix_(pq, nonslack)], dq_dv[np.ix_(pq, pq)]],
        ])
        try:
            step = np.linalg.solve(jac, mismatch)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("singular power-flow Jacobian") from exc
        theta[nonslack] += step[:len(nonslack)]
        v[pq] += step[len(nonslack):]
    raise PowerFlowError(f"power flow did not converge in {max_iter} iterations")


def _injection_jacobian(net: Network, v: np.ndarray, theta: np.ndarray):
    """Dense partial derivatives of bus injections wrt angles and magnitudes."""
    n = net.n_bus
    terms = _edge_terms(net, v, theta)
    _, _, dp_dvi, dp_dvj, dp_dth_e, dq_dvi, dq_dvj, dq_dth_e = terms
    i, j = net.edge_from, net.edge_to
    dp_dth = np.zeros((n, n))
    dp_dv = np.zeros((n, n))
    dq_dth = np.zeros((n, n))
    dq_dv = np.zeros((n, n))
    np.add.at(dp_dth, (i, i), dp_dth_e)
    np.add.at(dp_dth, (i, j), -dp_dth_e)
    np.add.at(dp_dv, (i, i), dp_dvi)
    np.add.at(dp_dv, (i, j), dp_dvj)
    np.add.at(dq_dth, (i, i), dq_dth_e)
    np.add.at(dq_dth, (i, j), -dq_dth_e)
    np.add.at(dq_dv, (i, i), dq_dvi)
    np.add.at(dq_dv, (i, j), dq_dvj)
    return dp_dth, dp_dv, dq_dth, dq_dv


def random_start(net: Network, rng: np.random.Generator,
                 dist: str = "uniform") -> OperatingPoint:
    """Random initialization: uniform in the voltage box with angles in
    [-pi/2, pi/2], or the Gaussian alternative around a flat profile."""
    n = net.n_bus
    if dist == "uniform":
        v = rng.uniform(net.v_min, net.v_max)
        theta = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    else:
        v = np.clip(1.0 + 0.1 * rng.standard_normal(n), net.v_min, net.v_max)
        theta = (np.pi / 4) * rng.standard_normal(n)
    theta[net.slack_bus] = 0.0
    return OperatingPoint(v=v, theta=theta)


def cluster_results(results: list[SolveResult], cost_gap: float = 1e-4,
                    point_gap: float = 1e-3) -> list[SolveResult]:
    """Group converged solves into distinct solutions.

    Two results coincide when their costs agree within a relative gap and the
    stacked (v, theta) points agree in the infinity norm. One representative
    (the cheapest member) survives per cluster; clusters come back sorted by
    cost, so index 0 is the global candidate.
    """
    reps: list[SolveResult] = []
    for res in sorted(results, key=lambda r: r.cost):
        placed = False
        for rep in reps:
            close_cost = abs(res.cost - rep.cost) <= cost_gap * max(1.0, abs(rep.cost))
            dist = max(np.max(np.abs(res.point.v - rep.point.v)),
                       np.max(np.abs(res.point.theta - rep.point.theta)))
            if close_cost and dist <= point_gap:
                placed = True
                break
        if not placed:
            reps.append(res)
    return reps


def multi_start(net: Network, load: LoadProfile, k: int,
                cfg: SolverConfig | None = None) -> list[SolveResult]:
    """Solve from a flat start plus k-1 random starts and cluster the results.

    Non-converged runs are dropped; the returned representatives are sorted
    ascending by cost (first element is the global candidate). Deterministic
    for a fixed cfg.seed.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    cfg = cfg or SolverConfig()
    rng = np.random.default_rng(cfg.seed)
    results = []
    for start_index in range(k):
        if start_index == 0:
            init = flat_start(net)
            start_type = "flat"
        else:
            init = random_start(net, rng, cfg.start_dist)
            start_type = "random"
        res = solve_acopf(net, load, init, cfg)
        res.start_type = start_type
        if res.status == CONVERGED:
            results.append(res)
    return cluster_results(results)
