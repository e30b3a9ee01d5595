"""Power-flow physics and objective functions with analytic gradients.

Flow convention per directed branch entry (i -> j), admittance g - jb,
b_hat = b - 0.5*b_charge:

    P_ij = Vi^2 g  - Vi Vj (g cos(ti - tj) - b sin(ti - tj))
    Q_ij = Vi^2 bh - Vi Vj (b cos(ti - tj) + g sin(ti - tj))

All functions are pure; a Network can be shared across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import LoadProfile, Network


@dataclass
class OperatingPoint:
    """Voltage magnitudes and angles for all buses; slack angle is 0."""

    v: np.ndarray
    theta: np.ndarray

    def copy(self) -> "OperatingPoint":
        return OperatingPoint(self.v.copy(), self.theta.copy())


@dataclass
class GenDispatch:
    """Per-bus generator output; zero at buses without a generator."""

    p: np.ndarray
    q: np.ndarray


@dataclass
class DualVector:
    """Multipliers of the active/reactive balance constraints, one per bus."""

    mu_p: np.ndarray
    mu_q: np.ndarray


@dataclass
class BranchFlow:
    """Directed flows: entries [0, m) are from->to, [m, 2m) are to->from."""

    p_f: np.ndarray
    q_f: np.ndarray


def flat_start(net: Network) -> OperatingPoint:
    v = np.clip(np.ones(net.n_bus), net.v_min, net.v_max)
    return OperatingPoint(v=v, theta=np.zeros(net.n_bus))


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Wrap to [-pi, pi); flows are 2*pi periodic so this is a no-op physically."""
    return np.mod(theta + np.pi, 2.0 * np.pi) - np.pi


def _edge_terms(net: Network, v: np.ndarray, theta: np.ndarray):
    """Flows and their partials for every directed branch entry."""
    i, j = net.edge_from, net.edge_to
    g, b, bh = net.edge_g, net.edge_b, net.edge_b_hat
    dth = theta[i] - theta[j]
    c, s = np.cos(dth), np.sin(dth)
    vi, vj = v[i], v[j]
    vv = vi * vj
    gc_bs = g * c - b * s
    bc_gs = b * c + g * s
    p = vi * vi * g - vv * gc_bs
    q = vi * vi * bh - vv * bc_gs
    dp_dvi = 2.0 * vi * g - vj * gc_bs
    dp_dvj = -vi * gc_bs
    dp_dth = vv * (g * s + b * c)          # d/d theta_i; d/d theta_j is the negative
    dq_dvi = 2.0 * vi * bh - vj * bc_gs
    dq_dvj = -vi * bc_gs
    dq_dth = vv * (b * s - g * c)
    return p, q, dp_dvi, dp_dvj, dp_dth, dq_dvi, dq_dvj, dq_dth


def branch_flows(net: Network, x: OperatingPoint) -> BranchFlow:
    """Directed active/reactive flows on every in-service branch."""
    p, q, *_ = _edge_terms(net, x.v, x.theta)
    return BranchFlow(p_f=p, q_f=q)


def bus_injections(net: Network, x: OperatingPoint) -> tuple[np.ndarray, np.ndarray]:
    """Sum of outgoing directed flows at each bus."""
    flows = branch_flows(net, x)
    p_inj = np.zeros(net.n_bus)
    q_inj = np.zeros(net.n_bus)
    np.add.at(p_inj, net.edge_from, flows.p_f)
    np.add.at(q_inj, net.edge_from, flows.q_f)
    return p_inj, q_inj


def balance_residuals(net: Network, x: OperatingPoint, load: LoadProfile,
                      gen: GenDispatch) -> tuple[np.ndarray, np.ndarray]:
    """r[i] = demand + net flow out - generation; zero means balanced."""
    p_inj, q_inj = bus_injections(net, x)
    return load.p + p_inj - gen.p, load.q + q_inj - gen.q


def implied_dispatch(net: Network, x: OperatingPoint, load: LoadProfile) -> GenDispatch:
    """Dispatch that zeroes the balance residuals at generator buses."""
    p_inj, q_inj = bus_injections(net, x)
    mask = net.gen_mask
    return GenDispatch(
        p=np.where(mask, load.p + p_inj, 0.0),
        q=np.where(mask, load.q + q_inj, 0.0),
    )


def generation_cost(net: Network, gen: GenDispatch) -> float:
    """Total polynomial cost over generator buses."""
    p = gen.p[net.gen_mask]
    return float(np.sum(net.cost_c2[net.gen_mask] * p * p
                        + net.cost_c1[net.gen_mask] * p
                        + net.cost_c0[net.gen_mask]))


def _accumulate_gradient(net: Network, terms, wp: np.ndarray, wq: np.ndarray,
                         fp: np.ndarray | None = None,
                         fq: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule: gradient of sum(wp*p_inj + wq*q_inj + fp.P_e + fq.Q_e) wrt (v, theta)."""
    _, _, dp_dvi, dp_dvj, dp_dth, dq_dvi, dq_dvj, dq_dth = terms
    i, j = net.edge_from, net.edge_to
    ap = wp[i] if fp is None else wp[i] + fp
    aq = wq[i] if fq is None else wq[i] + fq
    gv = np.zeros(net.n_bus)
    gt = np.zeros(net.n_bus)
    np.add.at(gv, i, ap * dp_dvi + aq * dq_dvi)
    np.add.at(gv, j, ap * dp_dvj + aq * dq_dvj)
    edge_gt = ap * dp_dth + aq * dq_dth
    np.add.at(gt, i, edge_gt)
    np.add.at(gt, j, -edge_gt)
    return gv, gt


def _drop_slack(net: Network, gt: np.ndarray) -> np.ndarray:
    return np.delete(gt, net.slack_bus)


def merit_function(net: Network, x: OperatingPoint, load: LoadProfile, rho: float,
                   lam_p: np.ndarray | None = None, lam_q: np.ndarray | None = None,
                   eta: dict[str, np.ndarray] | None = None):
    """Augmented-Lagrangian merit over (v, theta) with implied generator dispatch.

    Balance at non-generator buses enters as an equality with multiplier lam
    and penalty rho; generator box limits and branch flow limits enter through
    the standard shifted quadratic for inequalities. With lam and eta zero this
    reduces to the plain penalized objective. Returns (value, grad) where grad
    stacks d/dv (n entries) then d/dtheta with the slack angle removed.
    """
    n = net.n_bus
    mask = net.gen_mask
    nonmask = ~mask
    if lam_p is None:
        lam_p = np.zeros(n)
    if lam_q is None:
        lam_q = np.zeros(n)
    if eta is None:
        eta = {}
    eta_pub = eta.get("p_ub", np.zeros(n))
    eta_plb = eta.get("p_lb", np.zeros(n))
    eta_qub = eta.get("q_ub", np.zeros(n))
    eta_qlb = eta.get("q_lb", np.zeros(n))
    eta_flow = eta.get("flow", np.zeros(len(net.edge_from)))

    terms = _edge_terms(net, x.v, x.theta)
    p_e, q_e = terms[0], terms[1]
    p_inj = np.zeros(n)
    q_inj = np.zeros(n)
    np.add.at(p_inj, net.edge_from, p_e)
    np.add.at(q_inj, net.edge_from, q_e)

    pg = load.p + p_inj     # implied dispatch where a generator exists
    qg = load.q + q_inj

    # cost of implied dispatch at generator buses
    pgm = pg[mask]
    value = float(np.sum(net.cost_c2[mask] * pgm * pgm + net.cost_c1[mask] * pgm
                         + net.cost_c0[mask]))
    wp = np.zeros(n)
    wq = np.zeros(n)
    wp[mask] = 2.0 * net.cost_c2[mask] * pgm + net.cost_c1[mask]

    # balance equalities at buses without a generator
    h_p = pg[nonmask]
    h_q = qg[nonmask]
    value += float(lam_p[nonmask] @ h_p + 0.5 * rho * h_p @ h_p)
    value += float(lam_q[nonmask] @ h_q + 0.5 * rho * h_q @ h_q)
    wp[nonmask] = lam_p[nonmask] + rho * h_p
    wq[nonmask] = lam_q[nonmask] + rho * h_q

    # generator box limits as shifted inequality penalties
    def ineq(gval, mult):
        active = np.maximum(0.0, mult + rho * gval)
        val = float(np.sum(active * active - mult * mult) / (2.0 * rho))
        return val, active

    for gval, mult, weight, sign in (
        (pg - net.gen_p_max, eta_pub, wp, 1.0),
        (net.gen_p_min - pg, eta_plb, wp, -1.0),
        (qg - net.gen_q_max, eta_qub, wq, 1.0),
        (net.gen_q_min - qg, eta_qlb, wq, -1.0),
    ):
        val, active = ineq(gval[mask], mult[mask])
        value += val
        weight[mask] += sign * active

    # apparent-power flow limits per directed entry
    limited = np.isfinite(net.edge_s_max)
    fp = np.zeros(len(p_e))
    fq = np.zeros(len(p_e))
    if np.any(limited):
        s2 = p_e[limited] ** 2 + q_e[limited] ** 2 - net.edge_s_max[limited] ** 2
        active = np.maximum(0.0, eta_flow[limited] + rho * s2)
        value += float(np.sum(active * active - eta_flow[limited] ** 2) / (2.0 * rho))
        fp[limited] = 2.0 * p_e[limited] * active
        fq[limited] = 2.0 * q_e[limited] * active

    gv, gt = _accumulate_gradient(net, terms, wp, wq, fp, fq)
    return value, np.concatenate([gv, _drop_slack(net, gt)])


def penalized_objective(net: Network, x: OperatingPoint, load: LoadProfile,
                        rho: float):
    """Cost of implied dispatch plus quadratic penalties on balance residuals
    at non-generator buses and on generator-box / flow-limit violations.

    Returns (value, grad) with grad stacked [d/dv, d/dtheta without slack].
    Voltage bounds are handled by the solver's box projection, not here.
    """
    return merit_function(net, x, load, rho)


def partial_lagrangian(net: Network, x: OperatingPoint, gen: GenDispatch,
                       load: LoadProfile, mu: DualVector):
    """Generation cost plus dual-weighted balance residuals (box and flow
    limits stay with the solver).

    Returns (value, grad) with grad stacked [d/dv (n), d/dtheta without slack
    (n-1), d/dp (n), d/dq (n)].
    """
    terms = _edge_terms(net, x.v, x.theta)
    p_inj = np.zeros(net.n_bus)
    q_inj = np.zeros(net.n_bus)
    np.add.at(p_inj, net.edge_from, terms[0])
    np.add.at(q_inj, net.edge_from, terms[1])

    mask = net.gen_mask
    pm = gen.p[mask]
    cost = float(np.sum(net.cost_c2[mask] * pm * pm + net.cost_c1[mask] * pm
                        + net.cost_c0[mask]))
    r_p = load.p + p_inj - gen.p
    r_q = load.q + q_inj - gen.q
    value = cost + float(mu.mu_p @ r_p + mu.mu_q @ r_q)

    gv, gt = _accumulate_gradient(net, terms, mu.mu_p, mu.mu_q)
    gp = -mu.mu_p.copy()
    gp[mask] += 2.0 * net.cost_c2[mask] * pm + net.cost_c1[mask]
    gq = -mu.mu_q.copy()
    return value, np.concatenate([gv, _drop_slack(net, gt), gp, gq])
