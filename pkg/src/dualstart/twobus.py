"""Analytic 2-bus study: a slack generator feeds a load of l over one line
with admittance g - jb, both voltages pinned at 1 p.u. and reactive power
ignored. The single decision variable is the angle difference theta, making
every landscape question answerable by 1-D bracketing. The rest of the repo
uses these functions as its geometric oracle.

Generation as a function of theta:  g - g*cos(theta) + b*sin(theta)
Load balance residual:              l + g - g*cos(theta) - b*sin(theta)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    GENERATOR,
    SLACK,
    Branch,
    Bus,
    CostPolynomial,
    Generator,
    Network,
)

GRID_POINTS = 10_000


class DegenerateFixtureError(ValueError):
    """Root structure does not support a unique local/global labeling."""


class FixedPointError(RuntimeError):
    """The multiplier-to-minimizer iteration failed to converge."""


@dataclass(frozen=True)
class TwoBusParams:
    g: float
    b: float
    cost: CostPolynomial
    l: float

    def __post_init__(self):
        if self.g < 0 or self.b <= 0:
            raise ValueError("need g >= 0 and b > 0")
        # cost must be increasing over attainable nonnegative generation
        hi = self.g + np.hypot(self.g, self.b)
        if self.cost.derivative(0.0) <= 0 or self.cost.derivative(hi) <= 0:
            raise ValueError("cost must be increasing on the generation range")


def canonical_fixture() -> TwoBusParams:
    """The repo's reference instance; it has two separated feasible angles."""
    return TwoBusParams(g=1.0, b=5.0, cost=CostPolynomial(c2=1.0, c1=1.0, c0=0.0), l=0.8)


def generation(p: TwoBusParams, theta):
    return p.g - p.g * np.cos(theta) + p.b * np.sin(theta)


def balance_residual(p: TwoBusParams, theta):
    """Load-balance mismatch at the load bus."""
    return p.l + p.g - p.g * np.cos(theta) - p.b * np.sin(theta)


def penalized(p: TwoBusParams, theta, rho: float):
    """Cost of generation plus rho/2 times the squared balance residual."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    r = balance_residual(p, theta)
    return p.cost.value(generation(p, theta)) + 0.5 * rho * r * r


def lagrangian(p: TwoBusParams, theta, mu: float):
    """Cost plus mu times the balance residual (the dualized equality)."""
    return p.cost.value(generation(p, theta)) + mu * balance_residual(p, theta)


def stationarity(p: TwoBusParams, theta, mu: float):
    """First-order condition of the dualized problem; zero at a minimizer.

    (c' + mu) g sin(theta) + (c' - mu) b cos(theta), with c' evaluated at the
    implied generation.
    """
    cp = p.cost.derivative(generation(p, theta))
    return (cp + mu) * p.g * np.sin(theta) + (cp - mu) * p.b * np.cos(theta)


def minimizer_map(p: TwoBusParams, mu: float, max_iter: int = 1000) -> float:
    """Interior minimizer (|theta| < pi/2) of the dualized objective.

    Solves theta = atan(((mu - c'(theta)) / (mu + c'(theta))) * b / g) by
    damped fixed-point iteration from 0. The initial damping of 0.5 is halved
    whenever the update starts oscillating with growing steps (quadratic costs
    can make the undamped map expansive); iteration continues to the numerical
    fixed point so linear costs reproduce the closed form to machine accuracy.
    """
    if p.g <= 0:
        raise ValueError("minimizer_map requires g > 0")
    theta = 0.0
    alpha = 0.5
    prev_delta = None
    for _ in range(max_iter):
        cp = p.cost.derivative(generation(p, theta))
        if abs(mu + cp) < 1e-9 * max(1.0, abs(mu)):
            raise FixedPointError("mu + c' vanished during iteration")
        target = np.arctan(((mu - cp) / (mu + cp)) * p.b / p.g)
        delta = target - theta
        if prev_delta is not None and delta * prev_delta < 0 \
                and abs(delta) >= abs(prev_delta):
            alpha *= 0.5
        prev_delta = delta
        new_theta = theta + alpha * delta
        if new_theta == theta or abs(delta) < 1e-15 * max(1.0, abs(theta)):
            theta = new_theta
            break
        theta = new_theta
    else:
        raise FixedPointError(f"no fixed point after {max_iter} iterations (mu={mu})")
    if abs(stationarity(p, theta, mu)) > 1e-10:
        raise FixedPointError(f"fixed point fails stationarity check (mu={mu})")
    return float(theta)


def find_solutions(p: TwoBusParams) -> tuple[float, float, float, float]:
    """Both feasible angles and their balance multipliers.

    Roots of the balance residual are bracketed on a uniform grid over
    [-pi, pi] and refined by bisection; exactly two sign changes are required.
    Returns (theta_global, theta_local, mu_global, mu_local) where global is
    the strictly cheaper root. Multipliers solve the stationarity condition:
    mu = c' (g sin + b cos) / (b cos - g sin).
    """
    grid = np.linspace(-np.pi, np.pi, GRID_POINTS + 1)
    vals = balance_residual(p, grid)
    roots = []
    for k in range(GRID_POINTS):
        a, b_ = grid[k], grid[k + 1]
        fa, fb = vals[k], vals[k + 1]
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0.0:
            lo, hi = a, b_
            flo = fa
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                fm = balance_residual(p, mid)
                if flo * fm <= 0.0:
                    hi = mid
                else:
                    lo, flo = mid, fm
                if hi - lo < 1e-15:
                    break
            roots.append(0.5 * (lo + hi))
    if abs(vals[-1]) == 0.0:
        roots.append(grid[-1])
    if len(roots) != 2:
        raise DegenerateFixtureError(f"expected two balance roots, found {len(roots)}")

    costs = [p.cost.value(generation(p, th)) for th in roots]
    if abs(costs[0] - costs[1]) <= 1e-9 * max(1.0, abs(costs[0]), abs(costs[1])):
        raise DegenerateFixtureError("ambiguous global: the two roots have equal cost")
    order = np.argsort(costs)
    theta_g, theta_l = roots[order[0]], roots[order[1]]

    def multiplier(theta: float) -> float:
        s, c = np.sin(theta), np.cos(theta)
        denom = p.b * c - p.g * s
        if abs(denom) < 1e-9:
            raise DegenerateFixtureError("multiplier recovery singular at a root")
        return p.cost.derivative(generation(p, theta)) * (p.g * s + p.b * c) / denom

    return float(theta_g), float(theta_l), multiplier(theta_g), multiplier(theta_l)


def sweep_landscape(p: TwoBusParams, rho: float, mus, resolution: int = 400) -> str:
    """Delimited table of theta, the penalized objective, and the dualized
    objective for each requested multiplier, over [-pi, pi].

    resolution is the number of grid intervals, so the table has
    resolution + 1 rows plus a header. Suitable for any plotting tool.
    """
    if resolution < 100:
        raise ValueError("resolution must be at least 100")
    mus = list(mus)
    header = ["theta", "penalized"] + [f"lagrangian_mu_{k}" for k in range(len(mus))]
    lines = [",".join(header)]
    for theta in np.linspace(-np.pi, np.pi, resolution + 1):
        row = [repr(float(theta)), repr(float(penalized(p, theta, rho)))]
        row += [repr(float(lagrangian(p, theta, mu))) for mu in mus]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def to_network(p: TwoBusParams) -> Network:
    """Equivalent Network for the full ACOPF machinery.

    Bus 0 carries the slack generator with the fixture's cost; bus 1 carries
    the load plus a zero-output generator with a wide reactive range, which
    pins active balance while absorbing reactive flows (the fixture ignores
    reactive power). Both voltages are fixed at 1 p.u. by degenerate bounds,
    so the network problem collapses to the fixture's single angle.
    """
    p_cap = p.g + float(np.hypot(p.g, p.b)) + 1.0
    q_cap = 10.0 * max(1.0, p.b)
    buses = (
        Bus(id=0, bus_kind=SLACK, v_min=1.0, v_max=1.0, p_load=0.0, q_load=0.0),
        Bus(id=1, bus_kind=GENERATOR, v_min=1.0, v_max=1.0, p_load=p.l, q_load=0.0),
    )
    branches = (Branch(from_bus=0, to_bus=1, g=p.g, b=p.b),)
    generators = (
        Generator(bus=0, p_min=0.0, p_max=p_cap, q_min=-q_cap, q_max=q_cap, cost=p.cost),
        Generator(bus=1, p_min=0.0, p_max=0.0, q_min=-q_cap, q_max=q_cap,
                  cost=CostPolynomial()),
    )
    return Network(base_mva=100.0, buses=buses, branches=branches,
                   generators=generators, slack_bus=0)
