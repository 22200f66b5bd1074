"""Momentum descent for the smallest threshold meeting a closeness criterion.

The search starts from the coverage anchor ``lambda_0`` and only ever moves
within ``[lambda_0, lambda_max]``. Each round costs one coverage-gap oracle
call, which in the federated setting is one client round trip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

CgOracle = Callable[[float], float]


@dataclass(frozen=True)
class OptimizerConfig:
    num_rounds: int = 50
    eta: float | None = None  # None: 5% of the search interval, floored at 1e-4
    mu: float = 0.9
    lambda_max: float | None = None  # None: caller supplies the max calibration score
    epsilon_lambda: float = 1e-12

    def __post_init__(self) -> None:
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be >= 1")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError("mu must lie in [0, 1)")
        if self.epsilon_lambda <= 0:
            raise ValueError("epsilon_lambda must be positive")

    def resolved_eta(self, lambda_0: float) -> float:
        if self.eta is not None:
            return self.eta
        return max(0.05 * (self.lambda_max - lambda_0), 1e-4)


@dataclass
class OptimizerState:
    lam: float
    momentum: float = 0.0
    lambda_opt: float = math.inf
    feasible: bool = False


@dataclass(frozen=True)
class TraceRow:
    t: int
    lam: float
    cg: float
    momentum: float
    halvings: int
    eta_t: float


@dataclass
class OptimizerTrace:
    rows: list[TraceRow] = field(default_factory=list)
    lambda_0: float = 0.0
    lambda_max: float = 1.0
    lambda_opt: float = 1.0
    feasible: bool = False
    final_cg: float | None = None

    def to_dict(self) -> dict:
        return {
            "lambda_0": self.lambda_0,
            "lambda_max": self.lambda_max,
            "lambda_opt": self.lambda_opt,
            "feasible": self.feasible,
            "final_cg": self.final_cg,
            "rounds": [row.__dict__ for row in self.rows],
        }


def update_lr(eta: float, halvings: int) -> float:
    return eta * 0.5**halvings


def halvings_for(eta: float, delta_lambda: float, epsilon: float = 1e-12) -> int:
    """Number of step halvings so the step does not overrun the reference point."""
    gap = abs(delta_lambda)
    if gap < epsilon:
        return 0
    return max(math.ceil(math.log2(eta / gap)), 0)


def descent_step(
    state: OptimizerState,
    cg_t: float,
    closeness: float,
    lambda_0: float,
    eta: float,
    config: OptimizerConfig,
) -> tuple[OptimizerState, TraceRow]:
    """Advance one round given the gap observed at ``state.lam``.

    Records ``state.lam`` as the best feasible point when it improves on it.
    """
    lam = state.lam
    lambda_opt, feasible = state.lambda_opt, state.feasible
    if cg_t <= closeness and lam < lambda_opt:
        lambda_opt, feasible = lam, True
    momentum = config.mu * state.momentum + (cg_t - closeness)
    reference = min(lambda_opt, config.lambda_max) if momentum >= 0 else lambda_0
    p = halvings_for(eta, reference - lam, config.epsilon_lambda)
    eta_t = update_lr(eta, p)
    nxt = min(max(lam + eta_t * momentum, lambda_0), config.lambda_max)
    row = TraceRow(-1, lam, cg_t, momentum, p, eta_t)
    return OptimizerState(nxt, momentum, lambda_opt, feasible), row


def fair_opt_descent(
    cg_oracle: CgOracle,
    lambda_0: float,
    closeness: float,
    config: OptimizerConfig,
) -> tuple[float, OptimizerTrace]:
    """Search for the smallest threshold with ``cg <= closeness``.

    Returns ``lambda_0`` immediately if it is already fair. If no visited
    threshold is fair, returns ``config.lambda_max`` with ``feasible=False``.
    """
    if config.lambda_max is None:
        raise ValueError("lambda_max must be set before running the search")
    if config.lambda_max < lambda_0:
        raise ValueError(f"lambda_max {config.lambda_max} is below lambda_0 {lambda_0}")
    eta = config.resolved_eta(lambda_0)
    trace = OptimizerTrace(lambda_0=lambda_0, lambda_max=config.lambda_max)
    state = OptimizerState(lam=lambda_0)
    for t in range(config.num_rounds):
        cg_t = float(cg_oracle(state.lam))
        if t == 0 and cg_t <= closeness:
            trace.rows.append(TraceRow(0, lambda_0, cg_t, 0.0, 0, eta))
            trace.lambda_opt, trace.feasible, trace.final_cg = lambda_0, True, cg_t
            return lambda_0, trace
        state, row = descent_step(state, cg_t, closeness, lambda_0, eta, config)
        trace.rows.append(TraceRow(t, row.lam, row.cg, row.momentum, row.halvings, row.eta_t))

    if not state.feasible:
        trace.lambda_opt, trace.feasible = config.lambda_max, False
        return config.lambda_max, trace
    final_cg = float(cg_oracle(state.lambda_opt))
    trace.final_cg = final_cg
    if final_cg > closeness:
        # A non-deterministic oracle (e.g. noised) disagreed on re-evaluation.
        trace.lambda_opt, trace.feasible = config.lambda_max, False
        return config.lambda_max, trace
    trace.lambda_opt, trace.feasible = state.lambda_opt, True
    return state.lambda_opt, trace
