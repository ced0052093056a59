"""Top-level estimation loop and its guarantees.

The solver alternates between the combinatorial core, which proposes a set of
suspected sensors within the attack budget, and the least-squares check over
the remaining sensors.  Failed checks feed certificates back into the core
until a hypothesis passes (feasible) or the core proves no hypothesis can
(infeasible).  The minimal-support variant lowers the budget until the problem
turns infeasible, and ``delta_bound`` evaluates the noise-robustness
guarantees from the model's robustness constants.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import satcore
from .linmodel import (
    ObservabilityStack,
    RobustnessConstants,
    StackedWindow,
    SubsetCapError,
    SystemModel,
    check_sparse_observability,
)
from .satcore import ConstraintKind, PBConstraint
from .theory import Certificate, CertificateKind, Strategy, certificates, t_check


class IterationLimitError(RuntimeError):
    """The estimation loop hit its iteration cap before deciding."""

    def __init__(self, iterations: int):
        super().__init__(f"estimation aborted after {iterations} iterations")
        self.iterations = iterations


@dataclass(frozen=True)
class EstimatorConfig:
    strategy: Strategy = Strategy.CONFLICT_AGREE
    epsilon: float = 1e-6
    max_iterations: int | None = None  # None: 10 * C(p, p - 2*s_bar + 1), capped at 1e7
    shrink_conflict: bool = True
    # treat the model as 3*s_bar-sparse observable without checking (the check
    # itself is combinatorial; generators that verified it set the model flag)
    assume_3s_observable: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")

    def iteration_cap(self, p: int, s_bar: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        width = max(p - 2 * s_bar + 1, 1)
        return min(10 * math.comb(p, min(width, p)), 10**7)


@dataclass
class IterationRecord:
    support: tuple
    sat: bool
    residual_sq: float
    certificates: tuple = ()
    conflict_fallback: bool = False
    agree_emitted: bool = False


@dataclass
class Estimate:
    feasible: bool
    x: np.ndarray | None
    b: np.ndarray | None
    iterations: int
    certificates: list
    residual_sq: float | None
    records: list = field(default_factory=list)
    agree_active: bool = False
    agree_downgraded: bool = False
    conflict_fallbacks: int = 0
    rank_deficient_final: bool = False
    budget: int = 0
    solve_time: float = 0.0

    @property
    def support(self) -> tuple:
        if self.b is None:
            return ()
        return tuple(int(i) for i in np.flatnonzero(self.b))

    def to_json_dict(self) -> dict:
        return {
            "status": "feasible" if self.feasible else "infeasible",
            "x": None if self.x is None else list(self.x),
            "b": None if self.b is None else [int(v) for v in self.b],
            "support": list(self.support),
            "iterations": self.iterations,
            "residual_sq": self.residual_sq,
            "budget": self.budget,
            "solve_time": self.solve_time,
            "certificates": [
                {"kind": c.kind.value, "sensors": sorted(c.sensors)} for c in self.certificates
            ],
            "trace": [
                {
                    "support": list(r.support),
                    "status": "SAT" if r.sat else "UNSAT",
                    "residual_sq": r.residual_sq,
                    "certificates": [
                        {"kind": c.kind.value, "sensors": sorted(c.sensors)}
                        for c in r.certificates
                    ],
                }
                for r in self.records
            ],
        }


def _agree_allowed(model: SystemModel, config: EstimatorConfig) -> tuple[bool, bool]:
    """(allowed, downgraded): whether agreement certificates may be emitted.

    They are only sound when the state stays observable after losing any
    3*s_bar sensors; without that verification the strategy silently runs in
    conflict-only mode and reports the downgrade.
    """
    if config.strategy is not Strategy.CONFLICT_AGREE:
        return False, False
    if model.p <= 3 * model.s_bar:
        return False, True
    if config.assume_3s_observable:
        return True, False
    if model.verified_sparse_obs is not None and model.verified_sparse_obs >= 3 * model.s_bar:
        return True, False
    try:
        if check_sparse_observability(model, 3 * model.s_bar):
            return True, False
    except SubsetCapError:
        pass
    return False, True


def _to_pb(cert: Certificate) -> PBConstraint:
    if cert.kind is CertificateKind.AT_LEAST_ONE_ATTACKED:
        return PBConstraint(ConstraintKind.AT_LEAST_ONE, cert.sensors)
    return PBConstraint(ConstraintKind.ALL_ZERO, cert.sensors)


def estimate(
    model: SystemModel,
    stack: ObservabilityStack,
    window: StackedWindow,
    config: EstimatorConfig = EstimatorConfig(),
) -> Estimate:
    """Solve the windowed estimation problem under the model's attack budget.

    Returns a feasible estimate (state at the window start plus the attack
    indicators) or an infeasible outcome when no sensor subset within budget
    explains the data.
    """
    p, s_bar = model.p, model.s_bar
    started = time.perf_counter()
    inst = satcore.new_instance(p, s_bar)
    agree_allowed, downgraded = _agree_allowed(model, config)
    cap = config.iteration_cap(p, s_bar)
    result = Estimate(
        feasible=False,
        x=None,
        b=None,
        iterations=0,
        certificates=[],
        residual_sq=None,
        agree_active=agree_allowed,
        agree_downgraded=downgraded,
        budget=s_bar,
    )
    while True:
        assignment = inst.solve()
        if assignment is None:
            result.solve_time = time.perf_counter() - started
            return result
        suspected = assignment.support
        trusted = tuple(i for i in range(p) if i not in suspected)
        if not trusted:
            # no sensor left to estimate from: reject this hypothesis outright
            inst.add_constraint(PBConstraint(ConstraintKind.AT_LEAST_ONE, frozenset()))
            continue
        result.iterations += 1
        check = t_check(stack, window, trusted, model.noise_bounds, config.epsilon)
        record = IterationRecord(
            support=suspected, sat=check.sat, residual_sq=check.residual_sq
        )
        result.records.append(record)
        if check.sat:
            result.feasible = True
            result.x = check.x
            result.b = assignment.b
            result.residual_sq = check.residual_sq
            result.rank_deficient_final = check.rank_deficient
            result.solve_time = time.perf_counter() - started
            return result
        certs, diag = certificates(
            stack,
            window,
            trusted,
            check,
            s_bar,
            config.epsilon,
            model.noise_bounds,
            config.strategy,
            agree_allowed=agree_allowed,
            shrink=config.shrink_conflict,
        )
        record.certificates = tuple(certs)
        record.conflict_fallback = diag.conflict_fallback
        record.agree_emitted = diag.agree_emitted
        if diag.conflict_fallback:
            result.conflict_fallbacks += 1
        for cert in certs:
            result.certificates.append(cert)
            inst.add_constraint(_to_pb(cert))
            if cert.suspect is not None:
                inst.bump(cert.suspect)
        if result.iterations >= cap:
            raise IterationLimitError(result.iterations)


def minimal_support_estimate(
    model: SystemModel,
    stack: ObservabilityStack,
    window: StackedWindow,
    config: EstimatorConfig = EstimatorConfig(),
) -> Estimate:
    """Feasible estimate with the smallest attack budget that still explains
    the data.

    Runs the budgeted problem with the budget descending from the model's
    s_bar; certificates are not carried across budgets (clean-sensor
    certificates are only sound under the budget they were derived for).
    """
    best: Estimate | None = None
    budget = model.s_bar
    total_iterations = 0
    while budget >= 0:
        trial_model = replace(model, s_bar=budget)
        outcome = estimate(trial_model, stack, window, config)
        total_iterations += outcome.iterations
        if not outcome.feasible:
            break
        best = outcome
        budget = min(budget - 1, len(outcome.support) - 1) if outcome.support else -1
    if best is None:
        infeasible = outcome
        infeasible.iterations = total_iterations
        return infeasible
    best.iterations = total_iterations
    # the estimate also solves the problem at the budget matching its support
    best.budget = len(best.support)
    return best


@dataclass(frozen=True)
class GuaranteeBounds:
    """Error guarantees implied by the robustness constants.

    detected_delta: squared state-error bound once every attack is detectable.
    detection_threshold_sq: squared attack norm above which detection is
    guaranteed.  undetected_bound: squared state-error bound against attacks
    hiding below that threshold.
    """

    detected_delta: float
    detection_threshold_sq: float
    undetected_bound: float


def delta_bound(
    model: SystemModel, constants: RobustnessConstants, epsilon: float
) -> GuaranteeBounds:
    """Evaluate the noise-robustness guarantees for this model."""
    if constants.delta_s >= 1.0:
        raise ValueError(
            f"delta_s must be < 1 for the guarantees to hold, got {constants.delta_s}"
        )
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    psi_sq = model.noise_norm_sq
    gap = 1.0 - constants.delta_s
    threshold = (2.0 / gap) * psi_sq + epsilon / gap
    detected = constants.o_bar * psi_sq
    undetected = 2.0 * constants.o_bar * (1.0 + 2.0 / gap) * psi_sq + (
        2.0 * constants.o_bar * epsilon / gap
    )
    return GuaranteeBounds(
        detected_delta=detected,
        detection_threshold_sq=threshold,
        undetected_bound=undetected,
    )
