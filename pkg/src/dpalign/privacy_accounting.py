"""Gaussian-mechanism calibration with conservative per-epoch composition.

A phase that touches every record ``E`` times is split evenly: each access
gets ``(eps / E, delta / E)`` and the per-access Gaussian mechanism needs

    sigma = 2 * sqrt(ln(1.25 / delta')) / eps'

The two epsilon sentinels are plain floats: ``ZERO`` (0.0) maps to an
infinite sigma, which the training loop reads as "pure-noise mode", and
``INFINITY`` maps to sigma = 0 (non-private).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from collections.abc import Sequence

ZERO = 0.0
INFINITY = math.inf


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 1e-5

    def __post_init__(self):
        if math.isnan(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def is_zero(self) -> bool:
        return self.epsilon == ZERO

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.epsilon)

    def to_json(self) -> dict:
        return {"epsilon": format_epsilon(self.epsilon), "delta": self.delta}


@dataclass(frozen=True)
class AccountantConfig:
    epochs: int = 3

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs}")


def parse_epsilon(text: str | float | int) -> float:
    """Accepts numbers and the spellings 'inf' / 'infinity' / 'zero'."""
    if isinstance(text, (int, float)):
        value = float(text)
    else:
        s = str(text).strip().lower()
        if s in ("inf", "+inf", "infinity", "∞"):
            return INFINITY
        if s == "zero":
            return ZERO
        try:
            value = float(s)
        except ValueError:
            raise ValueError(f"invalid epsilon {text!r}: expected a number, 'inf' or 'zero'") from None
    if math.isnan(value) or value < 0:
        raise ValueError(f"invalid epsilon {text!r}")
    return value


def format_epsilon(eps: float) -> str:
    if math.isinf(eps):
        return "inf"
    return f"{eps:g}"


def sigma_for_budget(budget: PrivacyBudget, acct: AccountantConfig = AccountantConfig()) -> float:
    """Noise multiplier for a total budget spent over ``acct.epochs`` accesses."""
    if budget.is_infinite:
        return 0.0
    if budget.is_zero:
        return math.inf
    eps_step = budget.epsilon / acct.epochs
    delta_step = budget.delta / acct.epochs
    if delta_step >= 1.25:
        raise ValueError("delta / epochs must be below 1.25")
    return 2.0 * math.sqrt(math.log(1.25 / delta_step)) / eps_step


def epsilon_for_sigma(sigma: float, delta: float, acct: AccountantConfig = AccountantConfig()) -> float:
    """Inverse of :func:`sigma_for_budget` at fixed delta and epochs."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    E = acct.epochs
    return E * 2.0 * math.sqrt(math.log(1.25 * E / delta)) / sigma


@dataclass(frozen=True)
class BudgetReport:
    phases: tuple[PrivacyBudget, ...]
    disjoint: bool
    overall: PrivacyBudget = field(init=False)

    def __post_init__(self):
        if not self.phases:
            raise ValueError("need at least one phase")
        if self.disjoint:
            overall = PrivacyBudget(
                max(p.epsilon for p in self.phases), max(p.delta for p in self.phases)
            )
        else:
            eps = sum(p.epsilon for p in self.phases)
            delta = sum(p.delta for p in self.phases)
            overall = PrivacyBudget(eps, min(delta, math.nextafter(1.0, 0.0)))
        object.__setattr__(self, "overall", overall)

    def to_json(self) -> dict:
        return {
            "disjoint": self.disjoint,
            "composition": "parallel" if self.disjoint else "sequential",
            "phases": [p.to_json() for p in self.phases],
            "overall": self.overall.to_json(),
        }

    def render(self) -> str:
        lines = ["phase  epsilon  delta"]
        for i, p in enumerate(self.phases, 1):
            lines.append(f"{i:<6} {format_epsilon(p.epsilon):<8} {p.delta:g}")
        kind = "parallel (disjoint)" if self.disjoint else "sequential"
        lines.append(f"overall {format_epsilon(self.overall.epsilon)} {self.overall.delta:g}  [{kind}]")
        return "\n".join(lines)


def phase_budget_report(phases: Sequence[PrivacyBudget], partitions_disjoint: bool) -> BudgetReport:
    """Overall guarantee: max over disjoint phases, sum otherwise."""
    return BudgetReport(tuple(phases), bool(partitions_disjoint))
