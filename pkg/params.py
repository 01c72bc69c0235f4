"""
Parameter constraint engine
Evaluates constraints (1)-(7) on (alpha, f, NS_min, gamma, beta, D), derives the
admissible gamma/beta intervals, and searches for the minimum system size.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app_config import get_config
from exceptions import ValidationError
from logger_config import get_logger

logger = get_logger(__name__)

ALPHA_CEILING = 1.0 - 2.0 ** (-0.25)

VARIANT_PRINTED = "printed"
VARIANT_NO_PLUS_ONE = "no-plus-one"
VARIANTS = (VARIANT_PRINTED, VARIANT_NO_PLUS_ONE)


@dataclass(frozen=True)
class Params:
    """System/algorithm parameter bundle"""
    alpha: float
    f: int
    ns_min: int
    gamma: Optional[float] = None
    beta: Optional[float] = None
    d: float = 1.0

    def validate(self, require_algorithm: bool = True) -> None:
        """
        Check field-level invariants

        Args:
            require_algorithm: When True, beta must be set, and gamma too unless alpha == 0

        Raises:
            ValidationError: On any out-of-range field
        """
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if int(self.f) != self.f or self.f < 1:
            raise ValidationError(f"f must be an integer >= 1, got {self.f}")
        if int(self.ns_min) != self.ns_min or self.ns_min < 1:
            raise ValidationError(f"ns_min must be an integer >= 1, got {self.ns_min}")
        if not self.d > 0:
            raise ValidationError(f"d must be > 0, got {self.d}")
        if self.gamma is not None and not 0 < self.gamma <= 1:
            raise ValidationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.beta is not None and not 0 < self.beta <= 1:
            raise ValidationError(f"beta must lie in (0, 1], got {self.beta}")
        if require_algorithm:
            if self.beta is None:
                raise ValidationError("beta is required")
            if self.gamma is None and self.alpha > 0:
                raise ValidationError("gamma is required when churn is present (alpha > 0)")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "f": self.f,
            "ns_min": self.ns_min,
            "gamma": self.gamma,
            "beta": self.beta,
            "d": self.d,
        }


def _finite_or_none(x: float) -> Optional[float]:
    return x if math.isfinite(x) else None


@dataclass
class ConstraintResult:
    """Evaluation of one constraint"""
    index: int
    relation: str
    lhs: float
    rhs: float
    slack: float
    satisfied: bool
    skipped: bool = False
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "relation": self.relation,
            "lhs": _finite_or_none(self.lhs),
            "rhs": _finite_or_none(self.rhs),
            "slack": _finite_or_none(self.slack),
            "satisfied": self.satisfied,
            "skipped": self.skipped,
            "error": self.error,
        }


@dataclass
class ConstraintReport:
    """Per-constraint results for one parameter bundle"""
    params: Params
    per_constraint: List[ConstraintResult]
    variant: str = VARIANT_PRINTED

    @property
    def feasible(self) -> bool:
        return all(result.satisfied for result in self.per_constraint)

    @property
    def failing(self) -> List[int]:
        return [result.index for result in self.per_constraint if not result.satisfied]

    def result(self, index: int) -> ConstraintResult:
        return self.per_constraint[index - 1]

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "variant": self.variant,
            "feasible": self.feasible,
            "failing": self.failing,
            "per_constraint": [result.to_dict() for result in self.per_constraint],
        }


# Bound formulas. Each returns the constraint's right-hand side for the
# parameter it bounds, or None when a denominator is not positive.

def gamma_lower(alpha: float, f: int, ns_min: int) -> float:
    """Constraint (3)"""
    lo, hi = (1 - alpha) ** 3, (1 + alpha) ** 3
    return (1 + 2 * f) / (lo * ns_min) + hi / lo - 1


def gamma_upper(alpha: float, f: int, ns_min: int) -> float:
    """Constraint (4)"""
    lo, hi = (1 - alpha) ** 3, (1 + alpha) ** 3
    return lo / hi - f / (hi * ns_min)


def beta_upper(alpha: float, f: int, ns_min: int) -> float:
    """Constraint (5)"""
    sq = (1 + alpha) ** 2
    return (1 - alpha) ** 3 / sq - f / (sq * ns_min)


def beta_lower_6(alpha: float, f: int, ns_min: int) -> Optional[float]:
    """Constraint (6)"""
    denominator = (1 - alpha) ** 4 - f / ns_min
    if denominator <= 0:
        return None
    return ((1 + alpha) ** 5 - 1 + 2 * f / ns_min) / denominator


def beta_lower_7(alpha: float, f: int, ns_min: int, variant: str = VARIANT_PRINTED) -> Optional[float]:
    """Constraint (7); the no-plus-one variant drops the +1 in the numerator"""
    denominator = (2 + 2 * alpha + alpha ** 2) * (1 - alpha) ** 2 * (1 + alpha) ** -2 - 2 * f / ns_min
    if denominator <= 0:
        return None
    plus_one = 1.0 if variant == VARIANT_PRINTED else 0.0
    numerator = (1 + alpha) ** 3 - (1 - alpha) ** 3 + plus_one + (1 + 3 * f) / ns_min
    return numerator / denominator


def _at_most(index: int, lhs: float, rhs: float) -> ConstraintResult:
    slack = rhs - lhs
    return ConstraintResult(index, "<=", lhs, rhs, slack, slack >= 0)


def _at_least(index: int, lhs: float, rhs: float) -> ConstraintResult:
    slack = lhs - rhs
    return ConstraintResult(index, ">=", lhs, rhs, slack, slack >= 0)


def _greater(index: int, lhs: float, rhs: Optional[float]) -> ConstraintResult:
    if rhs is None:
        return ConstraintResult(index, ">", lhs, math.inf, -math.inf, False,
                                error="domain: denominator <= 0")
    slack = lhs - rhs
    return ConstraintResult(index, ">", lhs, rhs, slack, slack > 0)


def check_constraints(p: Params, variant: str = VARIANT_PRINTED) -> ConstraintReport:
    """
    Evaluate constraints (1)-(7) exactly as printed

    Args:
        p: Parameter bundle; gamma may be None only when alpha == 0
        variant: "printed", or "no-plus-one" for the alternative form of (7)

    Returns:
        ConstraintReport with one record per constraint
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown constraint variant {variant!r}; choose from {VARIANTS}")
    p.validate()
    a, f, n = p.alpha, p.f, p.ns_min

    results = [
        _at_most(1, a, ALPHA_CEILING),
        _at_most(2, 1.0, (1 - a) ** 3 * n - 2 * f),
    ]

    if p.gamma is None:
        # No churn: nobody runs the join protocol, so gamma is not applicable
        for index, relation, bound in ((3, ">=", gamma_lower(a, f, n)), (4, "<=", gamma_upper(a, f, n))):
            results.append(ConstraintResult(index, relation, math.nan, bound, 0.0, True, skipped=True))
    else:
        results.append(_at_least(3, p.gamma, gamma_lower(a, f, n)))
        results.append(_at_most(4, p.gamma, gamma_upper(a, f, n)))

    results.append(_at_most(5, p.beta, beta_upper(a, f, n)))
    results.append(_greater(6, p.beta, beta_lower_6(a, f, n)))
    results.append(_greater(7, p.beta, beta_lower_7(a, f, n, variant)))

    report = ConstraintReport(p, results, variant)
    logger.debug(f"Constraints for {p.to_dict()} ({variant}): failing={report.failing}")
    return report


@dataclass(frozen=True)
class Interval:
    """Real interval with explicit endpoint closedness"""
    low: float
    high: float
    low_closed: bool = True
    high_closed: bool = True

    @property
    def empty(self) -> bool:
        if self.low < self.high:
            return False
        if self.low == self.high:
            return not (self.low_closed and self.high_closed)
        return True

    def contains(self, x: float) -> bool:
        above = x >= self.low if self.low_closed else x > self.low
        below = x <= self.high if self.high_closed else x < self.high
        return above and below

    def to_dict(self) -> dict:
        return {
            "low": self.low,
            "high": self.high,
            "low_closed": self.low_closed,
            "high_closed": self.high_closed,
            "empty": self.empty,
        }

    def __str__(self) -> str:
        if self.empty:
            return "empty"
        left = "[" if self.low_closed else "("
        right = "]" if self.high_closed else ")"
        return f"{left}{self.low:.4f}, {self.high:.4f}{right}"


EMPTY_INTERVAL = Interval(1.0, 0.0)


@dataclass
class FeasibleRegion:
    """Admissible gamma and beta intervals for fixed (alpha, f, NS_min)"""
    alpha: float
    f: int
    ns_min: int
    gamma_range: Interval
    beta_range: Interval
    precondition_failed: List[int] = field(default_factory=list)
    variant: str = VARIANT_PRINTED

    @property
    def empty(self) -> bool:
        # With alpha == 0 nobody joins later, so only beta matters
        if self.precondition_failed or self.beta_range.empty:
            return True
        return self.alpha > 0 and self.gamma_range.empty

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "f": self.f,
            "ns_min": self.ns_min,
            "gamma_range": self.gamma_range.to_dict(),
            "beta_range": self.beta_range.to_dict(),
            "precondition_failed": list(self.precondition_failed),
            "variant": self.variant,
            "empty": self.empty,
        }


def feasible_interval(p_partial: Params, variant: str = VARIANT_PRINTED) -> FeasibleRegion:
    """
    Closed form of constraints (3)-(4) over gamma and (5)-(7) over beta

    When (1) or (2) fails the region is returned empty with the failing
    constraint indices in precondition_failed.
    """
    p_partial.validate(require_algorithm=False)
    a, f, n = p_partial.alpha, p_partial.f, p_partial.ns_min

    failed = []
    if a > ALPHA_CEILING:
        failed.append(1)
    if 1.0 > (1 - a) ** 3 * n - 2 * f:
        failed.append(2)
    if failed:
        logger.debug(f"Preconditions {failed} fail for alpha={a}, f={f}, ns_min={n}")
        return FeasibleRegion(a, f, n, EMPTY_INTERVAL, EMPTY_INTERVAL, failed, variant)

    gamma_range = Interval(max(gamma_lower(a, f, n), 0.0), min(gamma_upper(a, f, n), 1.0), True, True)
    # gamma must stay strictly positive
    if gamma_range.low == 0.0:
        gamma_range = replace(gamma_range, low_closed=False)

    lower_6 = beta_lower_6(a, f, n)
    lower_7 = beta_lower_7(a, f, n, variant)
    if lower_6 is None or lower_7 is None:
        beta_range = EMPTY_INTERVAL
    else:
        beta_range = Interval(max(lower_6, lower_7, 0.0), min(beta_upper(a, f, n), 1.0), False, True)

    return FeasibleRegion(a, f, n, gamma_range, beta_range, [], variant)


@dataclass
class NsMinResult:
    """Outcome of the minimum system size search"""
    alpha: float
    f: int
    ns_min: Optional[int]
    cap: int

    @property
    def found(self) -> bool:
        return self.ns_min is not None

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "f": self.f, "ns_min": self.ns_min, "cap": self.cap}


def min_ns_min(alpha: float, f: int, cap: Optional[int] = None, variant: str = VARIANT_PRINTED) -> NsMinResult:
    """
    Smallest NS_min whose (gamma, beta) region is nonempty

    Feasibility is monotone in NS_min, so the first hit of an upward scan is minimal.

    Args:
        alpha: Churn rate; must satisfy constraint (1)
        f: Byzantine bound, >= 1
        cap: Largest NS_min tried (defaults to the configured cap)
        variant: Form of constraint (7)

    Returns:
        NsMinResult with ns_min None when the cap is exhausted
    """
    if cap is None:
        cap = get_config().ns_min_cap
    if alpha > ALPHA_CEILING:
        raise ValidationError(f"alpha={alpha} violates constraint (1)")
    if f < 1:
        raise ValidationError(f"f must be >= 1, got {f}")

    for n in range(max(1, f + 1), cap + 1):
        if not feasible_interval(Params(alpha, f, n), variant).empty:
            logger.debug(f"min NS_min for alpha={alpha}, f={f}: {n}")
            return NsMinResult(alpha, f, n, cap)

    logger.info(f"No feasible NS_min <= {cap} for alpha={alpha}, f={f}")
    return NsMinResult(alpha, f, None, cap)


def sweep_ns_min(alphas: Sequence[float], fs: Sequence[int], cap: Optional[int] = None,
                 variant: str = VARIANT_PRINTED) -> np.ndarray:
    """
    Tabulate min_ns_min over a grid

    Returns:
        Array of shape (len(alphas), len(fs)); -1 marks an exhausted cap
    """
    grid = np.full((len(alphas), len(fs)), -1, dtype=np.int64)
    for i, alpha in enumerate(alphas):
        for j, f in enumerate(fs):
            result = min_ns_min(float(alpha), int(f), cap, variant)
            if result.found:
                grid[i, j] = result.ns_min
    return grid


@dataclass(frozen=True)
class TableRow:
    """One published parameter set"""
    f: int
    ns_min: int
    alpha: float
    gamma: Optional[float]
    beta: float

    def to_params(self) -> Params:
        return Params(alpha=self.alpha, f=self.f, ns_min=self.ns_min, gamma=self.gamma, beta=self.beta)


PUBLISHED_TABLE: Tuple[TableRow, ...] = (
    TableRow(1, 8, 0.0, None, 0.86),
    TableRow(1, 10, 0.01, 0.82, 0.84),
    TableRow(1, 13, 0.02, 0.79, 0.80),
    TableRow(1, 190, 0.05, 0.79, 0.80),
    TableRow(2, 19, 0.01, 0.80, 0.83),
    TableRow(2, 24, 0.02, 0.81, 0.82),
    TableRow(2, 347, 0.05, 0.70, 0.77),
    TableRow(5, 44, 0.01, 0.80, 0.83),
    TableRow(5, 57, 0.02, 0.79, 0.82),
    TableRow(5, 826, 0.05, 0.79, 0.82),
    TableRow(10, 85, 0.01, 0.80, 0.83),
    TableRow(10, 113, 0.02, 0.79, 0.82),
    TableRow(10, 1630, 0.05, 0.79, 0.82),
    TableRow(100, 838, 0.01, 0.79, 0.82),
    TableRow(100, 1107, 0.02, 0.79, 0.82),
    TableRow(100, 16015, 0.05, 0.79, 0.82),
    TableRow(1000, 8360, 0.01, 0.79, 0.82),
    TableRow(1000, 11042, 0.02, 0.79, 0.82),
    TableRow(1000, 159935, 0.05, 0.79, 0.82),
)

ROUNDING_SLACK = 0.005


@dataclass
class TableAuditRow:
    """Both evaluations of one published row"""
    row: TableRow
    printed: ConstraintReport
    no_plus_one: ConstraintReport

    @property
    def worst_slack(self) -> float:
        failing = [r.slack for r in self.printed.per_constraint if not r.satisfied]
        return min(failing) if failing else 0.0

    @property
    def marginal(self) -> bool:
        """Fails as printed, but only by rounding-scale slack"""
        return not self.printed.feasible and abs(self.worst_slack) < ROUNDING_SLACK

    @property
    def size_ratio_ok(self) -> bool:
        """The NS_min > 8.5 f remark"""
        return self.row.ns_min > 8.5 * self.row.f

    def to_dict(self) -> dict:
        return {
            "row": {
                "f": self.row.f,
                "ns_min": self.row.ns_min,
                "alpha": self.row.alpha,
                "gamma": self.row.gamma,
                "beta": self.row.beta,
            },
            "feasible_printed": self.printed.feasible,
            "feasible_no_plus_one": self.no_plus_one.feasible,
            "failing_printed": self.printed.failing,
            "failing_no_plus_one": self.no_plus_one.failing,
            "worst_slack": self.worst_slack,
            "marginal": self.marginal,
            "size_ratio_ok": self.size_ratio_ok,
            "printed": self.printed.to_dict(),
            "no_plus_one": self.no_plus_one.to_dict(),
        }


def audit_table(rows: Iterable[TableRow] = PUBLISHED_TABLE) -> List[TableAuditRow]:
    """Evaluate every published row under both forms of constraint (7)"""
    audit = []
    for row in rows:
        params = row.to_params()
        entry = TableAuditRow(row, check_constraints(params, VARIANT_PRINTED),
                              check_constraints(params, VARIANT_NO_PLUS_ONE))
        if not entry.printed.feasible:
            logger.warning(
                f"Table row f={row.f}, NS_min={row.ns_min}, alpha={row.alpha} fails "
                f"{entry.printed.failing} as printed (worst slack {entry.worst_slack:.4f})"
            )
        audit.append(entry)
    return audit


def alpha_ceiling_scan(f: int, ns_min: int, alphas: Optional[Sequence[float]] = None,
                       variant: str = VARIANT_PRINTED) -> Dict[float, bool]:
    """
    Whether each churn rate leaves a nonempty region at fixed (f, NS_min)

    Returns:
        Map alpha -> region nonempty
    """
    if alphas is None:
        alphas = np.round(np.arange(0.0, 0.0801, 0.01), 4)
    scan = {}
    for alpha in alphas:
        region = feasible_interval(Params(float(alpha), f, ns_min), variant)
        scan[float(alpha)] = not region.empty
    return scan
