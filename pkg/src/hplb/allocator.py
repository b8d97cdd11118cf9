"""Per-head token budget allocation: uniform, oracle top-p, and max-min shifting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from .errors import BudgetError
from .profiler import HeadProfile, RecoveryCurve, budget_for_recovery

log = logging.getLogger(__name__)

ALLOCATION_FORMAT_VERSION = 1
DEFAULT_FLOOR = 128
DEFAULT_DELTA = 64


@dataclass(frozen=True)
class AllocatorConfig:
    """Knobs for :func:`maxmin_allocate`.

    ``max_iterations`` defaults to ``10 * N * n_k / delta`` when left as None.
    """

    delta: int = DEFAULT_DELTA
    floor: int = DEFAULT_FLOOR
    max_iterations: int | None = None

    def __post_init__(self):
        if self.delta < 1:
            raise ValueError("transfer quantum delta must be >= 1")
        if self.floor < 0:
            raise ValueError("floor must be >= 0")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass(frozen=True)
class Transfer:
    """One committed max-min step."""

    donor: int
    recipient: int
    amount: int
    donor_recovery: float
    recipient_recovery: float
    min_before: float
    min_after: float


@dataclass(frozen=True)
class BudgetAllocation:
    budgets: tuple[int, ...]
    total: int
    floor: int
    heads: tuple[tuple[int, int], ...]
    method: str = "uniform"
    transfers: tuple[Transfer, ...] = ()
    stop_reason: str = ""
    off_grid: tuple[int, ...] = ()
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        if len(self.heads) != len(self.budgets):
            raise ValueError("one head label per budget required")

    def __len__(self):
        return len(self.budgets)

    def check(self, context_length: int | None = None) -> None:
        """Raise if the allocation breaks conservation, the floor or the cap."""
        if sum(self.budgets) != self.total:
            raise BudgetError(f"budgets sum to {sum(self.budgets)}, expected {self.total}")
        low = [h for h, b in enumerate(self.budgets) if b < self.floor]
        if low:
            raise BudgetError(f"heads {low} below floor {self.floor}")
        if context_length is not None:
            high = [h for h, b in enumerate(self.budgets) if b > context_length]
            if high:
                raise BudgetError(f"heads {high} above context length {context_length}")

    def to_dict(self) -> dict:
        return {
            "version": ALLOCATION_FORMAT_VERSION,
            "total": self.total,
            "floor": self.floor,
            "budgets": [
                {"layer": layer, "head": head, "budget": b}
                for (layer, head), b in zip(self.heads, self.budgets)
            ],
        }


def _curves(profiles) -> list[RecoveryCurve]:
    return [p.curve if isinstance(p, HeadProfile) else p for p in profiles]


def _check_feasible(n_heads: int, total: int, floor: int, context_length: int) -> None:
    if n_heads < 1:
        raise BudgetError("need at least one head")
    lo, hi = n_heads * floor, n_heads * context_length
    if not lo <= total <= hi:
        raise BudgetError(
            f"total budget {total} infeasible for {n_heads} heads: must lie in [{lo}, {hi}]"
            f" (floor {floor}, context length {context_length})"
        )


def uniform_allocate(n_heads: int, total: int, floor: int = DEFAULT_FLOOR, context_length: int | None = None,
                     heads: Sequence[tuple[int, int]] | None = None) -> BudgetAllocation:
    """Split ``total`` evenly; the remainder goes one token each to the lowest-indexed heads."""
    if context_length is None:
        context_length = total
    _check_feasible(n_heads, total, floor, context_length)
    base, extra = divmod(total, n_heads)
    budgets = tuple(base + (1 if h < extra else 0) for h in range(n_heads))
    if heads is None:
        heads = tuple((0, h) for h in range(n_heads))
    return BudgetAllocation(budgets, total, floor, tuple(heads), method="uniform")


def maxmin_allocate(profiles, total: int, config: AllocatorConfig = AllocatorConfig()) -> BudgetAllocation:
    """Shift budget from the highest-recovery head to the lowest until it stops helping.

    Starting from :func:`uniform_allocate`, each step moves ``config.delta``
    tokens from the donor (highest current recovery among heads that stay at or
    above the floor afterwards) to the recipient (lowest current recovery). A
    step is kept only if it strictly raises the minimum recovery over all heads;
    otherwise it is undone and the loop stops. Recovery is read off each curve
    at the nearest sampled budget at or below the head's budget.
    """
    curves = _curves(profiles)
    if not curves:
        raise BudgetError("need at least one profile")
    n_k = curves[0].context_length
    if any(c.context_length != n_k for c in curves):
        raise BudgetError("all curves must share one context length")
    n = len(curves)
    heads = tuple((c.layer, c.head) for c in curves)
    start = uniform_allocate(n, total, config.floor, n_k, heads)
    budgets = list(start.budgets)
    rec = [c.at(b) for c, b in zip(curves, budgets)]

    cap = config.max_iterations
    if cap is None:
        cap = max(1, 10 * n * n_k // config.delta)
    transfers: list[Transfer] = []
    stop = "single head" if n == 1 else ""
    notes: list[str] = []
    while not stop:
        if len(transfers) >= cap:
            stop = "iteration cap"
            log.warning("max-min allocation hit the iteration cap (%d)", cap)
            notes.append(f"stopped at iteration cap {cap}")
            break
        recipient = min(range(n), key=lambda h: (rec[h], h))
        amount = min(config.delta, n_k - budgets[recipient])
        if amount <= 0:
            stop = "recipient saturated"
            break
        donors = [h for h in range(n) if h != recipient and budgets[h] - amount >= config.floor]
        if not donors:
            stop = "floor reached"
            break
        donor = max(donors, key=lambda h: (rec[h], -h))
        before = min(rec)
        new_donor = curves[donor].at(budgets[donor] - amount)
        new_recipient = curves[recipient].at(budgets[recipient] + amount)
        after = min(new_donor, new_recipient,
                    min((rec[h] for h in range(n) if h not in (donor, recipient)), default=new_donor))
        if not after > before:
            stop = "no further gain"
            break
        transfers.append(Transfer(donor, recipient, amount, rec[donor], rec[recipient], before, after))
        budgets[donor] -= amount
        budgets[recipient] += amount
        rec[donor] = new_donor
        rec[recipient] = new_recipient

    off_grid = tuple(h for h, (c, b) in enumerate(zip(curves, budgets)) if not c.on_grid(b))
    if off_grid:
        notes.append(f"heads {list(off_grid)} evaluated at the nearest sampled budget below their allocation")
    result = BudgetAllocation(tuple(budgets), total, config.floor, heads, method="maxmin",
                              transfers=tuple(transfers), stop_reason=stop, off_grid=off_grid,
                              notes=tuple(notes))
    result.check(n_k)
    return result


@dataclass(frozen=True)
class TopPAllocation:
    """Per-head budgets chosen by an exact top-p rule; the total is whatever it comes to."""

    budgets: tuple[int, ...]
    p: float
    heads: tuple[tuple[int, int], ...]

    @property
    def total(self) -> int:
        return sum(self.budgets)

    def as_allocation(self) -> BudgetAllocation:
        # no floor is enforced by the top-p rule
        return BudgetAllocation(self.budgets, self.total, 0, self.heads, method=f"oracle_topp({self.p})")


def oracle_topp_allocate(profiles, p: float) -> TopPAllocation:
    """Give every head the smallest sampled budget that reaches recovery ``p``."""
    curves = _curves(profiles)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    budgets = tuple(budget_for_recovery(c, p) for c in curves)
    return TopPAllocation(budgets, p, tuple((c.layer, c.head) for c in curves))


def recoveries(profiles, budgets: Sequence[int]) -> list[float]:
    """Recovery of each head at its budget (nearest sampled point at or below)."""
    return [c.at(b) for c, b in zip(_curves(profiles), budgets)]
