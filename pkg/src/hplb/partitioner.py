"""Head-to-device placement and the load imbalance ratio.

The imbalance of a placement is ``max_d L_d / mean_d L_d`` where ``L_d`` is the
sum of the budgets of the heads on device ``d``. Minimising it with the head
count fixed is multiway number partitioning.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import InstanceTooLargeError

MAX_EXACT_HEADS = 24
MAX_EXACT_DEVICES = 4


@dataclass(frozen=True)
class Assignment:
    """``device_of[h]`` is the device that runs head ``h``."""

    n_devices: int
    device_of: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "device_of", tuple(int(d) for d in self.device_of))
        if self.n_devices < 1:
            raise ValueError("need at least one device")
        bad = [h for h, d in enumerate(self.device_of) if not 0 <= d < self.n_devices]
        if bad:
            raise ValueError(f"heads {bad} assigned to devices outside [0, {self.n_devices})")

    @property
    def n_heads(self) -> int:
        return len(self.device_of)

    @property
    def groups(self) -> list[list[int]]:
        """Heads on each device, in head order."""
        out: list[list[int]] = [[] for _ in range(self.n_devices)]
        for h, d in enumerate(self.device_of):
            out[d].append(h)
        return out

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]], n_heads: int | None = None) -> "Assignment":
        """Build from per-device head sets, rejecting overlaps and gaps."""
        if n_heads is None:
            n_heads = 1 + max((h for g in groups for h in g), default=-1)
        device_of: list[int | None] = [None] * n_heads
        for d, group in enumerate(groups):
            for h in group:
                if not 0 <= h < n_heads:
                    raise ValueError(f"head {h} out of range [0, {n_heads})")
                if device_of[h] is not None:
                    raise ValueError(f"head {h} assigned to devices {device_of[h]} and {d}")
                device_of[h] = d
        missing = [h for h, d in enumerate(device_of) if d is None]
        if missing:
            raise ValueError(f"heads {missing} not assigned to any device")
        return cls(len(groups), tuple(device_of))


@dataclass(frozen=True)
class LoadReport:
    loads: tuple
    imbalance: float
    argmax: int
    total: float
    arithmetic: str

    @property
    def n_devices(self) -> int:
        return len(self.loads)

    @property
    def max_load(self):
        return self.loads[self.argmax]


def _check_budgets(budgets) -> list:
    budgets = list(budgets)
    for h, b in enumerate(budgets):
        if b < 0:
            raise ValueError(f"head {h} has negative budget {b}")
    return budgets


def loads_of(budgets, assignment: Assignment) -> list:
    loads = [0] * assignment.n_devices
    for b, d in zip(budgets, assignment.device_of):
        loads[d] += b
    return loads


def imbalance_of_loads(loads) -> LoadReport:
    """Imbalance of a plain load vector.

    Integer loads are evaluated with exact rationals and rounded once at the
    end; anything else uses float arithmetic. All-zero loads count as balanced.
    """
    loads = tuple(loads)
    if not loads:
        raise ValueError("need at least one device")
    exact = all(isinstance(x, int) and not isinstance(x, bool) for x in loads)
    argmax = max(range(len(loads)), key=lambda d: (loads[d], -d))
    total = sum(loads)
    if total == 0:
        return LoadReport(loads, 1.0, argmax, total, "exact-rational" if exact else "double")
    if exact:
        ratio = float(Fraction(loads[argmax] * len(loads), total))
        return LoadReport(loads, ratio, argmax, total, "exact-rational")
    ratio = float(loads[argmax]) / (float(total) / len(loads))
    return LoadReport(loads, ratio, argmax, total, "double")


def imbalance(budgets, assignment: Assignment) -> LoadReport:
    budgets = _check_budgets(budgets)
    if len(budgets) != assignment.n_heads:
        raise ValueError(f"{len(budgets)} budgets but the assignment places {assignment.n_heads} heads")
    return imbalance_of_loads(loads_of(budgets, assignment))


def naive_assign(budgets, n_devices: int, round_robin: bool = False) -> Assignment:
    """Budget-blind placement: contiguous equal-count blocks (or round-robin)."""
    n = len(budgets)
    if n_devices < 1:
        raise ValueError("need at least one device")
    if n_devices > n:
        raise ValueError(f"{n_devices} devices for only {n} heads")
    if round_robin:
        return Assignment(n_devices, tuple(h % n_devices for h in range(n)))
    size, extra = divmod(n, n_devices)
    device_of = []
    for d in range(n_devices):
        device_of += [d] * (size + (1 if d < extra else 0))
    return Assignment(n_devices, tuple(device_of))


def greedy_assign(budgets, n_devices: int) -> Assignment:
    """Longest-processing-time-first: biggest head to the currently lightest device."""
    budgets = _check_budgets(budgets)
    if n_devices < 1:
        raise ValueError("need at least one device")
    order = sorted(range(len(budgets)), key=lambda h: (-budgets[h], h))
    heap = [(0, d) for d in range(n_devices)]
    device_of = [0] * len(budgets)
    for h in order:
        load, d = heapq.heappop(heap)
        device_of[h] = d
        heapq.heappush(heap, (load + budgets[h], d))
    return Assignment(n_devices, tuple(device_of))


def optimal_assign(budgets, n_devices: int) -> Assignment:
    """Exact minimum-imbalance placement for small instances.

    Among all optimal placements, returns the lexicographically smallest
    ``device_of`` vector. Guarded to at most 24 heads and 4 devices.
    """
    budgets = _check_budgets(budgets)
    n = len(budgets)
    if n_devices < 1:
        raise ValueError("need at least one device")
    if n > MAX_EXACT_HEADS or n_devices > MAX_EXACT_DEVICES:
        raise InstanceTooLargeError(
            f"exact partitioning limited to {MAX_EXACT_HEADS} heads and {MAX_EXACT_DEVICES} devices"
            f" (got {n} heads, {n_devices} devices); use greedy_assign instead"
        )
    if n == 0:
        return Assignment(n_devices, ())
    exact = all(isinstance(b, int) for b in budgets)
    if exact:
        # token budgets usually share a large common factor (the transfer quantum)
        g = math.gcd(*budgets)
        if g > 1:
            budgets = [b // g for b in budgets]
    upper = max(loads_of(budgets, greedy_assign(budgets, n_devices)))
    if exact:
        limit = _min_makespan_int(budgets, n_devices, upper)
    else:
        limit = _min_makespan(budgets, n_devices, upper) * (1 + 1e-12)
    return Assignment(n_devices, _lexicographic_fit(_Packer(budgets, n_devices, limit)))


class _Packer:
    """Decides whether the heads from ``start`` onwards fit under ``limit``.

    The search places the remaining budgets in descending order, skips devices
    with equal loads, and memoises dead states, which stay dead because the
    limit is fixed. For integer budgets it also checks that every device can
    still be filled to within the current slack by some subset of what is left.
    """

    def __init__(self, budgets, n_devices, limit):
        self.budgets = list(budgets)
        self.n_devices = n_devices
        self.limit = limit
        n = len(self.budgets)
        self.suffix_items = [sorted(self.budgets[start:], reverse=True) for start in range(n + 1)]
        self.exact = all(isinstance(b, int) for b in self.budgets) and isinstance(limit, int)
        self.dead = set()
        self._sums = {}

    def _subset_sums(self, start, i):
        # bit s set <=> some subset of the remaining budgets sums to s
        key = (start, i)
        bits = self._sums.get(key)
        if bits is None:
            bits = 1
            for b in self.suffix_items[start][i:]:
                bits |= bits << b
            self._sums[key] = bits
        return bits

    def _fills_reachable(self, start, i, work, slack):
        bits = self._subset_sums(start, i)
        for x in work:
            hi = self.limit - x
            lo = max(0, hi - slack)
            if not (bits >> lo) & ((1 << (hi - lo + 1)) - 1):
                return False
        return True

    def fits(self, start, loads) -> bool:
        items = self.suffix_items[start]
        m = len(items)
        limit = self.limit
        work = sorted(loads)
        if work and work[-1] > limit:
            return False

        def dfs(i, remaining):
            if i == m:
                return True
            state = (start, i, tuple(sorted(work)))
            if state in self.dead:
                return False
            headroom = sum(limit - x for x in work)
            # headroom smaller than the smallest remaining budget can never be used
            smallest = items[-1]
            usable = sum(limit - x for x in work if limit - x >= smallest)
            if remaining <= usable and (
                not self.exact or self._fills_reachable(start, i, work, headroom - remaining)
            ):
                b = items[i]
                tried = set()
                for d in range(self.n_devices):
                    if work[d] in tried or work[d] + b > limit:
                        continue
                    tried.add(work[d])
                    work[d] += b
                    ok = dfs(i + 1, remaining - b)
                    work[d] -= b
                    if ok:
                        return True
            self.dead.add(state)
            return False

        return dfs(0, sum(items))


def _min_makespan_int(budgets, n_devices, upper):
    """Binary search for the smallest integer max load that admits a packing."""
    lo = max(max(budgets), -(-sum(budgets) // n_devices))
    hi = upper
    while lo < hi:
        mid = (lo + hi) // 2
        if _Packer(budgets, n_devices, mid).fits(0, [0] * n_devices):
            hi = mid
        else:
            lo = mid + 1
    return hi


def _min_makespan(budgets, n_devices, upper):
    """Smallest achievable max load for real-valued budgets, by branch and bound."""
    items = sorted(budgets, reverse=True)
    n = len(items)
    lower = max(items[0], sum(items) / n_devices)
    if upper <= lower:
        return upper
    suffix = [0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix[i] = suffix[i + 1] + items[i]
    best = upper
    loads = [0] * n_devices
    dead = set()

    def dfs(i):
        # True once the lower bound is reached and the search can stop
        nonlocal best
        if i == n:
            best = max(loads)
            return best <= lower
        state = (i, tuple(sorted(loads)))
        if state in dead:
            return False
        # every final load must stay strictly below best
        if suffix[i] < sum(best - x for x in loads):
            b = items[i]
            tried = set()
            for d in range(n_devices):
                if loads[d] in tried or loads[d] + b >= best:
                    continue
                tried.add(loads[d])
                loads[d] += b
                stop = dfs(i + 1)
                loads[d] -= b
                if stop:
                    return True
        # best only ever decreases, so a dead state stays dead
        dead.add(state)
        return False

    dfs(0)
    return best


def _lexicographic_fit(packer: _Packer):
    """Lexicographically first device vector with every load within the packer's limit.

    Heads are fixed in index order; a tentative placement is kept only if the
    rest can still be packed.
    """
    loads = [0] * packer.n_devices
    device_of = []
    used = 0
    for h, b in enumerate(packer.budgets):
        # devices are labelled in order of first use; that never loses the lexicographic minimum
        for d in range(min(used + 1, packer.n_devices)):
            if loads[d] + b > packer.limit:
                continue
            loads[d] += b
            if packer.fits(h + 1, loads):
                device_of.append(d)
                used = max(used, d + 1)
                break
            loads[d] -= b
        else:
            raise AssertionError("no placement fits the optimal bound")
    return tuple(device_of)
