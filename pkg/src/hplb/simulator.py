"""Barrier-synchronised latency model for head-parallel attention.

Each device's latency is affine in its load, ``alpha + beta * L_d``, and the
layer finishes when the slowest device does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .allocator import AllocatorConfig, maxmin_allocate, oracle_topp_allocate, uniform_allocate
from .attention import SelectionPolicy
from .partitioner import (
    Assignment,
    LoadReport,
    greedy_assign,
    imbalance,
    naive_assign,
    optimal_assign,
)
from .profiler import SyntheticWorkloadSpec, budget_grid, build_profiles, generate_workload

SWEEP_COLUMNS = (
    "degree",
    "context_length",
    "allocator",
    "assigner",
    "barrier_latency",
    "bubble_fraction",
    "imbalance",
    "speedup_vs_naive",
)


@dataclass(frozen=True)
class CostModel:
    alpha: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be finite and > 0, got {self.beta}")

    def latency(self, load) -> float:
        return self.alpha + self.beta * load


@dataclass(frozen=True)
class SimulationResult:
    latencies: tuple[float, ...]
    barrier_latency: float
    bubble_fraction: float
    imbalance: float

    def speedup_over(self, reference: "SimulationResult") -> float:
        """How much faster this result is than ``reference``."""
        if self.barrier_latency == reference.barrier_latency:
            return 1.0
        return reference.barrier_latency / self.barrier_latency


def simulate(report: LoadReport, cost: CostModel = CostModel()) -> SimulationResult:
    latencies = tuple(cost.latency(x) for x in report.loads)
    barrier = max(latencies)
    if barrier == 0:
        bubble = 0.0
    else:
        bubble = 1.0 - (math.fsum(latencies) / len(latencies)) / barrier
    bubble = max(bubble, 0.0)
    return SimulationResult(latencies, barrier, bubble, report.imbalance)


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    barrier_latency: float
    bubble_fraction: float
    imbalance: float
    speedup: float


def compare(assignments, budgets: Sequence, cost: CostModel = CostModel()) -> list[ComparisonRow]:
    """Simulate several placements of the same heads; speedups are relative to the first.

    ``assignments`` is a sequence of ``(name, Assignment)`` pairs (or a dict).
    """
    items = list(assignments.items()) if isinstance(assignments, dict) else list(assignments)
    if not items:
        raise ValueError("nothing to compare")
    n = len(budgets)
    for name, a in items:
        if a.n_heads != n:
            raise ValueError(f"assignment {name!r} places {a.n_heads} heads, expected {n}")
    results = [(name, simulate(imbalance(budgets, a), cost)) for name, a in items]
    reference = results[0][1]
    return [
        ComparisonRow(name, r.barrier_latency, r.bubble_fraction, r.imbalance, r.speedup_over(reference))
        for name, r in results
    ]


ASSIGNERS = {
    "naive": naive_assign,
    "greedy": greedy_assign,
    "optimal": optimal_assign,
}


def assign(name: str, budgets, n_devices: int) -> Assignment:
    try:
        fn = ASSIGNERS[name]
    except KeyError:
        raise ValueError(f"unknown assigner {name!r} (expected one of {', '.join(ASSIGNERS)})") from None
    return fn(budgets, n_devices)


def allocate(allocator: str, profiles, total: int, config: AllocatorConfig, p: float = 0.9):
    """Dispatch to one of ``uniform``, ``maxmin`` or ``oracle_topp``."""
    if allocator == "uniform":
        n_k = profiles[0].curve.context_length
        heads = [(prof.curve.layer, prof.curve.head) for prof in profiles]
        return uniform_allocate(len(profiles), total, config.floor, n_k, heads)
    if allocator == "maxmin":
        return maxmin_allocate(profiles, total, config)
    if allocator == "oracle_topp":
        return oracle_topp_allocate(profiles, p).as_allocation()
    raise ValueError(f"unknown allocator {allocator!r} (expected uniform, maxmin or oracle_topp)")


def sweep(degrees: Iterable[int], context_lengths: Iterable[int], spec: SyntheticWorkloadSpec,
          allocator: str = "maxmin", budget_fraction: float = 0.25,
          config: AllocatorConfig = AllocatorConfig(), cost: CostModel = CostModel(),
          policy=SelectionPolicy.PER_QUERY_TOPK, assigners: Sequence[str] = ("naive", "greedy"),
          p: float = 0.9) -> list[dict]:
    """Naive vs balanced placement across parallelism degrees and context lengths.

    For every context length a workload is generated from ``spec`` (same seed
    and exponents, new length), profiled on the transfer-quantum grid and
    allocated with ``budget_fraction`` of the full budget. Every degree then
    gets one row per assigner, in the column order of :data:`SWEEP_COLUMNS`.
    """
    degrees = [int(d) for d in degrees]
    context_lengths = [int(n) for n in context_lengths]
    if any(d < 1 for d in degrees):
        raise ValueError("parallelism degrees must be >= 1")
    if any(n < 1 for n in context_lengths):
        raise ValueError("context lengths must be >= 1")
    if "naive" not in assigners:
        assigners = ("naive", *assigners)
    rows = []
    for n_k in context_lengths:
        workload = generate_workload(spec.replace(context_length=n_k))
        profiles = build_profiles(workload, budget_grid(n_k, config.delta), policy)
        total = int(round(budget_fraction * workload.n_heads * n_k))
        budgets = allocate(allocator, profiles, total, config, p).budgets
        for degree in degrees:
            results = {name: simulate(imbalance(budgets, assign(name, budgets, degree)), cost)
                       for name in assigners}
            naive = results["naive"]
            for name in assigners:
                r = results[name]
                rows.append({
                    "degree": degree,
                    "context_length": n_k,
                    "allocator": allocator,
                    "assigner": name,
                    "barrier_latency": r.barrier_latency,
                    "bubble_fraction": r.bubble_fraction,
                    "imbalance": r.imbalance,
                    "speedup_vs_naive": r.speedup_over(naive),
                })
    return rows
