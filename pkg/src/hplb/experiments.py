"""End-to-end experiment drivers shared by the CLI and the acceptance tests."""

from __future__ import annotations

import math
from typing import Sequence

from .allocator import AllocatorConfig
from .attention import AttentionWorkload, SelectionPolicy, dense_attention, output_error, sparse_attention
from .partitioner import greedy_assign, imbalance, naive_assign
from .profiler import budget_grid, build_profiles
from .simulator import CostModel, allocate, simulate

SKYLINE_COLUMNS = (
    "total_budget",
    "allocator",
    "mean_output_error",
    "min_recovery",
    "barrier_latency",
    "naive_barrier_latency",
)


def skyline(workload: AttentionWorkload, totals: Sequence[int], n_devices: int,
            config: AllocatorConfig = AllocatorConfig(), cost: CostModel = CostModel(),
            policy=SelectionPolicy.PER_QUERY_TOPK, allocators: Sequence[str] = ("uniform", "maxmin")) -> list[dict]:
    """Accuracy proxy versus simulated latency over a sweep of total budgets.

    For every total and allocator: allocate, run budgeted attention on every
    head, average the relative output error against dense attention, then
    place the heads greedily (and naively, for reference) and simulate.
    """
    policy = SelectionPolicy.parse(policy)
    n_k = workload.context_length
    profiles = build_profiles(workload, budget_grid(n_k, config.delta), policy)
    dense = [dense_attention(head)[1] for head in workload.heads]
    rows = []
    for total in totals:
        for name in allocators:
            alloc = allocate(name, profiles, int(total), config)
            errors = [
                output_error(sparse_attention(head, b, policy), ref)
                for head, b, ref in zip(workload.heads, alloc.budgets, dense)
            ]
            min_rec = min(prof.curve.at(b) for prof, b in zip(profiles, alloc.budgets))
            greedy = simulate(imbalance(alloc.budgets, greedy_assign(alloc.budgets, n_devices)), cost)
            naive = simulate(imbalance(alloc.budgets, naive_assign(alloc.budgets, n_devices)), cost)
            rows.append({
                "total_budget": int(total),
                "allocator": name,
                "mean_output_error": math.fsum(errors) / len(errors),
                "min_recovery": min_rec,
                "barrier_latency": greedy.barrier_latency,
                "naive_barrier_latency": naive.barrier_latency,
            })
    return rows
