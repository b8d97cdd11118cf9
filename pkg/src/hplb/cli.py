"""Command-line driver: ``hplb {profile,allocate,partition,skyline,sweep}``.

Settings come from an optional JSON config file (``--config``); command-line
flags override it. Exit status is 0 on success, 2 for configuration errors and
3 for runtime or feasibility errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .allocator import AllocatorConfig, BudgetAllocation, recoveries
from .attention import SelectionPolicy
from .errors import HPLBError, InstanceTooLargeError, ProfileFormatError
from .experiments import SKYLINE_COLUMNS, skyline
from .files import load_allocation, save_allocation, save_assignment, write_csv
from .partitioner import imbalance, optimal_assign
from .profiler import (
    SyntheticWorkloadSpec,
    budget_for_recovery,
    budget_grid,
    build_profiles,
    generate_workload,
    load_profiles,
    save_profiles,
)
from .simulator import SWEEP_COLUMNS, CostModel, allocate, assign, simulate, sweep

log = logging.getLogger("hplb")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    # synthetic workload
    n_heads: int = 32
    context_length: int = 1024
    n_queries: int = 16
    head_dim: int = 16
    exponent_range: tuple = (0.3, 2.5)
    exponents: list | None = None
    noise: float = 0.0
    layer: int = 0
    # inputs that replace the synthetic workload
    profiles: str | None = None
    allocation: str | None = None
    budgets: list | None = None
    # budgets
    total_budget: int | None = None
    budget_fraction: float = 0.25
    floor: int = 128
    delta: int = 64
    max_iterations: int | None = None
    policy: str = "per_query_topk"
    target_recovery: float = 0.9
    allocator: str = "maxmin"
    assigner: str = "greedy"
    with_optimal: bool = False
    devices: list = field(default_factory=lambda: [4])
    alpha: float = 0.0
    beta: float = 1.0
    # sweeps
    skyline_budgets: list | None = None
    sweep_degrees: list = field(default_factory=lambda: [1, 2, 4, 8])
    sweep_lengths: list = field(default_factory=lambda: [1024, 2048, 4096])
    seed: int | None = None
    out: str | None = None

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown config key(s): {', '.join(unknown)}")
        return cls(**doc)

    def allocator_choice(self) -> tuple[str, float]:
        """Split ``oracle_topp:0.9`` style choices into name and threshold."""
        name, _, arg = self.allocator.partition(":")
        p = self.target_recovery
        if arg:
            try:
                p = float(arg)
            except ValueError:
                raise ConfigError(f"bad top-p threshold in allocator {self.allocator!r}") from None
        if name not in ("uniform", "maxmin", "oracle_topp"):
            raise ConfigError(f"unknown allocator {name!r} (expected uniform, maxmin or oracle_topp[:p])")
        if not 0 < p <= 1:
            raise ConfigError(f"top-p threshold must be in (0, 1], got {p}")
        return name, p

    def validate(self) -> None:
        try:
            SelectionPolicy.parse(self.policy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.allocator_choice()
        if self.assigner not in ("naive", "greedy", "optimal"):
            raise ConfigError(f"unknown assigner {self.assigner!r} (expected naive, greedy or optimal)")
        if not self.devices or any(int(d) < 1 for d in self.devices):
            raise ConfigError("device counts must be >= 1")
        if self.delta < 1:
            raise ConfigError("delta must be >= 1")
        if self.floor < 0:
            raise ConfigError("floor must be >= 0")
        if self.alpha < 0 or self.beta <= 0:
            raise ConfigError("cost model needs alpha >= 0 and beta > 0")
        if self.out is None:
            raise ConfigError("no output directory given (use --out)")
        out = Path(self.out)
        if not out.is_dir():
            raise ConfigError(f"output directory {out} does not exist")
        # with a profile file the head count is only known after loading; the allocator checks it then
        if self.needs_seed() and self.total_budget is not None:
            lo, hi = self.n_heads * self.floor, self.n_heads * self.context_length
            if not lo <= self.total_budget <= hi:
                raise ConfigError(f"total budget {self.total_budget} outside [{lo}, {hi}] for "
                                  f"{self.n_heads} heads, floor {self.floor}, context length {self.context_length}")

    def needs_seed(self) -> bool:
        return self.profiles is None and self.allocation is None and self.budgets is None

    def allocator_config(self) -> AllocatorConfig:
        return AllocatorConfig(delta=self.delta, floor=self.floor, max_iterations=self.max_iterations)

    def cost_model(self) -> CostModel:
        return CostModel(self.alpha, self.beta)


class Run:
    """Per-run state; owns the single seeded generator."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out = Path(config.out)
        self.rng = np.random.default_rng(config.seed)
        self._exponents = None

    def exponents(self) -> tuple[float, ...]:
        c = self.config
        if c.exponents is not None:
            return tuple(float(s) for s in c.exponents)
        if self._exponents is None:
            lo, hi = c.exponent_range
            self._exponents = tuple(float(s) for s in self.rng.uniform(lo, hi, size=c.n_heads))
        return self._exponents

    def workload_spec(self, context_length: int | None = None) -> SyntheticWorkloadSpec:
        c = self.config
        exponents = self.exponents()
        return SyntheticWorkloadSpec(
            n_heads=c.n_heads,
            context_length=context_length or c.context_length,
            n_queries=c.n_queries,
            head_dim=c.head_dim,
            exponent_range=tuple(c.exponent_range),
            exponents=exponents,
            noise=c.noise,
            seed=int(self.rng.integers(2**63)),
            layer=c.layer,
        )

    def profiles(self):
        c = self.config
        if c.profiles is not None:
            return load_profiles(c.profiles)
        workload = generate_workload(self.workload_spec())
        grid = budget_grid(workload.context_length, c.delta)
        request = f"seed-{c.seed}"
        return build_profiles(workload, grid, c.policy, request=request, task="synthetic")

    def total_budget(self, n_heads: int, context_length: int) -> int:
        c = self.config
        if c.total_budget is not None:
            return int(c.total_budget)
        return int(round(c.budget_fraction * n_heads * context_length))

    def allocate(self, profiles) -> BudgetAllocation:
        name, p = self.config.allocator_choice()
        n_k = profiles[0].curve.context_length
        total = self.total_budget(len(profiles), n_k)
        return allocate(name, profiles, total, self.config.allocator_config(), p)


def _print_table(rows, header):
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(str(h).rjust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(x).rjust(w) for x, w in zip(r, widths)))


def cmd_profile(run: Run) -> int:
    c = run.config
    profiles = run.profiles()
    path = save_profiles(run.out / "profiles.json", profiles)
    budgets = [budget_for_recovery(prof, c.target_recovery) for prof in profiles]
    top = max(budgets)
    rows = [(prof.curve.layer, prof.curve.head, b, f"{b / top:.4f}") for prof, b in zip(profiles, budgets)]
    print(f"budget needed for recovery {c.target_recovery} per head:")
    _print_table(rows, ("layer", "head", "budget", "normalized"))
    print(f"spread max/min = {max(budgets) / max(min(budgets), 1):.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_allocate(run: Run) -> int:
    profiles = run.profiles()
    alloc = run.allocate(profiles)
    path = save_allocation(run.out / "allocation.json", alloc)
    rec = recoveries(profiles, alloc.budgets)
    print(f"allocator: {alloc.method}  total: {alloc.total}  floor: {alloc.floor}")
    print(f"transfers: {len(alloc.transfers)}" + (f"  (stopped: {alloc.stop_reason})" if alloc.stop_reason else ""))
    print(f"min recovery: {min(rec):.6f}  mean recovery: {sum(rec) / len(rec):.6f}")
    for note in alloc.notes:
        print(f"note: {note}")
    _print_table([(layer, head, b, f"{r:.4f}") for (layer, head), b, r in zip(alloc.heads, alloc.budgets, rec)],
                 ("layer", "head", "budget", "recovery"))
    print(f"wrote {path}")
    return EXIT_OK


def _partition_budgets(run: Run):
    c = run.config
    if c.budgets is not None:
        budgets = [int(b) for b in c.budgets]
        return budgets, [(c.layer, h) for h in range(len(budgets))]
    if c.allocation is not None:
        alloc = load_allocation(c.allocation)
    else:
        alloc = run.allocate(run.profiles())
    return list(alloc.budgets), list(alloc.heads)


def cmd_partition(run: Run) -> int:
    c = run.config
    budgets, heads = _partition_budgets(run)
    cost = c.cost_model()
    for k in c.devices:
        k = int(k)
        a = assign(c.assigner, budgets, k)
        report = imbalance(budgets, a)
        path = save_assignment(run.out / f"assignment_{c.assigner}_d{k}.json", a, budgets, heads)
        sim = simulate(report, cost)
        print(f"devices={k} assigner={c.assigner} loads={list(report.loads)} "
              f"imbalance={report.imbalance:.6f} barrier={sim.barrier_latency:g} bubble={sim.bubble_fraction:.4f}")
        if c.with_optimal:
            try:
                best = imbalance(budgets, optimal_assign(budgets, k))
            except InstanceTooLargeError as exc:
                print(f"  optimal check skipped: {exc}")
                continue
            if best.max_load < report.max_load:
                print(f"  {c.assigner} is suboptimal: optimal loads={list(best.loads)} "
                      f"imbalance={best.imbalance:.6f}")
            else:
                print(f"  {c.assigner} matches the optimum (imbalance={best.imbalance:.6f})")
        print(f"  wrote {path}")
    return EXIT_OK


def cmd_skyline(run: Run) -> int:
    c = run.config
    spec = run.workload_spec()
    workload = generate_workload(spec)
    full = workload.n_heads * workload.context_length
    totals = c.skyline_budgets or [full // 8, full // 4, full // 2, full]
    rows = skyline(workload, totals, int(c.devices[0]), c.allocator_config(), c.cost_model(), c.policy)
    path = write_csv(run.out / "skyline.csv", SKYLINE_COLUMNS, rows)
    for r in rows:
        print(f"B={r['total_budget']:>7} {r['allocator']:>8}  error={r['mean_output_error']:.6f}  "
              f"latency={r['barrier_latency']:g} (naive {r['naive_barrier_latency']:g})")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(run: Run) -> int:
    c = run.config
    name, p = c.allocator_choice()
    assigners = ("naive", "greedy") if c.assigner in ("naive", "greedy") else ("naive", "greedy", c.assigner)
    rows = sweep(c.sweep_degrees, c.sweep_lengths, run.workload_spec(), allocator=name,
                 budget_fraction=c.budget_fraction, config=c.allocator_config(), cost=c.cost_model(),
                 policy=c.policy, assigners=assigners, p=p)
    path = write_csv(run.out / "sweep.csv", SWEEP_COLUMNS, rows)
    for r in rows:
        if r["assigner"] != "naive":
            print(f"degree={r['degree']} n_k={r['context_length']} {r['assigner']}: "
                  f"speedup={r['speedup_vs_naive']:.4f} imbalance={r['imbalance']:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "profile": cmd_profile,
    "allocate": cmd_allocate,
    "partition": cmd_partition,
    "skyline": cmd_skyline,
    "sweep": cmd_sweep,
}


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="seed for all randomness in the run")
    common.add_argument("--out", help="existing output directory")
    common.add_argument("--devices", type=_int_list, help="device count(s), comma separated")
    common.add_argument("--total-budget", type=int, dest="total_budget")
    common.add_argument("--floor", type=int)
    common.add_argument("--delta", type=int)
    common.add_argument("--policy", choices=[p.value for p in SelectionPolicy])
    common.add_argument("--allocator", help="uniform | maxmin | oracle_topp[:p]")
    common.add_argument("--assigner", choices=["naive", "greedy", "optimal"])
    common.add_argument("--alpha", type=float, help="fixed per-device latency")
    common.add_argument("--beta", type=float, help="latency per budget token")
    common.add_argument("--profiles", help="profile file to use instead of a synthetic workload")
    common.add_argument("--allocation", help="allocation file (partition only)")
    common.add_argument("--budgets", type=_int_list, help="explicit per-head budgets (partition only)")
    common.add_argument("--with-optimal", action="store_true", default=None, dest="with_optimal",
                        help="also run the exact solver and flag suboptimal placements")
    common.add_argument("--skyline-budgets", type=_int_list, dest="skyline_budgets")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hplb", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], argument_default=argparse.SUPPRESS)
    return parser


OVERRIDES = (
    "seed", "out", "devices", "total_budget", "floor", "delta", "policy", "allocator", "assigner",
    "alpha", "beta", "profiles", "allocation", "budgets", "with_optimal", "skyline_budgets",
)


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for name in OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    if config.needs_seed() and config.seed is None:
        raise ConfigError("synthetic runs need a seed (--seed or 'seed' in the config)")
    config.validate()
    return config


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        run = Run(config)
        return COMMANDS[args.command](run)
    except (ConfigError, ProfileFormatError) as exc:
        print(f"hplb: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"hplb: error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_CONFIG
    except (HPLBError, ValueError) as exc:
        print(f"hplb: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
