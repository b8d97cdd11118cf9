"""Offline per-head profiling: recovery curves, synthetic workloads, stability.

Synthetic heads follow a per-head power law: sorted attention weights decay
like ``rank ** -s`` so a larger exponent ``s`` means a sparser head.
"""

from __future__ import annotations

import bisect
import itertools
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import AttentionHead, AttentionWorkload, SelectionPolicy, dense_attention, recovery_curve
from .errors import BudgetError, CurveError, ProfileFormatError

PROFILE_FORMAT_VERSION = 1
CURVE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RecoveryCurve:
    """Sampled budget -> recovery function of one head."""

    layer: int
    head: int
    budgets: tuple[int, ...]
    recovery: tuple[float, ...]
    context_length: int

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        object.__setattr__(self, "recovery", tuple(float(r) for r in self.recovery))
        self.validate()

    def validate(self) -> None:
        b, r = self.budgets, self.recovery
        if len(b) != len(r):
            raise CurveError(f"{len(b)} budgets but {len(r)} recovery values")
        if not b:
            raise CurveError("curve has no points")
        if any(y <= x for x, y in zip(b, b[1:])):
            raise CurveError("budgets not strictly increasing")
        if b[0] < 0:
            raise CurveError("budgets must be >= 0")
        if b[-1] != self.context_length:
            raise CurveError(f"last budget {b[-1]} != context length {self.context_length}")
        if any(not math.isfinite(x) or x < 0.0 or x > 1.0 + CURVE_TOLERANCE for x in r):
            raise CurveError("recovery values must lie in [0, 1]")
        if any(y < x for x, y in zip(r, r[1:])):
            raise CurveError("recovery not nondecreasing")
        if abs(r[-1] - 1.0) > CURVE_TOLERANCE:
            raise CurveError(f"recovery at full budget is {r[-1]!r}, expected 1")
        if b[0] == 0 and r[0] != 0.0:
            raise CurveError("recovery at zero budget must be 0")

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.budgets, self.recovery))

    def at(self, budget: int) -> float:
        """Recovery at the nearest sampled budget <= ``budget``."""
        i = bisect.bisect_right(self.budgets, budget) - 1
        if i < 0:
            raise BudgetError(
                f"head ({self.layer}, {self.head}): budget {budget} below first sampled point {self.budgets[0]}"
            )
        return self.recovery[i]

    def on_grid(self, budget: int) -> bool:
        i = bisect.bisect_left(self.budgets, budget)
        return i < len(self.budgets) and self.budgets[i] == budget


@dataclass(frozen=True)
class HeadProfile:
    curve: RecoveryCurve
    request: str = "calibration"
    task: str = "synthetic"
    policy: SelectionPolicy = SelectionPolicy.PER_QUERY_TOPK

    def __post_init__(self):
        object.__setattr__(self, "policy", SelectionPolicy.parse(self.policy))
        if not self.request or not self.task:
            raise CurveError("provenance (request, task) must be nonempty")

    @property
    def key(self) -> tuple[int, int]:
        return self.curve.layer, self.curve.head


@dataclass(frozen=True)
class SyntheticWorkloadSpec:
    """Recipe for a seeded power-law workload.

    ``exponents`` fixes the per-head exponents; when omitted they are drawn
    uniformly from ``exponent_range`` using ``seed``. ``noise`` is the standard
    deviation of the log-normal multiplicative noise on every weight.
    ``head_dim`` must be at least ``n_queries`` so the scores can be realised
    exactly by Q and K.
    """

    n_heads: int = 32
    context_length: int = 1024
    n_queries: int = 16
    head_dim: int = 16
    exponent_range: tuple[float, float] = (0.3, 2.5)
    exponents: tuple[float, ...] | None = None
    noise: float = 0.0
    seed: int = 0
    layer: int = 0

    def __post_init__(self):
        if self.exponents is not None:
            object.__setattr__(self, "exponents", tuple(float(s) for s in self.exponents))
        object.__setattr__(self, "exponent_range", tuple(float(s) for s in self.exponent_range))
        self.validate()

    def validate(self) -> None:
        for name in ("n_heads", "context_length", "n_queries", "head_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.exponent_range
        if not 0.0 <= lo <= hi:
            raise ValueError(f"exponent range must satisfy 0 <= min <= max, got {self.exponent_range}")
        if self.exponents is not None:
            if len(self.exponents) != self.n_heads:
                raise ValueError(f"{len(self.exponents)} exponents given for {self.n_heads} heads")
            if any(s < 0 or not math.isfinite(s) for s in self.exponents):
                raise ValueError("exponents must be finite and >= 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.head_dim < self.n_queries:
            raise ValueError(f"head_dim ({self.head_dim}) must be >= n_queries ({self.n_queries})")

    def replace(self, **changes) -> "SyntheticWorkloadSpec":
        return replace(self, **changes)


def power_law_logits(n_keys: int, exponent: float) -> np.ndarray:
    """log(rank ** -exponent) for ranks 1..n_keys."""
    return -exponent * np.log(np.arange(1, n_keys + 1, dtype=np.float64))


def generate_workload(spec: SyntheticWorkloadSpec) -> AttentionWorkload:
    """Build an :class:`AttentionWorkload` whose dense weights follow ``spec``.

    Scores are laid out directly as log-weights and realised as
    ``Q = [I, 0]`` and ``K = sqrt(d_h) [S^T, 0]`` so that ``Q K^T / sqrt(d_h)``
    reproduces them. Each head gets its own key permutation; V is Gaussian.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.exponents is None:
        lo, hi = spec.exponent_range
        exponents = tuple(float(s) for s in rng.uniform(lo, hi, size=spec.n_heads))
    else:
        exponents = spec.exponents
    n_q, n_k, d = spec.n_queries, spec.context_length, spec.head_dim
    scale = math.sqrt(d)
    heads = []
    for s in exponents:
        base = power_law_logits(n_k, s)
        scores = np.broadcast_to(base, (n_q, n_k)).copy()
        if spec.noise > 0:
            scores += rng.normal(0.0, spec.noise, size=(n_q, n_k))
        perm = rng.permutation(n_k)
        scores = scores[:, perm]
        q = np.zeros((n_q, d))
        q[:, :n_q] = np.eye(n_q)
        k = np.zeros((n_k, d))
        k[:, :n_q] = scale * scores.T
        v = rng.standard_normal((n_k, d))
        heads.append(AttentionHead(q, k, v))
    return AttentionWorkload(tuple(heads), layer=spec.layer, exponents=exponents)


def budget_grid(context_length: int, step: int, start: int = 0) -> list[int]:
    """Budgets ``start, start+step, ...`` up to and including ``context_length``."""
    if step < 1:
        raise ValueError("grid step must be >= 1")
    grid = list(range(start, context_length + 1, step))
    if not grid or grid[-1] != context_length:
        grid.append(context_length)
    return grid


def build_profiles(workload: AttentionWorkload, grid: Sequence[int], policy=SelectionPolicy.PER_QUERY_TOPK,
                   request: str = "calibration", task: str = "synthetic") -> list[HeadProfile]:
    """Sample every head's recovery curve on ``grid``."""
    policy = SelectionPolicy.parse(policy)
    n_k = workload.context_length
    grid = [int(g) for g in grid]
    if not grid:
        raise BudgetError("budget grid is empty")
    if any(y <= x for x, y in zip(grid, grid[1:])):
        raise BudgetError("budget grid must be strictly increasing")
    if grid[0] < 0 or grid[-1] > n_k:
        raise BudgetError(f"budget grid must lie within [0, {n_k}]")
    if grid[-1] != n_k:
        raise BudgetError(f"budget grid must include the context length {n_k}")
    profiles = []
    for h, head in enumerate(workload.heads):
        weights, _ = dense_attention(head)
        full = recovery_curve(weights, policy)
        curve = RecoveryCurve(workload.layer, h, tuple(grid), tuple(full[grid]), n_k)
        profiles.append(HeadProfile(curve, request=request, task=task, policy=policy))
    return profiles


def _curve_of(item) -> RecoveryCurve:
    return item.curve if isinstance(item, HeadProfile) else item


def budget_for_recovery(curve, p: float) -> int:
    """Smallest sampled budget whose recovery reaches ``p`` (no interpolation)."""
    curve = _curve_of(curve)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"target recovery p must be in (0, 1], got {p}")
    for b, r in zip(curve.budgets, curve.recovery):
        if r >= p:
            return b
    raise BudgetError(f"head ({curve.layer}, {curve.head}) never reaches recovery {p}")


def budget_vector(profiles, p: float, normalize: str | None = "max") -> np.ndarray:
    """Per-head budgets for target ``p``, ordered by (layer, head), optionally normalised."""
    ordered = sorted(profiles, key=lambda x: (_curve_of(x).layer, _curve_of(x).head))
    vec = np.array([budget_for_recovery(x, p) for x in ordered], dtype=np.float64)
    if normalize == "max":
        vec = vec / vec.max()
    elif normalize == "sum":
        vec = vec / vec.sum()
    elif normalize is not None:
        raise ValueError(f"unknown normalisation {normalize!r} (expected 'max', 'sum' or None)")
    return vec


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    return float(np.dot(xc, yc) / math.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))


def stability_score(groups, p: float = 0.9, normalize: str = "max") -> float:
    """Minimum pairwise Pearson correlation of normalised budget vectors.

    ``groups`` holds one list of profiles per calibration request; every group
    must cover the same (layer, head) set.
    """
    groups = [list(g) for g in groups]
    if len(groups) < 2:
        raise ValueError("stability needs at least two requests")
    keys = sorted((_curve_of(x).layer, _curve_of(x).head) for x in groups[0])
    names = []
    vectors = []
    for i, g in enumerate(groups):
        name = g[0].request if g and isinstance(g[0], HeadProfile) else f"#{i}"
        if sorted((_curve_of(x).layer, _curve_of(x).head) for x in g) != keys:
            raise ValueError(f"request {name} covers a different head set")
        vec = budget_vector(g, p, normalize)
        if np.all(vec == vec[0]):
            raise ValueError(f"request {name}: budget vector has zero variance")
        names.append(name)
        vectors.append(vec)
    return min(_pearson(a, b) for a, b in itertools.combinations(vectors, 2))


# -- profile files ----------------------------------------------------------

def profiles_to_dict(profiles: Sequence[HeadProfile]) -> dict:
    if not profiles:
        raise ValueError("no profiles to save")
    policy = profiles[0].policy
    n_k = profiles[0].curve.context_length
    for prof in profiles:
        if prof.policy is not policy:
            raise ValueError("all profiles in one file must share a selection policy")
        if prof.curve.context_length != n_k:
            raise ValueError("all profiles in one file must share a context length")
    return {
        "version": PROFILE_FORMAT_VERSION,
        "policy": policy.value,
        "context_length": n_k,
        "profiles": [
            {
                "layer": prof.curve.layer,
                "head": prof.curve.head,
                "points": [[b, r] for b, r in prof.curve.points],
                "provenance": {"request": prof.request, "task": prof.task},
            }
            for prof in profiles
        ],
    }


def save_profiles(path, profiles: Sequence[HeadProfile]) -> Path:
    path = Path(path)
    text = json.dumps(profiles_to_dict(profiles), indent=1)
    path.write_text(text + "\n")
    return path


def _expect_keys(obj, allowed: set[str], where: str):
    if not isinstance(obj, dict):
        raise ProfileFormatError("expected an object", field=where or "<root>")
    extra = sorted(set(obj) - allowed)
    if extra:
        raise ProfileFormatError(f"unknown field(s) {', '.join(extra)}", field=where or "<root>")
    missing = sorted(allowed - set(obj))
    if missing:
        raise ProfileFormatError(f"missing field(s) {', '.join(missing)}", field=where or "<root>")


def _expect_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ProfileFormatError(f"expected an integer, got {value!r}", field=where)
    return value


def _expect_real(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProfileFormatError(f"expected a number, got {value!r}", field=where)
    return float(value)


def _expect_str(value, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise ProfileFormatError(f"expected a nonempty string, got {value!r}", field=where)
    return value


def profiles_from_dict(doc: dict) -> list[HeadProfile]:
    _expect_keys(doc, {"version", "policy", "context_length", "profiles"}, "")
    if doc["version"] != PROFILE_FORMAT_VERSION:
        raise ProfileFormatError(f"unsupported version {doc['version']!r}", field="version")
    try:
        policy = SelectionPolicy.parse(doc["policy"])
    except ValueError as exc:
        raise ProfileFormatError(str(exc), field="policy") from None
    n_k = _expect_int(doc["context_length"], "context_length")
    if n_k < 1:
        raise ProfileFormatError("context length must be >= 1", field="context_length")
    if not isinstance(doc["profiles"], list) or not doc["profiles"]:
        raise ProfileFormatError("expected a nonempty list", field="profiles")
    out = []
    seen = set()
    for i, entry in enumerate(doc["profiles"]):
        where = f"profiles[{i}]"
        _expect_keys(entry, {"layer", "head", "points", "provenance"}, where)
        layer = _expect_int(entry["layer"], f"{where}.layer")
        head = _expect_int(entry["head"], f"{where}.head")
        if (layer, head) in seen:
            raise ProfileFormatError(f"duplicate head ({layer}, {head})", field=where)
        seen.add((layer, head))
        _expect_keys(entry["provenance"], {"request", "task"}, f"{where}.provenance")
        request = _expect_str(entry["provenance"]["request"], f"{where}.provenance.request")
        task = _expect_str(entry["provenance"]["task"], f"{where}.provenance.task")
        points = entry["points"]
        if not isinstance(points, list) or not points:
            raise ProfileFormatError("expected a nonempty list of [budget, recovery] pairs", field=f"{where}.points")
        budgets, recovery = [], []
        for j, pt in enumerate(points):
            pwhere = f"{where}.points[{j}]"
            if not isinstance(pt, list) or len(pt) != 2:
                raise ProfileFormatError("expected a [budget, recovery] pair", field=pwhere)
            budgets.append(_expect_int(pt[0], f"{pwhere}[0]"))
            recovery.append(_expect_real(pt[1], f"{pwhere}[1]"))
        try:
            curve = RecoveryCurve(layer, head, tuple(budgets), tuple(recovery), n_k)
        except CurveError as exc:
            raise ProfileFormatError(str(exc), field=f"{where}.points") from None
        out.append(HeadProfile(curve, request=request, task=task, policy=policy))
    return out


def load_profiles(path) -> list[HeadProfile]:
    """Read and strictly validate a profile file written by :func:`save_profiles`."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileFormatError(exc.msg, line=exc.lineno) from None
    try:
        return profiles_from_dict(doc)
    except ProfileFormatError as exc:
        if exc.field is not None and exc.line is None:
            line = _locate_field(text, exc.field)
            if line is not None:
                raise ProfileFormatError(exc.detail, field=exc.field, line=line) from None
        raise


def _locate_field(text: str, field_path: str) -> int | None:
    # best effort: line of the n-th "layer" key for profiles[n]
    if not field_path.startswith("profiles["):
        return None
    try:
        index = int(field_path[len("profiles["):field_path.index("]")])
    except ValueError:
        return None
    count = -1
    for lineno, line in enumerate(text.splitlines(), start=1):
        if '"layer"' in line:
            count += 1
            if count == index:
                return lineno
    return None
