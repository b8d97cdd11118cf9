"""Exact dense attention, budgeted top-k sparse attention and recovery ratios.

Everything here works in float64 on numpy arrays, one head at a time.
Ties between equal scores are always broken in favour of the lower key index.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, ShapeError


class SelectionPolicy(str, enum.Enum):
    """How a head spends its token budget.

    PER_QUERY_TOPK keeps the k highest-scoring keys separately for every query
    row. COLUMN_AGGREGATE_TOPK keeps one shared set of k keys per head, chosen
    by the column sums of the dense attention weights.
    """

    PER_QUERY_TOPK = "per_query_topk"
    COLUMN_AGGREGATE_TOPK = "column_aggregate_topk"

    @classmethod
    def parse(cls, value) -> "SelectionPolicy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown selection policy {value!r} (expected one of {names})") from None


@dataclass(frozen=True)
class AttentionHead:
    """Query, key and value matrices of a single head."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    causal: bool = False

    @property
    def n_queries(self) -> int:
        return self.q.shape[0]

    @property
    def context_length(self) -> int:
        return self.k.shape[0]

    @property
    def head_dim(self) -> int:
        return self.q.shape[1]

    def validate(self, index=None) -> None:
        for name in ("q", "k", "v"):
            mat = getattr(self, name)
            if mat.ndim != 2:
                raise ShapeError(f"{name.upper()} must be 2-D, got shape {mat.shape}", head=index, axis=name)
            if not np.all(np.isfinite(mat)):
                raise ShapeError(f"{name.upper()} has non-finite entries", head=index, axis=name)
        if self.q.shape[0] < 1:
            raise ShapeError("need at least one query row", head=index, axis="n_q")
        if self.k.shape[0] < 1:
            raise ShapeError("need at least one key row", head=index, axis="n_k")
        if self.q.shape[1] < 1:
            raise ShapeError("head dimension must be >= 1", head=index, axis="d_h")
        if self.q.shape[1] != self.k.shape[1]:
            raise ShapeError(
                f"Q has d_h={self.q.shape[1]} but K has d_h={self.k.shape[1]}", head=index, axis="d_h"
            )
        if self.v.shape[0] != self.k.shape[0]:
            raise ShapeError(
                f"K has n_k={self.k.shape[0]} but V has n_k={self.v.shape[0]}", head=index, axis="n_k"
            )
        if self.v.shape[1] != self.q.shape[1]:
            raise ShapeError(
                f"V has d_h={self.v.shape[1]} but Q has d_h={self.q.shape[1]}", head=index, axis="d_h"
            )


@dataclass(frozen=True)
class AttentionWorkload:
    """A set of heads that all attend over the same context."""

    heads: tuple[AttentionHead, ...]
    layer: int = 0
    exponents: tuple[float, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        if not self.heads:
            raise ShapeError("workload needs at least one head", axis="N")
        n_k = self.heads[0].context_length
        for i, head in enumerate(self.heads):
            head.validate(i)
            if head.context_length != n_k:
                raise ShapeError(
                    f"context length {head.context_length} differs from head 0 ({n_k})", head=i, axis="n_k"
                )

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def context_length(self) -> int:
        return self.heads[0].context_length

    def __len__(self):
        return len(self.heads)

    def __iter__(self):
        return iter(self.heads)

    def __getitem__(self, i):
        return self.heads[i]


def _as_head(head, index=None) -> AttentionHead:
    if not isinstance(head, AttentionHead):
        q, k, v = head
        head = AttentionHead(np.asarray(q, dtype=np.float64), np.asarray(k, dtype=np.float64),
                             np.asarray(v, dtype=np.float64))
    head.validate(index)
    return head


def attention_scores(head: AttentionHead) -> np.ndarray:
    """Pre-softmax scores Q K^T / sqrt(d_h), with -inf on causally masked entries.

    With a causal mask the queries are taken to be the last n_q positions of
    the context, so query i may see keys j <= i + (n_k - n_q).
    """
    q = np.asarray(head.q, dtype=np.float64)
    k = np.asarray(head.k, dtype=np.float64)
    scores = (q @ k.T) / math.sqrt(q.shape[1])
    if head.causal:
        n_q, n_k = scores.shape
        offset = n_k - n_q
        rows = np.arange(n_q)[:, None]
        cols = np.arange(n_k)[None, :]
        scores = np.where(cols > rows + offset, -np.inf, scores)
    return scores


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction. Rows that are entirely -inf give NaN."""
    peak = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - peak)
    return e / np.sum(e, axis=-1, keepdims=True)


def dense_attention(head) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(weights, output)`` for one head.

    ``head`` is an :class:`AttentionHead` or a ``(Q, K, V)`` triple.
    """
    head = _as_head(head)
    weights = softmax(attention_scores(head))
    return weights, weights @ np.asarray(head.v, dtype=np.float64)


def _descending_order(x: np.ndarray) -> np.ndarray:
    # stable sort on the negated values keeps lower indices first among ties
    return np.argsort(-x, axis=-1, kind="stable")


def _check_budget(k, n_k, allow_zero=False):
    if isinstance(k, bool) or int(k) != k:
        raise BudgetError(f"budget must be an integer number of tokens, got {k!r}")
    k = int(k)
    lo = 0 if allow_zero else 1
    if not lo <= k <= n_k:
        raise BudgetError(f"budget k={k} outside [{lo}, {n_k}]")
    return k


def selection_mask(head, k: int, policy=SelectionPolicy.PER_QUERY_TOPK) -> np.ndarray:
    """Boolean n_q x n_k mask of the keys each query keeps under ``policy``."""
    head = _as_head(head)
    policy = SelectionPolicy.parse(policy)
    scores = attention_scores(head)
    n_q, n_k = scores.shape
    k = _check_budget(k, n_k)
    mask = np.zeros((n_q, n_k), dtype=bool)
    if policy is SelectionPolicy.PER_QUERY_TOPK:
        kept = _descending_order(scores)[:, :k]
        np.put_along_axis(mask, kept, True, axis=1)
    else:
        column_mass = softmax(scores).sum(axis=0)
        kept = _descending_order(column_mass)[:k]
        mask[:, kept] = True
    return mask


def sparse_attention(head, k: int, policy=SelectionPolicy.PER_QUERY_TOPK) -> np.ndarray:
    """Attention output when each query only sees its selected ``k`` keys.

    The softmax is renormalised over the kept set, so every output row stays a
    convex combination of value rows.
    """
    head = _as_head(head)
    mask = selection_mask(head, k, policy)
    scores = np.where(mask, attention_scores(head), -np.inf)
    weights = softmax(scores)
    if np.isnan(weights).any():
        # only possible when the causal mask hides every kept key of a row
        weights = np.nan_to_num(weights, nan=0.0)
    return weights @ np.asarray(head.v, dtype=np.float64)


def recovery_curve(weights: np.ndarray, policy=SelectionPolicy.PER_QUERY_TOPK) -> np.ndarray:
    """Recovery ratio for every budget 0..n_k at once.

    Entry ``k`` is the mean, over query rows, of the attention mass captured by
    the top-k keys. The result is clipped to [0, 1], nondecreasing, and its last
    entry is exactly 1 (full budget recovers everything by definition).
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"weights must be 2-D, got shape {w.shape}", axis="weights")
    policy = SelectionPolicy.parse(policy)
    n_q, n_k = w.shape
    if policy is SelectionPolicy.PER_QUERY_TOPK:
        ordered = -np.sort(-w, axis=1)
    else:
        ordered = w[:, _descending_order(w.sum(axis=0))]
    cum = np.cumsum(ordered, axis=1).mean(axis=0)
    curve = np.empty(n_k + 1)
    curve[0] = 0.0
    curve[1:] = np.minimum(cum, 1.0)
    curve[n_k] = 1.0
    return curve


def recovery_ratio(weights: np.ndarray, k: int, policy=SelectionPolicy.PER_QUERY_TOPK) -> float:
    """Fraction of attention mass recovered by a budget of ``k`` tokens."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"weights must be 2-D, got shape {w.shape}", axis="weights")
    k = _check_budget(k, w.shape[1], allow_zero=True)
    return float(recovery_curve(w, policy)[k])


def output_error(sparse: np.ndarray, dense: np.ndarray) -> float:
    """Relative Frobenius error ||sparse - dense|| / ||dense||.

    Returns 0.0 for identical inputs and ``math.inf`` when ``dense`` is all
    zeros but ``sparse`` is not.
    """
    sparse = np.asarray(sparse, dtype=np.float64)
    dense = np.asarray(dense, dtype=np.float64)
    if sparse.shape != dense.shape:
        raise ShapeError(f"shape mismatch: sparse {sparse.shape} vs dense {dense.shape}", axis="output")
    diff = np.linalg.norm(sparse - dense)
    if diff == 0.0:
        return 0.0
    ref = np.linalg.norm(dense)
    if ref == 0.0:
        return math.inf
    return float(diff / ref)
