"""Sampling distributions and sampling plans for column-row sampling.

A *plan* records which column-row pairs (or input channels) take part in an
approximate product and the weight each one carries. Indices are 0-based.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import DomainError, ShapeError, channel_norms

SELECTIONS = ("uniform", "nps", "topk")


class SamplingError(RuntimeError):
    """Not enough items with positive probability to draw the requested sample."""


@dataclass(frozen=True)
class Policy:
    """How many pairs to keep and how to pick them.

    Exactly one of ``ratio`` and ``k`` is given. ``min_k`` is a floor applied
    after converting a ratio to a count.
    """

    selection: str = "topk"
    replacement: bool = False
    scaled: bool = False
    ratio: float | None = None
    k: int | None = None
    min_k: int = 1

    def __post_init__(self):
        if self.selection not in SELECTIONS:
            raise DomainError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if (self.ratio is None) == (self.k is None):
            raise DomainError("give exactly one of ratio and k")
        if self.ratio is not None and not 0.0 < self.ratio <= 1.0:
            raise DomainError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.k is not None and self.k < 1:
            raise DomainError(f"k must be >= 1, got {self.k}")
        if self.min_k < 1:
            raise DomainError(f"min_k must be >= 1, got {self.min_k}")
        if self.selection == "topk" and (self.scaled or self.replacement):
            raise DomainError("deterministic top-k is always unscaled and without replacement")

    def resolve_k(self, n):
        """Sample count for a shared dimension of size ``n``.

        k = max(min_k, round(ratio * n)) clamped to n, rounding halves up.
        """
        if n < 1:
            raise DomainError(f"cannot sample from an empty dimension (n={n})")
        if self.k is not None:
            k = max(self.k, self.min_k)
        else:
            k = max(self.min_k, math.floor(self.ratio * n + 0.5))
        return min(k, n)

    def describe(self):
        if self.selection == "topk":
            return "topk"
        rep = "repl" if self.replacement else "norepl"
        sc = "scaled" if self.scaled else "unscaled"
        return f"{self.selection}-{rep}-{sc}"


@dataclass(frozen=True)
class SamplingPlan:
    """Chosen indices and their per-sample weights for one approximate product."""

    n: int
    indices: np.ndarray
    scales: np.ndarray
    selection: str
    replacement: bool
    scaled: bool
    probs: np.ndarray | None = field(default=None, repr=False)

    @property
    def k(self):
        return len(self.indices)

    @property
    def is_identity(self):
        """True when the plan keeps every pair once, in order, with unit weight."""
        return (self.k == self.n
                and np.array_equal(self.indices, np.arange(self.n))
                and np.all(self.scales == 1.0))


def full_plan(n):
    return SamplingPlan(n, np.arange(n), np.ones(n), "topk", False, False)


def _distribution(weights):
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0.0 or not np.isfinite(total):
        # all-zero weights: every pair contributes nothing, any choice is as good
        return np.full(len(w), 1.0 / len(w))
    return w / total


def uniform_distribution(n):
    return np.full(n, 1.0 / n)


def nps_distribution(col_norms, row_norms):
    """Norm-proportional sampling: p_i proportional to |A^(i)| * |B_(i)|."""
    col_norms = np.asarray(col_norms, dtype=np.float64)
    row_norms = np.asarray(row_norms, dtype=np.float64)
    if col_norms.shape != row_norms.shape or col_norms.ndim != 1:
        raise ShapeError(f"norm vectors differ: {col_norms.shape} vs {row_norms.shape}")
    if np.any(col_norms < 0) or np.any(row_norms < 0):
        raise DomainError("norms must be non-negative")
    return _distribution(col_norms * row_norms)


def conv_nps_distribution(x, k):
    """Channel probabilities proportional to ||I^[i]||_F * ||K_[i]||_F."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if x.ndim != 4 or k.ndim != 4 or x.shape[3] != k.shape[2]:
        raise ShapeError(f"channel mismatch between input {x.shape} and kernel {k.shape}")
    return _distribution(channel_norms(x, "input") * channel_norms(k, "kernel"))


def conv_optimal_distribution(x, k, pad="valid"):
    """Error-minimising channel probabilities including the E/R correction terms.

    p*_i is proportional to sqrt(||I^[i]||^2 ||K_[i]||^2 - E_i + R_i). Costs a
    full pairwise pass over kernel offsets; meant for small verification cases.
    """
    from .approx import correction_terms

    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if x.ndim != 4 or k.ndim != 4 or x.shape[3] != k.shape[2]:
        raise ShapeError(f"channel mismatch between input {x.shape} and kernel {k.shape}")
    nx = channel_norms(x, "input")
    nk = channel_norms(k, "kernel")
    corr = correction_terms(x, k, pad)
    radicand = nx ** 2 * nk ** 2 - corr.e_ik + corr.r_ik
    if np.any(radicand < 0):
        warnings.warn(f"negative radicand {radicand.min():.3e} clamped to 0", RuntimeWarning,
                      stacklevel=2)
        radicand = np.maximum(radicand, 0.0)
    return _distribution(np.sqrt(radicand))


def _draw_without_replacement(probs, k, rng):
    # Exponential-key (Efraimidis-Spirakis) selection: the sorted keys follow
    # the same law as k successive draws with renormalisation after each.
    keys = np.full(len(probs), np.inf)
    pos = probs > 0
    keys[pos] = rng.standard_exponential(int(pos.sum())) / probs[pos]
    order = np.argsort(keys, kind="stable")
    return order[:k]


def plan_from_indices(probs, idx, selection, replacement, scaled):
    """Plan for already drawn indices.

    Scaled plans weight each draw by 1 / (k p_i). A without-replacement
    sample of every item includes each one with certainty, so its weights
    are all 1 and the product is exact.
    """
    probs = np.asarray(probs, dtype=np.float64)
    idx = np.asarray(idx)
    k = len(idx)
    if scaled and (replacement or k < len(probs)):
        scales = 1.0 / (k * probs[idx])
    else:
        scales = np.ones(k)
    return SamplingPlan(len(probs), idx, scales, selection, replacement, scaled, probs)


def draw_plan(probs, policy, rng):
    """Random plan from distribution ``probs`` under ``policy``.

    Scales use the original marginal p_i, see :func:`plan_from_indices`.
    """
    if policy.selection == "topk":
        raise DomainError("top-k plans are deterministic; use topk_plan")
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    k = policy.resolve_k(n)
    if policy.replacement:
        cdf = np.cumsum(probs)
        u = rng.random(k) * cdf[-1]
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)
    else:
        nonzero = int(np.count_nonzero(probs > 0))
        if nonzero < k:
            raise SamplingError(f"need {k} items with positive probability, only {nonzero} available")
        idx = _draw_without_replacement(probs, k, rng)
    return plan_from_indices(probs, idx, policy.selection, policy.replacement, policy.scaled)


def draw_coupled_indices(probs, k, rng):
    """With- and without-replacement index sets drawn from one shared stream.

    A single i.i.d. sequence from ``probs`` is generated; its first k entries
    form the with-replacement sample and its first k distinct entries the
    without-replacement sample (rejecting repeats is sequential drawing with
    renormalisation). Each marginal law is exact, while the two estimates
    share most of their pairs, which makes paired comparisons far less noisy.

    Returns ``(with_indices, without_indices)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    if not 1 <= k <= n:
        raise DomainError(f"k must lie in [1, {n}], got {k}")
    nonzero = int(np.count_nonzero(probs > 0))
    if nonzero < k:
        raise SamplingError(f"need {k} items with positive probability, only {nonzero} available")
    cdf = np.cumsum(probs)
    stream = np.empty(0, dtype=np.int64)
    distinct = np.empty(0, dtype=np.int64)
    while len(distinct) < k:
        chunk = np.searchsorted(cdf, rng.random(2 * k) * cdf[-1], side="right")
        stream = np.concatenate([stream, np.minimum(chunk, n - 1)])
        _, first = np.unique(stream, return_index=True)
        distinct = stream[np.sort(first)]
    return stream[:k], distinct[:k]


def topk_plan(scores, k):
    """Deterministic plan keeping the k largest scores (ties to lower index)."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if not 1 <= k <= n:
        raise DomainError(f"k must lie in [1, {n}], got {k}")
    if np.any(scores < 0):
        raise DomainError("top-k scores must be non-negative")
    chosen = np.sort(np.argsort(-scores, kind="stable")[:k])
    return SamplingPlan(n, chosen, np.ones(k), "topk", False, False)


def make_plan(scores, policy, rng):
    """Plan for a product whose pair scores are ``scores`` (norm products).

    Pairs with zero score contribute nothing to the product. When a
    without-replacement sample of k would cover every pair with positive
    score, those pairs are kept with unit weight (each is certain to be
    drawn) and the plan is padded to k with zero-score pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    k = policy.resolve_k(n)
    if policy.selection == "topk":
        return topk_plan(scores, k)
    if policy.selection == "nps":
        probs = _distribution(scores)
    else:
        probs = uniform_distribution(n)
    if not policy.replacement:
        live = np.flatnonzero(probs > 0)
        if len(live) <= k and len(live) < n:
            pad = np.flatnonzero(probs <= 0)[:k - len(live)]
            idx = np.concatenate([live, pad])
            return SamplingPlan(n, idx, np.ones(k), policy.selection, False, policy.scaled, probs)
    return draw_plan(probs, policy, rng)
