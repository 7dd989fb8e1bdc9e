"""Optimal assignment and permutation-invariant losses over multisets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAIRWISE_KINDS = ("mse", "huber", "euclidean", "cross_entropy")

# Added to a cost entry when the argmax classes of the paired elements differ.
CLASS_PENALTY = 1e6


@dataclass
class MatchResult:
    """Optimal assignment: perm[i] is the target index matched to prediction i."""

    perm: np.ndarray
    total_cost: float


def hungarian(costs: np.ndarray) -> MatchResult:
    """Minimum-cost perfect matching on a square cost matrix.

    Shortest augmenting path with potentials (Jonker-Volgenant style), O(n^3).
    Ties are resolved deterministically by scan order.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"hungarian needs a square matrix, got {c.shape}")
    n = c.shape[0]
    if n == 0:
        return MatchResult(np.empty(0, dtype=np.intp), 0.0)

    # 1-based columns; p[j] = row assigned to column j (0 = none)
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    cols = np.arange(1, n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1, :] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            free_idx = np.nonzero(free)[0]
            j1 = int(cols[free_idx[np.argmin(minv[1:][free_idx])]])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    perm = np.empty(n, dtype=np.intp)
    perm[p[1:] - 1] = np.arange(n, dtype=np.intp)
    total = float(c[np.arange(n), perm].sum())
    return MatchResult(perm, total)


def _check_pair(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"multiset shapes differ: {p.shape} vs {t.shape}")
    return p, t


def _huber_elem(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= 1.0, 0.5 * x * x, ax - 0.5)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def pairwise_cost(
    pred,
    target,
    kind: str = "mse",
    class_penalty: tuple | None = None,
) -> np.ndarray:
    """n x n matrix of pairwise element losses (summed over dimensions).

    class_penalty = (class_dims, penalty): adds `penalty` to every entry
    whose argmax over `class_dims` differs between the prediction and the
    target element.
    """
    p, t = _check_pair(pred, target)
    diff = p[:, None, :] - t[None, :, :]
    if kind == "mse":
        costs = (diff * diff).sum(axis=2)
    elif kind == "huber":
        costs = _huber_elem(diff).sum(axis=2)
    elif kind == "euclidean":
        costs = np.sqrt((diff * diff).sum(axis=2))
    elif kind == "cross_entropy":
        if np.any(t < -1e-12) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("cross_entropy targets must be probability rows")
        costs = -(_log_softmax(p) @ t.T)
    else:
        raise ValueError(f"unknown pairwise kind {kind!r}")
    if class_penalty is not None:
        dims, penalty = class_penalty
        dims = np.asarray(dims, dtype=np.intp)
        cp = p[:, dims].argmax(axis=1)
        ct = t[:, dims].argmax(axis=1)
        costs = costs + penalty * (cp[:, None] != ct[None, :])
    return costs


def hungarian_loss(
    pred,
    target,
    kind: str = "mse",
    class_penalty: tuple | None = None,
    fast: bool = False,
) -> tuple[float, MatchResult]:
    """Minimum total pairwise cost over all assignments."""
    solve = linear_assignment if fast else hungarian
    res = solve(pairwise_cost(pred, target, kind, class_penalty))
    return res.total_cost, res


def hungarian_loss_grad(
    pred,
    target,
    kind: str = "mse",
    class_penalty: tuple | None = None,
    fast: bool = False,
) -> tuple[float, MatchResult, np.ndarray]:
    """Loss, match, and its gradient in the prediction with the match fixed.

    The assignment is piecewise constant, so away from matching ties the
    gradient is that of the matched pairwise loss; the class-penalty term is
    locally constant and contributes nothing.
    """
    p, t = _check_pair(pred, target)
    loss, res = hungarian_loss(p, t, kind, class_penalty, fast=fast)
    tm = t[res.perm]
    diff = p - tm
    if kind == "mse":
        g = 2.0 * diff
    elif kind == "huber":
        g = np.clip(diff, -1.0, 1.0)
    elif kind == "euclidean":
        norms = np.sqrt((diff * diff).sum(axis=1, keepdims=True))
        g = np.divide(diff, norms, out=np.zeros_like(diff), where=norms > 0)
    elif kind == "cross_entropy":
        g = np.exp(_log_softmax(p)) * tm.sum(axis=1, keepdims=True) - tm
    else:
        raise ValueError(f"unknown pairwise kind {kind!r}")
    return loss, res, g


def hungarian_metric(x, y) -> float:
    """Matched Euclidean distance; a true metric on equal-size multisets.

    The matched terms are summed in sorted order so that symmetry holds
    bit-exactly whenever the optimal assignment is unique.
    """
    costs = pairwise_cost(x, y, kind="euclidean")
    res = hungarian(costs)
    terms = costs[np.arange(costs.shape[0]), res.perm]
    return float(np.sort(terms).sum())


try:  # hot-loop backend; hungarian() below stays the reference implementation
    from scipy.optimize import linear_sum_assignment as _scipy_lsa
except ImportError:  # pragma: no cover
    _scipy_lsa = None


def linear_assignment(costs: np.ndarray) -> MatchResult:
    """Same contract as hungarian(); uses the compiled scipy solver if present.

    Training loops call this thousands of times per step; tests pin its total
    cost to hungarian() and to brute force.
    """
    if _scipy_lsa is None:
        return hungarian(costs)
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"linear_assignment needs a square matrix, got {c.shape}")
    rows, cols = _scipy_lsa(c)
    perm = np.empty(c.shape[0], dtype=np.intp)
    perm[rows] = cols
    return MatchResult(perm, float(c[rows, cols].sum()))


def brute_force_assignment(costs: np.ndarray) -> tuple[np.ndarray, float]:
    """Exhaustive minimum over all permutations (test oracle, n <= ~8)."""
    from itertools import permutations

    c = np.asarray(costs, dtype=np.float64)
    n = c.shape[0]
    rows = np.arange(n)
    best, best_perm = np.inf, None
    for perm in permutations(range(n)):
        tot = c[rows, perm].sum()
        if tot < best:
            best, best_perm = tot, perm
    return np.array(best_perm, dtype=np.intp), float(best)
