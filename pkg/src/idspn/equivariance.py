"""Executable equivariance and continuity theory for multiset functions.

Classifies black-box n x d -> n x d' functions as set-equivariant
(f(PX) = P f(X) for every permutation) and/or multiset-equivariant (for
every P1 there is a P2 with P1 X = P2 X and f(P1 X) = P2 f(X)), and probes
multiset-continuity under the Hungarian metric.  Checks are exhaustive over
all permutations and stabilizer cosets for n <= 6.

Also ships the counterexample fixtures used to populate every cell of the
continuity x equivariance grid: the tie-averaging sort Jacobian, the
integer detector, the duplicate counter, and an order-dependent copy.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .encoders import EncoderParams, grad_inner_loss
from .matching import hungarian_metric

MAX_EXHAUSTIVE_N = 6
DEFAULT_TOL = 1e-9


@dataclass
class EquivarianceVerdict:
    set_equivariant: bool
    multiset_equivariant: bool
    witness: dict | None = None  # input + permutation demonstrating a violation

    def to_json(self) -> dict:
        out = {
            "set_equivariant": self.set_equivariant,
            "multiset_equivariant": self.multiset_equivariant,
        }
        if self.witness is not None:
            out["witness"] = {
                "input": np.asarray(self.witness["input"]).tolist(),
                "permutation": [int(v) for v in self.witness["permutation"]],
                "kind": self.witness["kind"],
            }
        return out


def _trial_inputs(n: int, d: int, trials: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Random inputs plus explicit duplicate-bearing variants.

    Duplicates are constructed by copying rows, never left to RNG collisions;
    the stabilizer checks are vacuous without exact duplicates.
    """
    out = []
    for _ in range(trials):
        x = rng.uniform(-2.0, 2.0, size=(n, d))
        out.append(x)
        if n >= 2:
            dup = x.copy()
            dup[1] = dup[0]
            out.append(dup)
            if n >= 3:
                tri = x.copy()
                tri[1] = tri[0]
                tri[2] = tri[0]
                out.append(tri)
    return out


def _all_perms(n: int):
    if n > MAX_EXHAUSTIVE_N:
        raise ValueError(f"exhaustive checks capped at n={MAX_EXHAUSTIVE_N}")
    return [np.array(p, dtype=np.intp) for p in permutations(range(n))]


def check_set_equivariance(f, n, d, trials=5, rng=None, tol=DEFAULT_TOL, inputs=None):
    """(holds, witness): f(PX) == P f(X) for all permutations on all trials."""
    rng = rng if rng is not None else np.random.default_rng(0)
    xs = inputs if inputs is not None else _trial_inputs(n, d, trials, rng)
    perms = _all_perms(n)
    for x in xs:
        fx = np.asarray(f(x))
        for p in perms:
            lhs = np.asarray(f(x[p]))
            if np.abs(lhs - fx[p]).max() > tol:
                return False, {"input": x, "permutation": tuple(p), "kind": "set"}
    return True, None


def check_multiset_equivariance(f, n, d, trials=5, rng=None, tol=DEFAULT_TOL, inputs=None):
    """(holds, witness): some stabilizer-coset P2 explains each f(P1 X)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    xs = inputs if inputs is not None else _trial_inputs(n, d, trials, rng)
    perms = _all_perms(n)
    for x in xs:
        fx = np.asarray(f(x))
        for p1 in perms:
            xp = x[p1]
            lhs = np.asarray(f(xp))
            ok = False
            for p2 in perms:
                if np.array_equal(x[p2], xp) and np.abs(lhs - fx[p2]).max() <= tol:
                    ok = True
                    break
            if not ok:
                return False, {"input": x, "permutation": tuple(p1), "kind": "multiset"}
    return True, None


def classify(f, n, d, trials=5, rng=None, tol=DEFAULT_TOL, inputs=None) -> EquivarianceVerdict:
    """Full verdict; the recorded witness is the strongest violation found."""
    rng = rng if rng is not None else np.random.default_rng(0)
    xs = inputs if inputs is not None else _trial_inputs(n, d, trials, rng)
    set_ok, set_wit = check_set_equivariance(f, n, d, tol=tol, inputs=xs)
    mset_ok, mset_wit = check_multiset_equivariance(f, n, d, tol=tol, inputs=xs)
    return EquivarianceVerdict(set_ok, mset_ok, mset_wit if not mset_ok else set_wit)


def sorting_jacobian(x) -> np.ndarray:
    """Transpose of the permutation matrix that sorting would apply.

    The sort order is treated as locally constant, so this is the full
    Jacobian of sort() almost everywhere; ties resolve stably.
    """
    col = np.asarray(x, dtype=np.float64).reshape(-1)
    n = col.shape[0]
    perm = np.argsort(col, kind="stable")
    s = np.zeros((n, n))
    s[np.arange(n), perm] = 1.0
    return s.T


def multiset_continuity_probe(f, x, deltas, samples_per_delta=20, rng=None, max_attempts=100_000):
    """For each delta, the largest observed output Hungarian distance.

    Perturbations are Gaussian, rescaled so the input Hungarian distance is
    below delta, with rejection as a safety net.  Sampling can refute
    continuity at x but never certify it.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    fx = np.asarray(f(x))
    table = []
    for delta in deltas:
        worst = 0.0
        for _ in range(samples_per_delta):
            for attempt in range(max_attempts):
                e = rng.normal(size=x.shape)
                row_norm_sum = np.sqrt((e * e).sum(axis=1)).sum()
                y = x + e * (0.9 * delta / max(row_norm_sum, 1e-300))
                if hungarian_metric(x, y) < delta:
                    break
            else:
                raise RuntimeError(f"rejection sampling failed for delta={delta}")
            worst = max(worst, hungarian_metric(fx, np.asarray(f(y))))
        table.append((float(delta), float(worst)))
    return table


# ---------------------------------------------------------------------------
# shipped functions and counterexample fixtures
# ---------------------------------------------------------------------------


def inner_step_fn(params: EncoderParams, z, step_size: float = 1.0):
    """One inner gradient-descent step as a multiset-to-multiset black box."""
    z = np.asarray(z, dtype=np.float64)

    def f(y: np.ndarray) -> np.ndarray:
        g = grad_inner_loss(np.asarray(y, float), z, params, Tape())
        return y - step_size * g

    return f


def push_apart_fn(x: np.ndarray) -> np.ndarray:
    from .encoders import push_apart_via_sorting

    return push_apart_via_sorting(x)


def sort2_jacobian(x) -> np.ndarray:
    """Jacobian of tie-averaging sort: duplicates share weight equally.

    Equal elements receive identical (averaged) rows, so this stays
    set-equivariant, at the price of multiset-discontinuity at ties.
    """
    col = np.asarray(x, dtype=np.float64).reshape(-1)
    n = col.shape[0]
    order = np.argsort(col, kind="stable")
    t = np.zeros((n, n))
    i = 0
    while i < n:
        j = i
        while j < n and col[order[j]] == col[order[i]]:
            j += 1
        members = order[i:j]
        t[i:j, members.reshape(-1, 1).T] = 1.0 / (j - i)
        i = j
    return t.T


def integer_detector(x) -> np.ndarray:
    """Identity, except inputs whose entries are distinct integers shift by 1.

    Set-equivariant (the trigger is permutation-invariant) yet
    multiset-discontinuous at every triggering input.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    if np.all(flat == np.floor(flat)) and np.unique(flat).size == flat.size:
        return x + 1.0
    return x.copy()


def duplicate_counter(x) -> np.ndarray:
    """Append a per-duplicate occurrence index as an extra dimension.

    Separates every group of equal rows (exclusively multiset-equivariant)
    but jumps when near-duplicates become exact, so multiset-discontinuous.
    """
    x = np.asarray(x, dtype=np.float64)
    counts = np.zeros(x.shape[0])
    seen: dict[bytes, int] = {}
    for i in range(x.shape[0]):
        key = x[i].tobytes()
        counts[i] = seen.get(key, 0)
        seen[key] = seen.get(key, 0) + 1
    return np.concatenate([x, counts[:, None]], axis=1)


def copy_first_row(x) -> np.ndarray:
    """Broadcast the first-listed element to every slot (order-dependent)."""
    x = np.asarray(x, dtype=np.float64)
    return np.tile(x[0], (x.shape[0], 1))


def classification_suite(hidden=16, n=4, rng=None, tol=DEFAULT_TOL) -> dict[str, EquivarianceVerdict]:
    """Verdicts for the shipped function families (the headline table).

    Expected pattern: sum/mean inner steps (set yes, multiset yes); fspool
    inner step (no, yes) with a duplicate-row witness; order-dependent copy
    (no, no).
    """
    from .encoders import init_params

    rng = rng if rng is not None else np.random.default_rng(2024)
    d = 3
    z = rng.normal(size=hidden)
    out = {}
    for pool in ("sum", "mean", "fspool"):
        params = init_params(d, hidden, pool, n=n, rng=rng)
        f = inner_step_fn(params, z, step_size=0.1)
        out[f"{pool}_inner_step"] = classify(f, n, d, trials=4, rng=rng, tol=tol)
    out["order_dependent_copy"] = classify(copy_first_row, n, d, trials=4, rng=rng, tol=tol)
    return out
