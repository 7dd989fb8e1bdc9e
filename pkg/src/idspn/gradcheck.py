"""Finite-difference gradient checks for every registered tape op."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape


def _resample_away_from(rng, shape, lo, hi, bad_points, margin):
    """Uniform values staying `margin` away from each kink in bad_points."""
    x = rng.uniform(lo, hi, size=shape)
    for _ in range(100):
        close = np.zeros(x.shape, dtype=bool)
        for b in bad_points:
            close |= np.abs(x - b) < margin
        if not close.any():
            return x
        x[close] = rng.uniform(lo, hi, size=int(close.sum()))
    return x


def _case(op, rng, n=4, d=3):
    """Build (forward_fn(tape, X) -> scalar Tensor, X) for one op kind."""
    kinks: tuple = ()
    lo, hi = -2.0, 2.0
    if op == "relu":
        kinks = (0.0,)
    elif op in ("huber", "clip_unit"):
        kinks = (-1.0, 1.0)
    elif op in ("sqrt", "recip"):
        lo, hi = 0.2, 2.0
    x = _resample_away_from(rng, (n, d), lo, hi, kinks, 1e-3)

    if op == "matmul":
        b = rng.uniform(-2, 2, size=(d, n))

        def f(tape, xt):
            return ad.matmul(xt, tape.leaf(b))

    elif op in ("add", "sub", "mul"):
        b = rng.uniform(-2, 2, size=(n, d))

        def f(tape, xt):
            return getattr(ad, op)(xt, tape.leaf(b))

    elif op == "scalar_mul":

        def f(tape, xt):
            return ad.scalar_mul(xt, 1.7)

    elif op == "add_row":
        b = rng.uniform(-2, 2, size=(1, d))

        def f(tape, xt):
            return ad.add_row(xt, tape.leaf(b))

    elif op == "gather_rows_by_perm":
        perm = rng.permutation(n)

        def f(tape, xt):
            return ad.gather_rows_by_perm(xt, perm)

    elif op == "gather_per_column_by_perms":
        idx = np.column_stack([rng.permutation(n) for _ in range(d)])

        def f(tape, xt):
            return ad.gather_per_column_by_perms(xt, idx)

    elif op == "concat_cols":
        b = rng.uniform(-2, 2, size=(n, 2))

        def f(tape, xt):
            return ad.concat_cols([xt, tape.leaf(b)])

    elif op == "slice_cols":

        def f(tape, xt):
            return ad.slice_cols(xt, 1, d)

    elif op == "sum_blocks":

        def f(tape, xt):
            return ad.sum_blocks(xt, 2)

    elif op == "repeat_rows":

        def f(tape, xt):
            return ad.repeat_rows(xt, 3)

    elif op in ("sum_all", "sum_rows", "log_softmax_rows", "relu", "square",
                "huber", "exp", "sqrt", "recip", "clip_unit"):

        def f(tape, xt):
            return getattr(ad, {"sum_all": "sum_all", "sum_rows": "sum_rows",
                                "log_softmax_rows": "log_softmax_rows"}.get(op, op))(xt)

    else:
        raise ValueError(f"no gradcheck case for op {op!r}")

    # weighted sum to a scalar so every output entry matters
    def scalarized(tape, xt):
        out = f(tape, xt)
        w = tape.leaf(np.linspace(0.5, 1.5, out.value.size).reshape(out.value.shape))
        return ad.sum_all(ad.mul(out, w))

    return scalarized, x


def check_op(op: str, trials: int = 20, tol: float = 1e-4, seed: int = 0) -> dict:
    """Max relative error of backward vs central differences over trials."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        fn, x = _case(op, rng)

        def scalar_of(arr):
            tape = Tape()
            return float(fn(tape, tape.leaf(arr)).value[0, 0])

        tape = Tape()
        xt = tape.leaf(x)
        out = fn(tape, xt)
        (g,) = ad.backward(out, [xt])
        fd = ad.finite_diff_grad(scalar_of, x, step=1e-5)
        denom = max(np.abs(fd).max(), 1.0)
        worst = max(worst, float(np.abs(g - fd).max() / denom))
    return {"op": op, "max_rel_err": worst, "passed": worst < tol}


def run_gradcheck(trials: int = 20, tol: float = 1e-4, seed: int = 0) -> list[dict]:
    return [check_op(op, trials, tol, seed) for op in ad.ALL_OPS]
