"""Inner optimization: decode a latent vector into a multiset.

The forward pass minimizes ``||g(Y) - z||^2 (+ anchor)`` over Y by gradient
descent, optionally with Nesterov momentum, global-norm clipping, simplex
projection over a column range, frozen entries, and an anchor regularizer
``(lambda/2)||Y - Y0||^2``.

Two execution modes share one loop: the default recomputes the gradient on a
throwaway tape each iteration (memory independent of the iteration count);
``record_for_unroll`` keeps every iteration on a single tape so the whole
descent can be backpropagated through.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .encoders import BoundEncoder, EncoderConsts, EncoderParams


class InnerDivergence(RuntimeError):
    """Inner loss became non-finite; carries the failing iteration index."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass
class InnerConfig:
    step_size: float = 1.0
    momentum: float = 0.0
    iterations: int = 10
    clip_norm: float | None = 10.0
    projection: tuple[int, int] | None = None  # simplex over columns [lo, hi)
    fixed_mask: np.ndarray | None = None  # True = frozen to Y0
    anchor_lambda: float = 0.0
    record_for_unroll: bool = False

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.anchor_lambda < 0:
            raise ValueError("anchor_lambda must be >= 0")


@dataclass
class InnerTrace:
    y_final: np.ndarray
    losses: list[float]
    iterations_run: int
    tape: Tape | None = None
    handles: dict = field(default_factory=dict)
    peak_tape_nodes: int = 0


def init_y0(
    n: int,
    d: int,
    mode: str,
    rng: np.random.Generator | None = None,
    stored: np.ndarray | None = None,
) -> np.ndarray:
    """Initial multiset: N(0, I/10) samples, zeros, or a stored parameter."""
    if mode == "zeros":
        return np.zeros((n, d))
    if mode == "gaussian_tenth":
        if rng is None:
            raise ValueError("gaussian_tenth needs an rng")
        return rng.normal(0.0, np.sqrt(0.1), size=(n, d))
    if mode == "learned":
        if stored is None:
            raise ValueError("learned mode needs the stored matrix")
        if stored.shape != (n, d):
            raise ValueError(f"stored Y0 has shape {stored.shape}, expected {(n, d)}")
        return stored.copy()
    raise ValueError(f"unknown init mode {mode!r}")


def simplex_project(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    return simplex_project_rows(np.asarray(v, dtype=np.float64).reshape(1, -1))[0]


def simplex_project_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise sort-and-threshold projection onto {w >= 0, sum w = 1}."""
    m = np.asarray(m, dtype=np.float64)
    d = m.shape[1]
    u = np.sort(m, axis=1)[:, ::-1]
    cs = np.cumsum(u, axis=1)
    j = np.arange(1, d + 1)
    cond = u + (1.0 - cs) / j > 0
    rho = d - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = (cs[np.arange(m.shape[0]), rho] - 1.0) / (rho + 1.0)
    return np.maximum(m - tau[:, None], 0.0)


def _block_norms(g: np.ndarray, batch: int) -> np.ndarray:
    return np.sqrt((g.reshape(batch, -1) ** 2).sum(axis=1))


def _as_2d_latent(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z.reshape(1, -1) if z.ndim == 1 else z


def minimize(
    z,
    params: EncoderParams,
    y0: np.ndarray,
    cfg: InnerConfig,
    batch: int = 1,
) -> InnerTrace:
    """Run the configured number of inner updates from y0.

    For batch > 1, y0 stacks the batch row-blocks ((batch*n) x d) and z holds
    one latent row per block; blocks never interact.
    """
    z2 = _as_2d_latent(z)
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.shape[0] % batch != 0:
        raise ValueError("y0 rows must be divisible by batch")
    n = y0.shape[0] // batch
    if z2.shape[0] != batch:
        raise ValueError(f"z has {z2.shape[0]} rows for batch {batch}")
    if cfg.fixed_mask is not None and cfg.fixed_mask.shape != y0.shape:
        raise ValueError("fixed_mask shape must match y0")
    if cfg.record_for_unroll:
        return _minimize_recorded(z2, params, y0, cfg, batch, n)
    return _minimize_eager(z2, params, y0, cfg, batch, n)


def _anchor_value(y: np.ndarray, y0: np.ndarray, lam: float) -> float:
    if lam == 0.0:
        return 0.0
    d = y - y0
    return 0.5 * lam * float((d * d).sum())


def _minimize_eager(z2, params, y0, cfg, batch, n) -> InnerTrace:
    y = y0.copy()
    vel = np.zeros_like(y)
    mask = cfg.fixed_mask
    consts = EncoderConsts(params, n, batch)
    losses: list[float] = []
    peak = 0
    for t in range(cfg.iterations):
        look = y if cfg.momentum == 0.0 else y + cfg.momentum * vel
        tape = Tape()
        bound = BoundEncoder(tape, params, n=n, batch=batch, consts=consts, trainable=False)
        y_t = tape.leaf(look)
        z_t = tape.leaf(z2)
        loss = bound.inner_loss(y_t, z_t)
        loss_val = float(loss.value[0, 0]) + _anchor_value(look, y0, cfg.anchor_lambda)
        if not np.isfinite(loss_val):
            raise InnerDivergence(t, "non-finite inner loss")
        losses.append(loss_val)
        g = ad.backward(loss, [y_t])[0]
        if cfg.anchor_lambda > 0.0:
            g = g + cfg.anchor_lambda * (look - y0)
        if mask is not None:
            g = np.where(mask, 0.0, g)
        if cfg.clip_norm is not None:
            norms = _block_norms(g, batch)
            scale = np.minimum(1.0, cfg.clip_norm / np.maximum(norms, 1e-300))
            g = g * np.repeat(scale, n)[:, None]
        vel = cfg.momentum * vel - cfg.step_size * g
        y = y + vel
        if cfg.projection is not None:
            lo, hi = cfg.projection
            y[:, lo:hi] = simplex_project_rows(y[:, lo:hi])
        if mask is not None:
            y = np.where(mask, y0, y)
        peak = max(peak, tape.node_count)
    return InnerTrace(y_final=y, losses=losses, iterations_run=cfg.iterations, peak_tape_nodes=peak)


def _recorded_clip(g: Tensor, cfg: InnerConfig, batch: int, n: int, tape: Tape) -> Tensor:
    """Per-block L2 clipping as tape ops (exact within the active branch)."""
    norms = _block_norms(g.value, batch)
    over = norms > cfg.clip_norm
    if not over.any():
        return g
    d = g.value.shape[1]
    # per-block sum of squares -> Bx1
    sq = ad.square(g)
    colsum = ad.matmul(sq, tape.leaf(np.ones((d, 1))))
    sel = np.zeros((batch, batch * n))
    for b in range(batch):
        sel[b, b * n : (b + 1) * n] = 1.0
    block_sq = ad.matmul(tape.leaf(sel), colsum)
    inv = ad.scalar_mul(ad.recip(ad.sqrt(block_sq)), cfg.clip_norm)
    # blocks under the threshold keep scale 1
    over_f = over.astype(np.float64)[:, None]
    scale = ad.add(ad.mul(inv, tape.leaf(over_f)), tape.leaf(1.0 - over_f))
    tiled = ad.matmul(ad.matmul(tape.leaf(np.repeat(np.eye(batch), n, axis=0)), scale), tape.leaf(np.ones((1, d))))
    return ad.mul(g, tiled)


def _recorded_simplex(y: Tensor, lo: int, hi: int, tape: Tape) -> Tensor:
    """Simplex projection of columns [lo, hi) as tape ops.

    The active support comes from the forward value; within that region the
    projection is affine (shift by the support mean), which relu(v - tau)
    reproduces exactly.
    """
    d = y.value.shape[1]
    block = ad.slice_cols(y, lo, hi) if (lo > 0 or hi < d) else y
    proj_val = simplex_project_rows(block.value)
    support = (proj_val > 0.0).astype(np.float64)
    counts = support.sum(axis=1, keepdims=True)
    k = hi - lo
    masked = ad.mul(block, tape.leaf(support))
    ssum = ad.matmul(masked, tape.leaf(np.ones((k, 1))))
    tau = ad.mul(ad.sub(ssum, tape.leaf(np.ones_like(counts))), tape.leaf(1.0 / counts))
    proj = ad.relu(ad.sub(block, ad.matmul(tau, tape.leaf(np.ones((1, k))))))
    if lo == 0 and hi == d:
        return proj
    parts = []
    if lo > 0:
        parts.append(ad.slice_cols(y, 0, lo))
    parts.append(proj)
    if hi < d:
        parts.append(ad.slice_cols(y, hi, d))
    return ad.concat_cols(parts)


def _minimize_recorded(z2, params, y0, cfg, batch, n) -> InnerTrace:
    tape = Tape()
    bound = BoundEncoder(tape, params, n=n, batch=batch)
    y0_t = tape.leaf(y0)
    z_t = tape.leaf(z2)
    mask = cfg.fixed_mask
    keep_t = frozen_t = None
    if mask is not None:
        keep_t = tape.leaf((~mask).astype(np.float64))
        frozen_t = tape.leaf(mask.astype(np.float64))
    y = y0_t
    vel: Tensor | None = None
    losses: list[float] = []
    for t in range(cfg.iterations):
        look = y
        if cfg.momentum != 0.0 and vel is not None:
            look = ad.add(y, ad.scalar_mul(vel, cfg.momentum))
        loss = bound.inner_loss(look, z_t)
        if cfg.anchor_lambda > 0.0:
            diff0 = ad.sub(look, y0_t)
            loss = ad.add(loss, ad.scalar_mul(ad.sum_all(ad.square(diff0)), 0.5 * cfg.anchor_lambda))
        loss_val = float(loss.value[0, 0])
        if not np.isfinite(loss_val):
            raise InnerDivergence(t, "non-finite inner loss")
        losses.append(loss_val)
        g = ad.backward(loss, [look], create_graph=True)[0]
        if mask is not None:
            g = ad.mul(g, keep_t)
        if cfg.clip_norm is not None:
            g = _recorded_clip(g, cfg, batch, n, tape)
        step = ad.scalar_mul(g, -cfg.step_size)
        if cfg.momentum != 0.0:
            vel = step if vel is None else ad.add(ad.scalar_mul(vel, cfg.momentum), step)
            y = ad.add(y, vel)
        else:
            y = ad.add(y, step)
        if cfg.projection is not None:
            y = _recorded_simplex(y, cfg.projection[0], cfg.projection[1], tape)
        if mask is not None:
            y = ad.add(ad.mul(y, keep_t), ad.mul(y0_t, frozen_t))
    handles = {"y0": y0_t, "z": z_t, "y_final": y, "params": bound.param_leaves(), "bound": bound}
    return InnerTrace(
        y_final=y.value.copy(),
        losses=losses,
        iterations_run=cfg.iterations,
        tape=tape,
        handles=handles,
        peak_tape_nodes=tape.node_count,
    )


def eval_config(cfg: InnerConfig, iterations: int | None = None) -> InnerConfig:
    """Copy of cfg without recording, optionally with a different step count."""
    return replace(
        cfg,
        record_for_unroll=False,
        iterations=cfg.iterations if iterations is None else iterations,
    )
