"""Backward passes for the inner optimization.

Three ways to differentiate the decoded multiset with respect to the latent
vector, the encoder weights, and the initial multiset:

* approximate implicit: treat the inner Hessian as the identity, i.e.
  backpropagate through a single gradient step at the optimum (the default
  for training);
* full implicit: solve the regularized system (H/gamma + I) u = upstream by
  conjugate gradient with Hessian-vector products, never materializing H;
* unrolled: ordinary reverse mode through every recorded inner iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .encoders import BoundEncoder, EncoderParams
from .inner_opt import InnerConfig, InnerTrace, simplex_project_rows


@dataclass
class BackwardMode:
    kind: str = "approximate_implicit"  # | "full_implicit" | "unrolled"
    gamma: float = 1.0
    cg_steps: int = 5
    cg_tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("approximate_implicit", "full_implicit", "unrolled"):
            raise ValueError(f"unknown backward kind {self.kind!r}")
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError("gamma must be finite and positive")
        if self.cg_steps < 1:
            raise ValueError("cg_steps must be >= 1")


@dataclass
class GradBundle:
    grad_z: np.ndarray
    grad_params: dict[str, np.ndarray]
    grad_y0: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


def _zero_frozen(arr: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return arr if mask is None else np.where(mask, 0.0, arr)


def _setup(y_star, z, params, batch):
    """Re-differentiable gradient field of the data term at y_star.

    The anchor term never enters here: its gradient contributes nothing for
    z or the encoder weights, and its Y0 cotangent is lambda times the solve
    vector, added in closed form by the callers.
    """
    z2 = np.asarray(z, dtype=np.float64)
    if z2.ndim == 1:
        z2 = z2.reshape(1, -1)
    y_star = np.asarray(y_star, dtype=np.float64)
    n = y_star.shape[0] // batch
    tape = Tape()
    bound = BoundEncoder(tape, params, n=n, batch=batch)
    y_t = tape.leaf(y_star)
    z_t = tape.leaf(z2)
    loss = bound.inner_loss(y_t, z_t)
    g = ad.backward(loss, [y_t], create_graph=True)[0]
    return tape, bound, y_t, z_t, g


def _bundle_from(bound, cots, z_shape, grad_y0, diagnostics) -> GradBundle:
    names = list(bound.param_leaves())
    grad_z = -cots[0].reshape(z_shape)
    raw = {name: -c for name, c in zip(names, cots[1:])}
    grad_params = bound.grads_to_param_shapes(raw)
    return GradBundle(grad_z, grad_params, grad_y0, diagnostics)


def _project_upstream(upstream: np.ndarray, y_star, cfg) -> np.ndarray:
    """Pull the upstream cotangent through the projection Jacobian at Y*.

    With the identity-Hessian approximation, differentiating the projected
    fixed point proj(Y - grad L) - Y = 0 reduces to the unconstrained formula
    applied to J_proj^T upstream.  For row-wise simplex projection J_proj is
    the active-set projector: zero off the support, center-on-support inside.
    """
    if cfg.projection is None:
        return upstream
    lo, hi = cfg.projection
    out = upstream.copy()
    support = np.asarray(y_star)[:, lo:hi] > 0.0
    block = out[:, lo:hi] * support
    counts = np.maximum(support.sum(axis=1, keepdims=True), 1)
    block = (block - block.sum(axis=1, keepdims=True) / counts) * support
    out[:, lo:hi] = block
    return out


def _check_upstream(upstream, y_star, cfg) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise ValueError("upstream cotangent contains non-finite values")
    return _project_upstream(_zero_frozen(upstream, cfg.fixed_mask), y_star, cfg)


def backward_approximate(
    y_star,
    z,
    params: EncoderParams,
    cfg: InnerConfig,
    upstream,
    batch: int = 1,
) -> GradBundle:
    """Identity-Hessian implicit gradients: one VJP of the gradient field."""
    upstream = _check_upstream(upstream, y_star, cfg)
    tape, bound, y_t, z_t, g = _setup(y_star, z, params, batch)
    wrt = [z_t, *bound.param_leaves().values()]
    cots = ad.vjp(g, wrt, upstream)
    z_shape = np.shape(z) if np.ndim(z) == 2 else (np.size(z),)
    grad_y0 = cfg.anchor_lambda * upstream if cfg.anchor_lambda > 0.0 else None
    return _bundle_from(bound, cots, z_shape, grad_y0, {"tape_nodes": tape.node_count})


def backward_full_implicit(
    y_star,
    z,
    params: EncoderParams,
    cfg: InnerConfig,
    mode: BackwardMode,
    upstream,
    batch: int = 1,
) -> GradBundle:
    """Conjugate-gradient solve of (H/gamma + I) u = upstream, then the VJP.

    H is the data-term Hessian at y_star, applied only through Hessian-vector
    products (double backward); the identity share of the system stands in
    for the anchor curvature, so with gamma equal to the anchor coefficient
    this is the exact implicit gradient of the anchored problem.  Frozen
    coordinates are excluded from the system.
    """
    upstream = _check_upstream(upstream, y_star, cfg)
    tape, bound, y_t, z_t, g = _setup(y_star, z, params, batch)
    shape = upstream.shape

    def hvp(u_flat: np.ndarray) -> np.ndarray:
        u = _zero_frozen(u_flat.reshape(shape), cfg.fixed_mask)
        hv = ad.vjp(g, [y_t], u)[0]
        return _zero_frozen(hv, cfg.fixed_mask).ravel()

    def operator(u_flat: np.ndarray) -> np.ndarray:
        return hvp(u_flat) / mode.gamma + u_flat

    u, residual, steps = _conjugate_gradient(operator, upstream.ravel(), mode.cg_steps, mode.cg_tol)
    diagnostics = {
        "cg_residual": residual,
        "cg_steps": steps,
        "cg_converged": residual <= mode.cg_tol,
        "tape_nodes": tape.node_count,
    }
    u = u.reshape(shape)
    wrt = [z_t, *bound.param_leaves().values()]
    cots = ad.vjp(g, wrt, u)
    z_shape = np.shape(z) if np.ndim(z) == 2 else (np.size(z),)
    grad_y0 = cfg.anchor_lambda * u if cfg.anchor_lambda > 0.0 else None
    return _bundle_from(bound, cots, z_shape, grad_y0, diagnostics)


def _conjugate_gradient(operator, b: np.ndarray, max_steps: int, tol: float):
    """Plain CG for a symmetric positive definite operator."""
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0.0, 0
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    steps = 0
    for _ in range(max_steps):
        if np.sqrt(rs) / bnorm <= tol:
            break
        ap = operator(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            break
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        steps += 1
    residual = float(np.linalg.norm(b - operator(x)) / bnorm)
    return x, residual, steps


def backward_unrolled(trace: InnerTrace, z, params: EncoderParams, upstream) -> GradBundle:
    """Reverse mode through every recorded inner iteration."""
    if trace.tape is None:
        raise ValueError("trace was not recorded for unrolling (record_for_unroll)")
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise ValueError("upstream cotangent contains non-finite values")
    h = trace.handles
    bound: BoundEncoder = h["bound"]
    names = list(bound.param_leaves())
    wrt = [h["z"], *bound.param_leaves().values(), h["y0"]]
    cots = ad.vjp(h["y_final"], wrt, upstream)
    z_shape = np.shape(z) if np.ndim(z) == 2 else (np.size(z),)
    grad_z = cots[0].reshape(z_shape)
    grad_params = bound.grads_to_param_shapes(dict(zip(names, cots[1 : 1 + len(names)])))
    grad_y0 = cots[1 + len(names)]
    return GradBundle(grad_z, grad_params, grad_y0, {"tape_nodes": trace.tape.node_count})


def optimality_residual(
    y_star,
    z,
    params: EncoderParams,
    cfg: InnerConfig,
    batch: int = 1,
    y0=None,
) -> float:
    """Norm of proj(Y* - grad L(Y*)) - Y*: the projected fixed-point defect.

    Diagnostic only; the backward passes use the unconstrained optimality
    condition even when projection is active.
    """
    tape, bound, y_t, z_t, g = _setup(np.asarray(y_star, float), z, params, batch)
    g_total = g.value
    if cfg.anchor_lambda > 0.0:
        if y0 is None:
            raise ValueError("anchor_lambda > 0 requires y0")
        g_total = g_total + cfg.anchor_lambda * (y_t.value - np.asarray(y0, float))
    step = y_t.value - _zero_frozen(g_total, cfg.fixed_mask)
    if cfg.projection is not None:
        lo, hi = cfg.projection
        step = step.copy()
        step[:, lo:hi] = simplex_project_rows(step[:, lo:hi])
    if cfg.fixed_mask is not None:
        step = np.where(cfg.fixed_mask, y_t.value, step)
    return float(np.linalg.norm(step - y_t.value))
