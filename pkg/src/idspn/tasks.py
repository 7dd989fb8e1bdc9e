"""The two synthetic experiments: class-specific numbering and random-multiset
autoencoding, with dataset generation, Adam outer training, and metrics.

Batches run as one stacked tape (block-structured matrices), so each training
step costs a handful of BLAS calls regardless of batch size.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .encoders import BoundEncoder, EncoderParams, init_params
from .implicit_grad import BackwardMode, GradBundle, backward_approximate, backward_full_implicit, backward_unrolled
from .inner_opt import InnerConfig, eval_config, minimize
from .matching import CLASS_PENALTY, hungarian_loss_grad, linear_assignment, pairwise_cost


def seed_stream(seed: int, name: str) -> np.random.Generator:
    """Independent, order-insensitive per-component stream (counter-based)."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key])))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def gen_numbering(n: int, classes: int, count: int, rng: np.random.Generator):
    """Inputs: one-hot class rows; targets: class one-hot + per-class ID one-hot.

    Within each class the IDs are exactly 0..k-1 in order of appearance.
    """
    if not (n >= classes >= 1):
        raise ValueError("need n >= classes >= 1")
    labels = rng.integers(0, classes, size=(count, n))
    inputs = np.zeros((count, n, classes))
    targets = np.zeros((count, n, classes + n))
    for s in range(count):
        counters = np.zeros(classes, dtype=int)
        for i in range(n):
            c = labels[s, i]
            inputs[s, i, c] = 1.0
            targets[s, i, c] = 1.0
            targets[s, i, classes + counters[c]] = 1.0
            counters[c] += 1
    return inputs, targets


def validate_numbering_sample(inp: np.ndarray, tgt: np.ndarray, classes: int) -> bool:
    """Target invariant: per class, the ID multiset equals {0..count-1}."""
    if not np.array_equal(inp, tgt[:, :classes]):
        return False
    labels = inp.argmax(axis=1)
    ids = tgt[:, classes:].argmax(axis=1)
    for c in range(classes):
        got = np.sort(ids[labels == c])
        if not np.array_equal(got, np.arange(got.size)):
            return False
    return True


def gen_random_sets(n: int, d: int, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(size=(count, n, d))


def dataset_cache(cache_dir, key: str, maker):
    """Load arrays from cache_dir/key.npz or build and store them."""
    if cache_dir is None:
        return maker()
    path = Path(cache_dir) / f"{key}.npz"
    if path.exists():
        with np.load(path) as blob:
            return tuple(blob[k] for k in blob.files)
    arrays = maker()
    if not isinstance(arrays, tuple):
        arrays = (arrays,)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{f"arr{i}": a for i, a in enumerate(arrays)})
    return arrays if len(arrays) > 1 else arrays[0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_init(params: dict[str, np.ndarray]) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
        "t": 0,
    }


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Standard bias-corrected Adam update (in place on the param arrays)."""
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, g in grads.items():
        m = state["m"][k]
        v = state["v"][k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# shared training machinery
# ---------------------------------------------------------------------------


def _flatten_params(prefix: str, p: EncoderParams) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in p.arrays().items()}


def _encode_inputs(enc: EncoderParams, x_flat: np.ndarray, n: int, batch: int):
    tape = Tape()
    bound = BoundEncoder(tape, enc, n=n, batch=batch)
    x_t = tape.leaf(x_flat)
    z_t = bound.encode(x_t)
    return tape, bound, z_t


def _input_encoder_grads(bound: BoundEncoder, z_t, grad_z: np.ndarray) -> dict[str, np.ndarray]:
    leaves = bound.param_leaves()
    cots = ad.vjp(z_t, list(leaves.values()), grad_z)
    return bound.grads_to_param_shapes(dict(zip(leaves, cots)))


def _decode(z_val, g_params, y0_flat, inner: InnerConfig, backward: BackwardMode, batch: int):
    cfg = replace(inner, record_for_unroll=backward.kind == "unrolled")
    return minimize(z_val, g_params, y0_flat, cfg, batch=batch)


def _inner_backward(trace, z_val, g_params, inner, backward: BackwardMode, upstream, batch) -> GradBundle:
    if backward.kind == "unrolled":
        return backward_unrolled(trace, z_val, g_params, upstream)
    if backward.kind == "full_implicit":
        return backward_full_implicit(trace.y_final, z_val, g_params, inner, backward, upstream, batch=batch)
    return backward_approximate(trace.y_final, z_val, g_params, inner, upstream, batch=batch)


def _schedule_value(schedule, progress, default):
    """Last (at, value) entry whose threshold has been reached."""
    if not schedule:
        return default
    value = default
    for at, v in sorted(schedule):
        if progress >= at:
            value = v
    return value


# ---------------------------------------------------------------------------
# class-specific numbering
# ---------------------------------------------------------------------------


@dataclass
class NumberingConfig:
    n: int = 16
    classes: int = 4
    hidden: int = 128
    pool: str = "fspool"
    steps: int = 20000
    batch_size: int = 64
    train_size: int = 640
    val_size: int = 640
    test_size: int = 6400
    eval_every: int = 500
    outer_lr: float = 1e-3
    seed: int = 0
    inner: InnerConfig = field(
        default_factory=lambda: InnerConfig(step_size=1.0, momentum=0.9, iterations=10, clip_norm=10.0)
    )
    backward: BackwardMode = field(default_factory=BackwardMode)
    iteration_schedule: list | None = None
    lr_drop: tuple | None = None  # (step, new_lr)
    cache_dir: str | None = None

    @property
    def d_full(self) -> int:
        return self.classes + self.n


@dataclass
class NumberingModel:
    enc_in: EncoderParams
    g: EncoderParams

    def params(self) -> dict[str, np.ndarray]:
        return {**_flatten_params("enc_in", self.enc_in), **_flatten_params("g", self.g)}

    def copy(self) -> "NumberingModel":
        return NumberingModel(self.enc_in.copy(), self.g.copy())


def build_numbering_model(cfg: NumberingConfig, rng: np.random.Generator) -> NumberingModel:
    enc_in = init_params(cfg.classes, cfg.hidden, cfg.pool, n=cfg.n, rng=rng)
    g = init_params(cfg.d_full, cfg.hidden, cfg.pool, n=cfg.n, rng=rng)
    return NumberingModel(enc_in, g)


def _numbering_inner(cfg: NumberingConfig, iterations: int) -> InnerConfig:
    mask = np.zeros((cfg.batch_size * cfg.n, cfg.d_full), dtype=bool)
    mask[:, : cfg.classes] = True
    return replace(
        cfg.inner,
        iterations=iterations,
        projection=(cfg.classes, cfg.d_full),
        fixed_mask=mask,
    )


def _numbering_y0(inputs: np.ndarray, n_ids: int, rng: np.random.Generator | None) -> np.ndarray:
    """Class dims copied from the input; ID dims on the simplex.

    Training draws uniform (Dirichlet-1) rows; evaluation uses the simplex
    center so evaluation is a pure function of the input multiset.
    """
    b, n, c = inputs.shape
    if rng is None:
        ids = np.full((b * n, n_ids), 1.0 / n_ids)
    else:
        e = rng.exponential(size=(b * n, n_ids))
        ids = e / e.sum(axis=1, keepdims=True)
    return np.concatenate([inputs.reshape(b * n, c), ids], axis=1)


def numbering_class_penalty(classes: int):
    return (np.arange(classes), CLASS_PENALTY)


def per_set_accuracy(pred: np.ndarray, target: np.ndarray, class_dims) -> float:
    """1.0 iff every element is correct after class-constrained matching."""
    class_dims = np.asarray(class_dims, dtype=np.intp)
    costs = pairwise_cost(pred, target, "mse", (class_dims, CLASS_PENALTY))
    res = linear_assignment(costs)
    tm = target[res.perm]
    d = pred.shape[1]
    id_dims = np.setdiff1d(np.arange(d), class_dims)
    ok_class = (pred[:, class_dims].argmax(axis=1) == tm[:, class_dims].argmax(axis=1)).all()
    ok_id = (pred[:, id_dims].argmax(axis=1) == tm[:, id_dims].argmax(axis=1)).all()
    return float(ok_class and ok_id)


def _numbering_outer_grad(pred_flat, targets, cfg: NumberingConfig):
    """Mean matched loss over the batch and its gradient in the predictions."""
    b, n = targets.shape[0], cfg.n
    cp = numbering_class_penalty(cfg.classes)
    total = 0.0
    grad = np.empty_like(pred_flat)
    for s in range(b):
        block = slice(s * n, (s + 1) * n)
        loss, _, g = hungarian_loss_grad(pred_flat[block], targets[s], "mse", cp, fast=True)
        total += loss
        grad[block] = g
    return total / b, grad / b


def _numbering_eval(model, cfg: NumberingConfig, inputs, targets, iterations):
    """Accuracy and matched loss over a split, batched, center-initialized."""
    b = cfg.batch_size
    n = cfg.n
    inner = eval_config(_numbering_inner(cfg, iterations))
    accs = []
    losses = []
    cp = numbering_class_penalty(cfg.classes)
    for lo in range(0, inputs.shape[0], b):
        chunk_in = inputs[lo : lo + b]
        chunk_tg = targets[lo : lo + b]
        nb = chunk_in.shape[0]
        if nb < b:
            inner = replace(inner, fixed_mask=inner.fixed_mask[: nb * n])
        tape, bound, z_t = _encode_inputs(model.enc_in, chunk_in.reshape(nb * n, -1), n, nb)
        y0 = _numbering_y0(chunk_in, cfg.n, rng=None)
        trace = minimize(z_t.value, model.g, y0, inner, batch=nb)
        for s in range(nb):
            block = slice(s * n, (s + 1) * n)
            pred = trace.y_final[block]
            accs.append(per_set_accuracy(pred, chunk_tg[s], np.arange(cfg.classes)))
            loss, _ = hungarian_loss_grad(pred, chunk_tg[s], "mse", cp, fast=True)[:2]
            losses.append(loss)
    return float(np.mean(accs)), float(np.mean(losses))


def train_numbering(cfg: NumberingConfig, on_metric=None) -> dict:
    """Train, select on validation accuracy, report test accuracy.

    Returns a summary dict; per-step records stream through on_metric.
    """
    data_rng = seed_stream(cfg.seed, "numbering-data")
    train_in, train_tg = dataset_cache(
        cfg.cache_dir,
        f"numbering_n{cfg.n}_c{cfg.classes}_count{cfg.train_size}_seed{cfg.seed}_train",
        lambda: gen_numbering(cfg.n, cfg.classes, cfg.train_size, data_rng),
    )
    val_in, val_tg = gen_numbering(cfg.n, cfg.classes, cfg.val_size, data_rng)
    test_in, test_tg = gen_numbering(cfg.n, cfg.classes, cfg.test_size, data_rng)

    model = build_numbering_model(cfg, seed_stream(cfg.seed, "numbering-init"))
    params = model.params()
    state = adam_init(params)
    batch_rng = seed_stream(cfg.seed, "numbering-batches")
    y0_rng = seed_stream(cfg.seed, "numbering-y0")

    metrics: list[dict] = []

    def emit(rec):
        metrics.append(rec)
        if on_metric:
            on_metric(rec)

    best = {"val_accuracy": -1.0, "model": model.copy(), "step": 0}
    lr = cfg.outer_lr
    loss_start = None
    b, n = cfg.batch_size, cfg.n
    for step in range(cfg.steps):
        iters = _schedule_value(cfg.iteration_schedule, step, cfg.inner.iterations)
        if cfg.lr_drop and step >= cfg.lr_drop[0]:
            lr = cfg.lr_drop[1]
        t0 = time.perf_counter()
        idx = batch_rng.integers(0, cfg.train_size, size=b)
        xb = train_in[idx]
        tb = train_tg[idx]
        tape_in, bound_in, z_t = _encode_inputs(model.enc_in, xb.reshape(b * n, -1), n, b)
        y0 = _numbering_y0(xb, cfg.n, rng=y0_rng)
        inner = _numbering_inner(cfg, iters)
        trace = _decode(z_t.value, model.g, y0, inner, cfg.backward, b)
        loss, upstream = _numbering_outer_grad(trace.y_final, tb, cfg)
        bundle = _inner_backward(trace, z_t.value, model.g, inner, cfg.backward, upstream, b)
        grads = {f"g.{k}": v for k, v in bundle.grad_params.items()}
        grads.update(
            {f"enc_in.{k}": v for k, v in _input_encoder_grads(bound_in, z_t, bundle.grad_z).items()}
        )
        adam_step(params, grads, state, lr)
        if loss_start is None:
            loss_start = loss
        wall = (time.perf_counter() - t0) * 1e3
        if step % 50 == 0 or step == cfg.steps - 1:
            emit({"step": step, "split": "train", "loss": loss, "iterations_used": iters, "wall_ms": wall})
        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            acc, vloss = _numbering_eval(model, cfg, val_in, val_tg, iters)
            emit({"step": step, "split": "val", "loss": vloss, "accuracy": acc, "iterations_used": iters, "wall_ms": 0.0})
            if acc > best["val_accuracy"]:
                best = {"val_accuracy": acc, "model": model.copy(), "step": step}

    final_iters = _schedule_value(cfg.iteration_schedule, cfg.steps, cfg.inner.iterations)
    test_acc, test_loss = _numbering_eval(best["model"], cfg, test_in, test_tg, final_iters)
    emit({"step": cfg.steps, "split": "test", "loss": test_loss, "accuracy": test_acc, "iterations_used": final_iters, "wall_ms": 0.0})
    return {
        "task": "numbering",
        "pool": cfg.pool,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "test_accuracy": test_acc,
        "test_loss": test_loss,
        "best_val_accuracy": best["val_accuracy"],
        "best_val_step": best["step"],
        "train_loss_start": loss_start,
        "train_loss_end": metrics[-3]["loss"] if len(metrics) >= 3 else loss_start,
        "metrics": None,
        "_metrics": metrics,
    }


# ---------------------------------------------------------------------------
# random-multiset autoencoding
# ---------------------------------------------------------------------------


@dataclass
class AutoencodeConfig:
    n: int = 8
    d: int = 8
    hidden: int = 128
    pool: str = "fspool"
    epochs: int = 10
    batch_size: int = 128
    train_size: int = 6400
    test_size: int = 640
    outer_lr: float = 1e-3
    seed: int = 0
    inner: InnerConfig = field(
        default_factory=lambda: InnerConfig(
            step_size=1.0, momentum=0.9, iterations=20, clip_norm=10.0, anchor_lambda=0.2
        )
    )
    backward: BackwardMode = field(default_factory=BackwardMode)
    iteration_schedule: list | None = None  # entries (epoch, iterations)
    lr_drop: tuple | None = None  # (epoch, new_lr)
    cache_dir: str | None = None


@dataclass
class AutoencodeModel:
    enc_in: EncoderParams
    g: EncoderParams
    y0: np.ndarray  # learned initial multiset, shared across samples

    def params(self) -> dict[str, np.ndarray]:
        out = {**_flatten_params("enc_in", self.enc_in), **_flatten_params("g", self.g)}
        out["y0"] = self.y0
        return out

    def copy(self) -> "AutoencodeModel":
        return AutoencodeModel(self.enc_in.copy(), self.g.copy(), self.y0.copy())


def build_autoencode_model(cfg: AutoencodeConfig, rng: np.random.Generator) -> AutoencodeModel:
    enc_in = init_params(cfg.d, cfg.hidden, cfg.pool, n=cfg.n, rng=rng)
    g = init_params(cfg.d, cfg.hidden, cfg.pool, n=cfg.n, rng=rng)
    y0 = rng.normal(0.0, np.sqrt(0.1), size=(cfg.n, cfg.d))
    return AutoencodeModel(enc_in, g, y0)


def _autoencode_outer_grad(pred_flat, points, n):
    b = points.shape[0]
    total = 0.0
    grad = np.empty_like(pred_flat)
    for s in range(b):
        block = slice(s * n, (s + 1) * n)
        loss, _, g = hungarian_loss_grad(pred_flat[block], points[s], "huber", fast=True)
        total += loss
        grad[block] = g
    return total / b, grad / b


def _autoencode_eval(model: AutoencodeModel, cfg: AutoencodeConfig, points, iterations) -> float:
    inner = eval_config(cfg.inner, iterations)
    losses = []
    n = cfg.n
    for lo in range(0, points.shape[0], cfg.batch_size):
        chunk = points[lo : lo + cfg.batch_size]
        nb = chunk.shape[0]
        tape, bound, z_t = _encode_inputs(model.enc_in, chunk.reshape(nb * n, -1), n, nb)
        y0 = np.tile(model.y0, (nb, 1))
        trace = minimize(z_t.value, model.g, y0, inner, batch=nb)
        loss, _ = _autoencode_outer_grad(trace.y_final, chunk, n)
        losses.append(loss * nb)
    return float(np.sum(losses) / points.shape[0])


def train_autoencode(cfg: AutoencodeConfig, on_metric=None) -> dict:
    """Autoencode i.i.d. normal multisets; report the final-epoch test loss."""
    data_rng = seed_stream(cfg.seed, "autoencode-data")
    train_pts = dataset_cache(
        cfg.cache_dir,
        f"randomsets_n{cfg.n}_d{cfg.d}_count{cfg.train_size}_seed{cfg.seed}_train",
        lambda: gen_random_sets(cfg.n, cfg.d, cfg.train_size, data_rng),
    )
    test_pts = gen_random_sets(cfg.n, cfg.d, cfg.test_size, data_rng)

    model = build_autoencode_model(cfg, seed_stream(cfg.seed, "autoencode-init"))
    params = model.params()
    state = adam_init(params)
    order_rng = seed_stream(cfg.seed, "autoencode-batches")

    metrics: list[dict] = []

    def emit(rec):
        metrics.append(rec)
        if on_metric:
            on_metric(rec)

    steps_per_epoch = cfg.train_size // cfg.batch_size
    lr = cfg.outer_lr
    step = 0
    loss_start = None
    n, b = cfg.n, cfg.batch_size
    t_train0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        iters = _schedule_value(cfg.iteration_schedule, epoch, cfg.inner.iterations)
        if cfg.lr_drop and epoch >= cfg.lr_drop[0]:
            lr = cfg.lr_drop[1]
        order = order_rng.permutation(cfg.train_size)
        for k in range(steps_per_epoch):
            t0 = time.perf_counter()
            chunk = train_pts[order[k * b : (k + 1) * b]]
            tape_in, bound_in, z_t = _encode_inputs(model.enc_in, chunk.reshape(b * n, -1), n, b)
            y0 = np.tile(model.y0, (b, 1))
            inner = replace(cfg.inner, iterations=iters)
            trace = _decode(z_t.value, model.g, y0, inner, cfg.backward, b)
            loss, upstream = _autoencode_outer_grad(trace.y_final, chunk, n)
            bundle = _inner_backward(trace, z_t.value, model.g, inner, cfg.backward, upstream, b)
            grads = {f"g.{k2}": v for k2, v in bundle.grad_params.items()}
            grads.update(
                {f"enc_in.{k2}": v for k2, v in _input_encoder_grads(bound_in, z_t, bundle.grad_z).items()}
            )
            grads["y0"] = bundle.grad_y0.reshape(b, n, cfg.d).sum(axis=0)
            adam_step(params, grads, state, lr)
            if loss_start is None:
                loss_start = loss
            wall = (time.perf_counter() - t0) * 1e3
            if step % 20 == 0:
                emit({"step": step, "split": "train", "loss": loss, "iterations_used": iters, "wall_ms": wall})
            step += 1
        tloss = _autoencode_eval(model, cfg, test_pts, iters)
        emit({"step": step, "split": "test", "loss": tloss, "iterations_used": iters, "wall_ms": 0.0})
    train_wall_s = time.perf_counter() - t_train0

    final_iters = _schedule_value(cfg.iteration_schedule, cfg.epochs, cfg.inner.iterations)
    final_loss = _autoencode_eval(model, cfg, test_pts, final_iters)
    return {
        "task": "autoencode",
        "pool": cfg.pool,
        "seed": cfg.seed,
        "n": cfg.n,
        "d": cfg.d,
        "iterations": cfg.inner.iterations,
        "backward": cfg.backward.kind,
        "momentum": cfg.inner.momentum,
        "test_loss": final_loss,
        "train_loss_start": loss_start,
        "train_loss_end": metrics[-2]["loss"] if len(metrics) >= 2 else loss_start,
        "_metrics": metrics,
        "_train_wall_s": train_wall_s,
    }
