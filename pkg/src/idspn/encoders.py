"""Permutation-invariant multiset-to-vector encoders.

The encoder is an elementwise affine-ReLU-affine stack followed by a pooling
step: featurewise sort pooling (FSPool, fixed multiset size), sum, or mean.
Batches are processed as one stacked (batch*n) x d matrix with block-local
pooling, so a single tape serves the whole batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

POOLS = ("fspool", "sum", "mean")


@dataclass
class EncoderParams:
    """Weights of one multiset encoder.

    w1: hidden x d_in, b1: hidden, w2: hidden x hidden, b2: hidden,
    pool_w: hidden x n (FSPool only).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    pool: str
    pool_w: np.ndarray | None = None

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "EncoderParams":
        return replace(
            self,
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            pool_w=None if self.pool_w is None else self.pool_w.copy(),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        if self.pool_w is not None:
            out["pool_w"] = self.pool_w
        return out

    def save(self, path) -> None:
        """Serialize to JSON; float repr round-trips bit-exactly."""
        blob = {"pool": self.pool, "arrays": {}}
        for name, arr in self.arrays().items():
            blob["arrays"][name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
        Path(path).write_text(json.dumps(blob))

    @staticmethod
    def load(path) -> "EncoderParams":
        blob = json.loads(Path(path).read_text())
        arrs = {
            name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
            for name, spec in blob["arrays"].items()
        }
        return EncoderParams(
            w1=arrs["w1"],
            b1=arrs["b1"],
            w2=arrs["w2"],
            b2=arrs["b2"],
            pool=blob["pool"],
            pool_w=arrs.get("pool_w"),
        )


def init_params(
    d_in: int,
    hidden: int,
    pool: str,
    n: int | None = None,
    rng: np.random.Generator | None = None,
) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for all weights."""
    if pool not in POOLS:
        raise ValueError(f"unknown pool {pool!r}")
    rng = rng if rng is not None else np.random.default_rng(0)

    def u(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    pool_w = None
    if pool == "fspool":
        if n is None:
            raise ValueError("fspool needs the fixed multiset size n")
        pool_w = u((hidden, n), n)
    return EncoderParams(
        w1=u((hidden, d_in), d_in),
        b1=u((hidden,), d_in),
        w2=u((hidden, hidden), hidden),
        b2=u((hidden,), hidden),
        pool=pool,
        pool_w=pool_w,
    )


def sort_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort each column ascending (stable); returns (sorted, perms).

    perms[i, j] is the source row of sorted[i, j]; ties keep original order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"sort_columns expects an n x d matrix, got {x.shape}")
    perms = np.argsort(x, axis=0, kind="stable")
    return np.take_along_axis(x, perms, axis=0), perms


def _block_sort_perms(values: np.ndarray, batch: int) -> np.ndarray:
    """Stable per-column argsort inside each of `batch` equal row blocks.

    Stability is semantic here, not cosmetic: duplicate rows tie in every
    column at once, and only a tie-break that is consistent across columns
    (original row order) keeps the pooling gradient multiset-equivariant.
    """
    total, d = values.shape
    n = total // batch
    idx = np.argsort(values.reshape(batch, n, d), axis=1, kind="stable")
    idx += (np.arange(batch) * n)[:, None, None]
    return idx.reshape(total, d)


class EncoderConsts:
    """Per-(params, n, batch) arrays reused across tapes within one step.

    Parameter arrays mutate between optimizer steps, so rebuild per step;
    within a step every inner iteration adopts these without copying.
    """

    def __init__(self, params: EncoderParams, n: int, batch: int):
        self.n = n
        self.batch = batch
        self.w1t = np.ascontiguousarray(params.w1.T)
        self.b1row = params.b1.reshape(1, -1).copy()
        self.w2t = np.ascontiguousarray(params.w2.T)
        self.b2row = params.b2.reshape(1, -1).copy()
        if params.pool == "fspool":
            self.wpt = np.ascontiguousarray(params.pool_w.T)
            self.wtile = np.tile(self.wpt, (batch, 1))
            self.tile_eye = np.tile(np.eye(n), (batch, 1))
        else:
            self.wpt = None
            self.wtile = None
            self.tile_eye = None


class BoundEncoder:
    """Encoder parameters bound to one tape as leaves.

    All encode/loss calls on the same BoundEncoder share parameter leaves, so
    backward passes accumulate parameter cotangents correctly across calls.
    With trainable=False the pooling weights enter as plain constants, which
    keeps the per-iteration tape of the inner loop minimal.
    """

    def __init__(
        self,
        tape: Tape,
        params: EncoderParams,
        n: int,
        batch: int = 1,
        consts: EncoderConsts | None = None,
        trainable: bool = True,
    ):
        if params.pool == "fspool" and params.pool_w.shape[1] != n:
            raise ValueError(
                f"fspool weights cover multiset size {params.pool_w.shape[1]}, got n={n}"
            )
        self.tape = tape
        self.params = params
        self.n = n
        self.batch = batch
        self.trainable = trainable
        c = consts if consts is not None else EncoderConsts(params, n, batch)
        self.consts = c
        self.w1t = tape.leaf(c.w1t)
        self.b1 = tape.leaf(c.b1row)
        self.w2t = tape.leaf(c.w2t)
        self.b2 = tape.leaf(c.b2row)
        if params.pool == "fspool":
            self.wpt = tape.leaf(c.wpt)  # n x hidden
            self._wtile = (
                ad.matmul(tape.leaf(c.tile_eye), self.wpt) if trainable else tape.leaf(c.wtile)
            )
        else:
            self.wpt = None
            self._wtile = None

    def param_leaves(self) -> dict[str, Tensor]:
        out = {"w1": self.w1t, "b1": self.b1, "w2": self.w2t, "b2": self.b2}
        if self.wpt is not None:
            out["pool_w"] = self.wpt
        return out

    def grads_to_param_shapes(self, cots: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Map leaf cotangents back to EncoderParams array shapes."""
        out = {}
        for name, g in cots.items():
            if name in ("w1", "w2", "pool_w"):
                out[name] = np.ascontiguousarray(g.T)
            else:
                out[name] = g.reshape(self.params.arrays()[name].shape)
        return out

    def encode(self, y: Tensor) -> Tensor:
        """Latent codes, one row per batch block."""
        h1 = ad.relu(ad.add_row(ad.matmul(y, self.w1t), self.b1))
        h2 = ad.add_row(ad.matmul(h1, self.w2t), self.b2)
        if self.params.pool == "sum":
            return ad.sum_blocks(h2, self.batch)
        if self.params.pool == "mean":
            return ad.scalar_mul(ad.sum_blocks(h2, self.batch), 1.0 / self.n)
        perms = _block_sort_perms(h2.value, self.batch)
        srt = ad.gather_per_column_by_perms(h2, perms, checked=False)
        return ad.sum_blocks(ad.mul(srt, self._wtile), self.batch)

    def inner_loss(self, y: Tensor, z: Tensor) -> Tensor:
        """Squared distance between encodings and targets, summed over blocks."""
        return ad.sum_all(ad.square(ad.sub(self.encode(y), z)))


# ---------------------------------------------------------------------------
# single-multiset convenience surface
# ---------------------------------------------------------------------------


def encode(y, params: EncoderParams, tape: Tape) -> Tensor:
    """Encode one n x d multiset to a 1 x hidden latent on the tape."""
    y_t = y if isinstance(y, Tensor) else tape.leaf(y)
    bound = BoundEncoder(tape, params, n=y_t.shape[0], batch=1)
    return bound.encode(y_t)


def inner_loss(y, z, params: EncoderParams, tape: Tape) -> Tensor:
    """||encode(y) - z||^2 as a 1 x 1 tensor on the tape."""
    y_t = y if isinstance(y, Tensor) else tape.leaf(y)
    z_t = z if isinstance(z, Tensor) else tape.leaf(np.asarray(z, dtype=np.float64).reshape(1, -1))
    bound = BoundEncoder(tape, params, n=y_t.shape[0], batch=1)
    return bound.inner_loss(y_t, z_t)


def grad_inner_loss(y, z, params: EncoderParams, tape: Tape, create_graph: bool = False):
    """Gradient of the inner loss with respect to the multiset."""
    y_t = y if isinstance(y, Tensor) else tape.leaf(y)
    loss = inner_loss(y_t, z, params, tape)
    return ad.backward(loss, [y_t], create_graph=create_graph)[0]


def push_apart_via_sorting(ab: np.ndarray) -> np.ndarray:
    """Move two scalars apart by one unit each, via the gradient of sort-dot.

    The inner function multiplies the smaller element by -1 and the larger by
    +1 and sums; its gradient routes those weights back through the sorting
    permutation, so the smaller element receives -1 and the larger +1.
    """
    ab = np.asarray(ab, dtype=np.float64).reshape(2, 1)
    tape = Tape()
    x = tape.leaf(ab)
    perm = np.argsort(ab[:, 0], kind="stable")
    srt = ad.gather_rows_by_perm(x, perm)
    w = tape.leaf(np.array([[-1.0], [1.0]]))
    g = ad.sum_all(ad.mul(srt, w))
    (grad,) = ad.backward(g, [x])
    return ab + grad
