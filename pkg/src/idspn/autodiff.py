"""Minimal reverse-mode differentiation over dense 2-D float64 matrices.

Every value is a matrix (vectors are 1 x d, scalars 1 x 1) registered on an
explicit :class:`Tape`.  The backward pass can itself be recorded as tape
operations (``create_graph=True``), which makes gradients re-differentiable:
this is what enables unrolling an inner gradient descent, Hessian-vector
products, and VJPs of gradient fields.

Design notes:

* No broadcasting except ``scalar_mul``; all shapes are explicit.
* Sorting never happens on the tape.  Sort orders are computed outside and
  enter through ``gather_rows_by_perm`` / ``gather_per_column_by_perms`` with
  the permutations saved as constants, so their Jacobian is the transposed
  permutation (zero derivative through the order itself).
* ReLU's subgradient at 0 is 0.
* A tape and its tensors are confined to one thread; separate tapes may run
  on separate threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "Tape",
    "Tensor",
    "record",
    "backward",
    "vjp",
    "finite_diff_grad",
    "assert_finite",
    "PUBLIC_OPS",
    "ALL_OPS",
]

# Op kinds accepted from user code.  The engine registers a few extra
# primitive kinds (mul, exp, sqrt, recip, clip_unit) that backward rules
# need in order to stay re-differentiable; they pass the same gradient
# checks as the public set.
PUBLIC_OPS = (
    "matmul",
    "add",
    "sub",
    "scalar_mul",
    "relu",
    "gather_rows_by_perm",
    "gather_per_column_by_perms",
    "sum_all",
    "sum_rows",
    "square",
    "huber",
    "log_softmax_rows",
    "concat_cols",
    "slice_cols",
)

INTERNAL_OPS = ("mul", "exp", "sqrt", "recip", "clip_unit", "add_row", "sum_blocks", "repeat_rows")

ALL_OPS = PUBLIC_OPS + INTERNAL_OPS


class AutodiffError(ValueError):
    """Raised on shape mismatches or misuse of tape operations."""


class _Node:
    __slots__ = ("op", "inputs", "value", "aux")

    def __init__(self, op: str, inputs: tuple[int, ...], value: np.ndarray, aux):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.aux = aux


class Tensor:
    """Handle to a node on a tape.  Immutable once created."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape._nodes[self.nid].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.tape._nodes[self.nid].value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(nid={self.nid}, shape={self.shape})"


class Tape:
    """Append-only record of operations; node inputs always point backwards."""

    __slots__ = ("_nodes",)

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    @property
    def node_count(self) -> int:
        return len(self._nodes)

    def leaf(self, value) -> Tensor:
        """Register a constant/input matrix (2-D, float64)."""
        arr = np.ascontiguousarray(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise AutodiffError(f"leaf must be 2-D, got shape {arr.shape}")
        self._nodes.append(_Node("leaf", (), arr, None))
        return Tensor(self, len(self._nodes) - 1)

    def replay(self) -> bool:
        """Recompute every non-leaf value from its inputs; True iff bit-identical."""
        for node in self._nodes:
            if node.op == "leaf":
                continue
            vals = [self._nodes[i].value for i in node.inputs]
            redo = _FORWARD[node.op](vals, node.aux)
            if not np.array_equal(redo, node.value):
                return False
        return True


def assert_finite(t: Tensor, context: str = "") -> Tensor:
    """Validation op: raise if the tensor holds NaN or Inf."""
    if not np.all(np.isfinite(t.value)):
        where = context or "tensor"
        raise AutodiffError(f"non-finite values in {where}")
    return t


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------


def _shape_err(op: str, a, b) -> AutodiffError:
    return AutodiffError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _mm(a: np.ndarray, b: np.ndarray, ta: bool, tb: bool) -> np.ndarray:
    x = a.T if ta else a
    y = b.T if tb else b
    if x.shape[1] != y.shape[0]:
        raise _shape_err("matmul", x.shape, y.shape)
    return x @ y


def _fw_matmul(vals, aux):
    return _mm(vals[0], vals[1], aux[0], aux[1])


def _fw_add(vals, aux):
    a, b = vals
    if a.shape != b.shape:
        raise _shape_err("add", a.shape, b.shape)
    return a + b


def _fw_sub(vals, aux):
    a, b = vals
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)
    return a - b


def _fw_scalar_mul(vals, aux):
    return vals[0] * aux


def _fw_mul(vals, aux):
    a, b = vals
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)
    return a * b


def _fw_relu(vals, aux):
    return np.maximum(vals[0], 0.0)


def _fw_square(vals, aux):
    return vals[0] * vals[0]


def _fw_huber(vals, aux):
    # quadratic for |x| <= 1, linear above; threshold fixed at 1
    x = vals[0]
    ax = np.abs(x)
    return np.where(ax <= 1.0, 0.5 * x * x, ax - 0.5)


def _fw_exp(vals, aux):
    return np.exp(vals[0])


def _fw_sqrt(vals, aux):
    return np.sqrt(vals[0])


def _fw_recip(vals, aux):
    return 1.0 / vals[0]


def _fw_clip_unit(vals, aux):
    return np.clip(vals[0], -1.0, 1.0)


_COLS_CACHE: dict[int, np.ndarray] = {}


def _cols(d: int) -> np.ndarray:
    c = _COLS_CACHE.get(d)
    if c is None:
        c = np.arange(d, dtype=np.intp)
        _COLS_CACHE[d] = c
    return c


def _fw_add_row(vals, aux):
    # explicit row broadcast: (n x d) + (1 x d)
    a, b = vals
    if b.shape != (1, a.shape[1]):
        raise _shape_err("add_row", a.shape, b.shape)
    return a + b


def _fw_sum_blocks(vals, aux):
    # sum each of `aux` consecutive equal-height row blocks
    x = vals[0]
    blocks = aux
    if x.shape[0] % blocks:
        raise _shape_err("sum_blocks", x.shape, (blocks,))
    return x.reshape(blocks, -1, x.shape[1]).sum(axis=1)


def _fw_repeat_rows(vals, aux):
    return np.repeat(vals[0], aux, axis=0)


def _fw_gather_rows(vals, aux):
    x = vals[0]
    perm = aux
    if len(perm) != x.shape[0]:
        raise _shape_err("gather_rows_by_perm", x.shape, (len(perm),))
    return x[perm]


def _flat_gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return x.reshape(-1)[idx * d + _cols(d)]


def _flat_scatter(c: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # adjoint of _flat_gather for bijective per-column indices
    out = np.empty_like(c)
    d = c.shape[1]
    out.reshape(-1)[((idx * d) + _cols(d)).reshape(-1)] = c.reshape(-1)
    return out


def _fw_gather_cols(vals, aux):
    x = vals[0]
    idx = aux
    if idx.shape != x.shape:
        raise _shape_err("gather_per_column_by_perms", x.shape, idx.shape)
    return _flat_gather(x, idx)


def _fw_sum_all(vals, aux):
    return np.array([[vals[0].sum()]])


def _fw_sum_rows(vals, aux):
    return vals[0].sum(axis=0, keepdims=True)


def _fw_log_softmax_rows(vals, aux):
    x = vals[0]
    m = x.max(axis=1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _fw_concat_cols(vals, aux):
    rows = {v.shape[0] for v in vals}
    if len(rows) != 1:
        raise AutodiffError(f"concat_cols: differing row counts {sorted(rows)}")
    return np.concatenate(vals, axis=1)


def _fw_slice_cols(vals, aux):
    lo, hi = aux
    x = vals[0]
    if not (0 <= lo < hi <= x.shape[1]):
        raise AutodiffError(f"slice_cols: bad range [{lo}, {hi}) for shape {x.shape}")
    return np.ascontiguousarray(x[:, lo:hi])


_FORWARD: dict[str, Callable] = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "sub": _fw_sub,
    "scalar_mul": _fw_scalar_mul,
    "mul": _fw_mul,
    "add_row": _fw_add_row,
    "sum_blocks": _fw_sum_blocks,
    "repeat_rows": _fw_repeat_rows,
    "relu": _fw_relu,
    "square": _fw_square,
    "huber": _fw_huber,
    "exp": _fw_exp,
    "sqrt": _fw_sqrt,
    "recip": _fw_recip,
    "clip_unit": _fw_clip_unit,
    "gather_rows_by_perm": _fw_gather_rows,
    "gather_per_column_by_perms": _fw_gather_cols,
    "sum_all": _fw_sum_all,
    "sum_rows": _fw_sum_rows,
    "log_softmax_rows": _fw_log_softmax_rows,
    "concat_cols": _fw_concat_cols,
    "slice_cols": _fw_slice_cols,
}


def record(tape: Tape, op_kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Run one op forward and register it on the tape."""
    if op_kind not in _FORWARD:
        raise AutodiffError(f"unknown op kind {op_kind!r}")
    for t in inputs:
        if t.tape is not tape:
            raise AutodiffError(f"{op_kind}: input tensor belongs to a different tape")
    aux = _pack_aux(op_kind, kwargs)
    vals = [t.value for t in inputs]
    out = _FORWARD[op_kind](vals, aux)
    tape._nodes.append(_Node(op_kind, tuple(t.nid for t in inputs), out, aux))
    return Tensor(tape, tape.node_count - 1)


def _pack_aux(op_kind: str, kw: dict):
    if op_kind == "matmul":
        return (bool(kw.pop("transpose_a", False)), bool(kw.pop("transpose_b", False)))
    if op_kind == "scalar_mul":
        return float(kw.pop("scalar"))
    if op_kind in ("sum_blocks", "repeat_rows"):
        return int(kw.pop("count"))
    if op_kind == "gather_rows_by_perm":
        perm = np.asarray(kw.pop("perm"), dtype=np.intp)
        if kw.pop("checked", True) and not _is_perm(perm):
            raise AutodiffError("gather_rows_by_perm: perm is not a bijection")
        return perm
    if op_kind == "gather_per_column_by_perms":
        idx = np.asarray(kw.pop("perms"), dtype=np.intp)
        if kw.pop("checked", True):
            for j in range(idx.shape[1]):
                if not _is_perm(idx[:, j]):
                    raise AutodiffError(
                        f"gather_per_column_by_perms: column {j} is not a bijection"
                    )
        return idx
    if op_kind == "slice_cols":
        return (int(kw.pop("start")), int(kw.pop("stop")))
    if kw:
        raise AutodiffError(f"{op_kind}: unexpected arguments {sorted(kw)}")
    return None


def _is_perm(p: np.ndarray) -> bool:
    n = p.shape[0]
    seen = np.zeros(n, dtype=bool)
    if p.min(initial=0) < 0 or p.max(initial=-1) >= n:
        return False
    seen[p] = True
    return bool(seen.all())


def _invert_perm(p: np.ndarray) -> np.ndarray:
    inv = np.empty_like(p)
    inv[p] = np.arange(p.shape[0], dtype=p.dtype)
    return inv


def _invert_col_perms(idx: np.ndarray) -> np.ndarray:
    n, d = idx.shape
    inv = np.empty(n * d, dtype=idx.dtype)
    cols = np.arange(d, dtype=idx.dtype)
    inv[(idx * d + cols).ravel()] = np.repeat(np.arange(n, dtype=idx.dtype), d)
    return inv.reshape(n, d)


# ---------------------------------------------------------------------------
# convenience wrappers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    return record(a.tape, "matmul", [a, b], transpose_a=transpose_a, transpose_b=transpose_b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return record(a.tape, "add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return record(a.tape, "sub", [a, b])


def scalar_mul(a: Tensor, scalar: float) -> Tensor:
    return record(a.tape, "scalar_mul", [a], scalar=scalar)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return record(a.tape, "mul", [a, b])


def add_row(a: Tensor, row: Tensor) -> Tensor:
    return record(a.tape, "add_row", [a, row])


def sum_blocks(a: Tensor, count: int) -> Tensor:
    return record(a.tape, "sum_blocks", [a], count=count)


def repeat_rows(a: Tensor, count: int) -> Tensor:
    return record(a.tape, "repeat_rows", [a], count=count)


def relu(a: Tensor) -> Tensor:
    return record(a.tape, "relu", [a])


def square(a: Tensor) -> Tensor:
    return record(a.tape, "square", [a])


def huber(a: Tensor) -> Tensor:
    return record(a.tape, "huber", [a])


def exp(a: Tensor) -> Tensor:
    return record(a.tape, "exp", [a])


def sqrt(a: Tensor) -> Tensor:
    return record(a.tape, "sqrt", [a])


def recip(a: Tensor) -> Tensor:
    return record(a.tape, "recip", [a])


def clip_unit(a: Tensor) -> Tensor:
    return record(a.tape, "clip_unit", [a])


def gather_rows_by_perm(a: Tensor, perm, checked: bool = True) -> Tensor:
    return record(a.tape, "gather_rows_by_perm", [a], perm=perm, checked=checked)


def gather_per_column_by_perms(a: Tensor, perms, checked: bool = True) -> Tensor:
    return record(a.tape, "gather_per_column_by_perms", [a], perms=perms, checked=checked)


def sum_all(a: Tensor) -> Tensor:
    return record(a.tape, "sum_all", [a])


def sum_rows(a: Tensor) -> Tensor:
    return record(a.tape, "sum_rows", [a])


def log_softmax_rows(a: Tensor) -> Tensor:
    return record(a.tape, "log_softmax_rows", [a])


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    return record(parts[0].tape, "concat_cols", list(parts))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    return record(a.tape, "slice_cols", [a], start=start, stop=stop)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------
#
# Each op has one VJP rule written against a tiny executor algebra.  The
# recording executor lands the rule's arithmetic on the tape (re-
# differentiable cotangents); the eager executor runs the identical numpy
# arithmetic without recording.


class _EagerExec:
    record = False

    @staticmethod
    def lift(tape, nid):
        return tape._nodes[nid].value

    @staticmethod
    def const(tape, arr):
        return arr

    @staticmethod
    def mm(a, b, ta=False, tb=False):
        return _mm(a, b, ta, tb)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def smul(a, s):
        return a * s

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def exp(a):
        return np.exp(a)

    @staticmethod
    def recip(a):
        return 1.0 / a

    @staticmethod
    def clip_unit(a):
        return np.clip(a, -1.0, 1.0)

    @staticmethod
    def gather_rows(a, perm):
        return a[perm]

    @staticmethod
    def gather_cols(a, idx):
        return _flat_gather(a, idx)

    @staticmethod
    def concat(parts):
        return np.concatenate(parts, axis=1)

    @staticmethod
    def slice(a, lo, hi):
        return a[:, lo:hi]

    @staticmethod
    def mask_mul(tape, a, mask_bool):
        # cotangent times a 0/1 mask given as booleans
        return a * mask_bool

    @staticmethod
    def sum_rows_(a):
        return a.sum(axis=0, keepdims=True)

    @staticmethod
    def sum_blocks_(a, count):
        return a.reshape(count, -1, a.shape[1]).sum(axis=1)

    @staticmethod
    def repeat_rows_(a, count):
        return np.repeat(a, count, axis=0)

    @staticmethod
    def tile_scalar(tape, c, n, d):
        return np.full((n, d), c[0, 0])

    @staticmethod
    def tile_rows(tape, c, n):
        return np.broadcast_to(c, (n, c.shape[1]))


class _RecordExec:
    record = True

    @staticmethod
    def lift(tape, nid):
        return Tensor(tape, nid)

    @staticmethod
    def const(tape, arr):
        return tape.leaf(arr)

    @staticmethod
    def mm(a, b, ta=False, tb=False):
        return matmul(a, b, transpose_a=ta, transpose_b=tb)

    add = staticmethod(add)
    sub = staticmethod(sub)

    @staticmethod
    def smul(a, s):
        return scalar_mul(a, s)

    mul = staticmethod(mul)

    @staticmethod
    def exp(a):
        return record(a.tape, "exp", [a])

    @staticmethod
    def recip(a):
        return record(a.tape, "recip", [a])

    @staticmethod
    def clip_unit(a):
        return record(a.tape, "clip_unit", [a])

    @staticmethod
    def gather_rows(a, perm):
        return gather_rows_by_perm(a, perm, checked=False)

    @staticmethod
    def gather_cols(a, idx):
        return gather_per_column_by_perms(a, idx, checked=False)

    concat = staticmethod(concat_cols)

    @staticmethod
    def slice(a, lo, hi):
        return slice_cols(a, lo, hi)

    @staticmethod
    def mask_mul(tape, a, mask_bool):
        return mul(a, tape.leaf(mask_bool.astype(np.float64)))

    @staticmethod
    def sum_rows_(a):
        return sum_rows(a)

    @staticmethod
    def sum_blocks_(a, count):
        return sum_blocks(a, count)

    @staticmethod
    def repeat_rows_(a, count):
        return repeat_rows(a, count)

    @staticmethod
    def tile_scalar(tape, c, n, d):
        row = matmul(c, tape.leaf(np.ones((1, d))))
        return matmul(tape.leaf(np.ones((n, 1))), row)

    @staticmethod
    def tile_rows(tape, c, n):
        return matmul(tape.leaf(np.ones((n, 1))), c)


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else x


def _vjp_matmul(ex, tape, ins, out, aux, c):
    a, b = ins
    ta, tb = aux
    if not ta:
        da = ex.mm(c, b, False, not tb)
    else:
        da = ex.mm(b, c, tb, True)
    if not tb:
        db = ex.mm(a, c, not ta, False)
    else:
        db = ex.mm(c, a, True, ta)
    return (da, db)


def _vjp_add(ex, tape, ins, out, aux, c):
    return (c, c)


def _vjp_sub(ex, tape, ins, out, aux, c):
    return (c, ex.smul(c, -1.0))


def _vjp_scalar_mul(ex, tape, ins, out, aux, c):
    return (ex.smul(c, aux),)


def _vjp_mul(ex, tape, ins, out, aux, c):
    a, b = ins
    return (ex.mul(c, b), ex.mul(c, a))


def _vjp_relu(ex, tape, ins, out, aux, c):
    return (ex.mask_mul(tape, c, _val(ins[0]) > 0.0),)


def _vjp_square(ex, tape, ins, out, aux, c):
    return (ex.smul(ex.mul(c, ins[0]), 2.0),)


def _vjp_huber(ex, tape, ins, out, aux, c):
    return (ex.mul(c, ex.clip_unit(ins[0])),)


def _vjp_exp(ex, tape, ins, out, aux, c):
    return (ex.mul(c, out),)


def _vjp_sqrt(ex, tape, ins, out, aux, c):
    # d sqrt(x) = 1 / (2 sqrt(x))
    return (ex.smul(ex.mul(c, ex.recip(out)), 0.5),)


def _vjp_recip(ex, tape, ins, out, aux, c):
    return (ex.smul(ex.mul(c, ex.mul(out, out)), -1.0),)


def _vjp_clip_unit(ex, tape, ins, out, aux, c):
    return (ex.mask_mul(tape, c, np.abs(_val(ins[0])) <= 1.0),)


def _vjp_add_row(ex, tape, ins, out, aux, c):
    return (c, ex.sum_rows_(c))


def _vjp_sum_blocks(ex, tape, ins, out, aux, c):
    n = _val(ins[0]).shape[0] // aux
    return (ex.repeat_rows_(c, n),)


def _vjp_repeat_rows(ex, tape, ins, out, aux, c):
    blocks = _val(ins[0]).shape[0]
    return (ex.sum_blocks_(c, blocks),)


def _vjp_gather_rows(ex, tape, ins, out, aux, c):
    return (ex.gather_rows(c, _invert_perm(aux)),)


def _vjp_gather_cols(ex, tape, ins, out, aux, c):
    if not ex.record:
        return (_flat_scatter(np.ascontiguousarray(c), aux),)
    return (ex.gather_cols(c, _invert_col_perms(aux)),)


def _vjp_sum_all(ex, tape, ins, out, aux, c):
    n, d = _val(ins[0]).shape
    return (ex.tile_scalar(tape, c, n, d),)


def _vjp_sum_rows(ex, tape, ins, out, aux, c):
    n = _val(ins[0]).shape[0]
    return (ex.tile_rows(tape, c, n),)


def _vjp_log_softmax_rows(ex, tape, ins, out, aux, c):
    d = _val(ins[0]).shape[1]
    soft = ex.exp(out)
    rowsum = ex.mm(c, ex.const(tape, np.ones((d, 1))))
    tiled = ex.mm(rowsum, ex.const(tape, np.ones((1, d))))
    return (ex.sub(c, ex.mul(soft, tiled)),)


def _vjp_concat_cols(ex, tape, ins, out, aux, c):
    grads = []
    off = 0
    for t in ins:
        w = _val(t).shape[1]
        grads.append(ex.slice(c, off, off + w))
        off += w
    return tuple(grads)


def _vjp_slice_cols(ex, tape, ins, out, aux, c):
    lo, hi = aux
    n, d = _val(ins[0]).shape
    parts = []
    if lo > 0:
        parts.append(ex.const(tape, np.zeros((n, lo))))
    parts.append(c)
    if hi < d:
        parts.append(ex.const(tape, np.zeros((n, d - hi))))
    if len(parts) == 1:
        return (c,)
    return (ex.concat(parts),)


_VJP_RULES: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "sub": _vjp_sub,
    "scalar_mul": _vjp_scalar_mul,
    "mul": _vjp_mul,
    "add_row": _vjp_add_row,
    "sum_blocks": _vjp_sum_blocks,
    "repeat_rows": _vjp_repeat_rows,
    "relu": _vjp_relu,
    "square": _vjp_square,
    "huber": _vjp_huber,
    "exp": _vjp_exp,
    "sqrt": _vjp_sqrt,
    "recip": _vjp_recip,
    "clip_unit": _vjp_clip_unit,
    "gather_rows_by_perm": _vjp_gather_rows,
    "gather_per_column_by_perms": _vjp_gather_cols,
    "sum_all": _vjp_sum_all,
    "sum_rows": _vjp_sum_rows,
    "log_softmax_rows": _vjp_log_softmax_rows,
    "concat_cols": _vjp_concat_cols,
    "slice_cols": _vjp_slice_cols,
}


def _activity(tape: Tape, out_nid: int, wrt_nids: list[int]):
    """Nodes lying on some path from a wrt leaf to the output."""
    nodes = tape._nodes
    desc = np.zeros(out_nid + 1, dtype=bool)
    for nid in wrt_nids:
        if nid <= out_nid:
            desc[nid] = True
    lo = min(wrt_nids) if wrt_nids else out_nid + 1
    for nid in range(lo, out_nid + 1):
        if desc[nid]:
            continue
        for i in nodes[nid].inputs:
            if desc[i]:
                desc[nid] = True
                break
    anc = np.zeros(out_nid + 1, dtype=bool)
    anc[out_nid] = True
    for nid in range(out_nid, -1, -1):
        if anc[nid]:
            for i in nodes[nid].inputs:
                anc[i] = True
    return desc & anc


def vjp(
    output: Tensor,
    wrt: Sequence[Tensor],
    cotangent,
    create_graph: bool = False,
) -> list:
    """Pull the cotangent back from ``output`` to each ``wrt`` tensor.

    Returns one cotangent per wrt tensor: plain ndarrays normally, tape
    tensors when ``create_graph`` is set.  A wrt tensor that the output does
    not depend on gets a zero cotangent.
    """
    tape = output.tape
    for w in wrt:
        if w.tape is not tape:
            raise AutodiffError("vjp: wrt tensor on a different tape")
    cot_val = cotangent.value if isinstance(cotangent, Tensor) else np.asarray(cotangent, dtype=np.float64)
    if cot_val.shape != output.shape:
        raise AutodiffError(
            f"vjp: cotangent shape {cot_val.shape} != output shape {output.shape}"
        )

    ex = _RecordExec if create_graph else _EagerExec
    active = _activity(tape, output.nid, [w.nid for w in wrt])

    def _zero(w):
        z = np.zeros(w.shape)
        return tape.leaf(z) if create_graph else z

    if not active[output.nid]:
        return [_zero(w) for w in wrt]

    if create_graph:
        seed = cotangent if isinstance(cotangent, Tensor) else tape.leaf(cot_val)
    else:
        seed = cot_val

    nodes = tape._nodes
    cots: dict[int, object] = {output.nid: seed}
    for nid in range(output.nid, -1, -1):
        if not active[nid]:
            continue
        c = cots.get(nid)
        if c is None:
            continue
        node = nodes[nid]
        if node.op == "leaf":
            continue
        ins = [ex.lift(tape, i) for i in node.inputs]
        out_h = ex.lift(tape, nid)
        contribs = _VJP_RULES[node.op](ex, tape, ins, out_h, node.aux, c)
        for inp_nid, contrib in zip(node.inputs, contribs):
            if not active[inp_nid]:
                continue
            prev = cots.get(inp_nid)
            cots[inp_nid] = contrib if prev is None else ex.add(prev, contrib)

    out = []
    for w in wrt:
        c = cots.get(w.nid)
        if c is None:
            out.append(_zero(w))
        elif create_graph:
            out.append(c)
        else:
            # broadcast views from tile rules must not leak to callers
            out.append(np.ascontiguousarray(c))
    return out


def backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list:
    """Gradients of a scalar (1 x 1) output with respect to each wrt tensor."""
    if output.shape != (1, 1):
        raise AutodiffError(f"backward: output must be scalar-shaped, got {output.shape}")
    return vjp(output, wrt, np.ones((1, 1)), create_graph=create_graph)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function (oracle)."""
    if step <= 0:
        raise AutodiffError("finite_diff_grad: step must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
        it.iternext()
    return g
