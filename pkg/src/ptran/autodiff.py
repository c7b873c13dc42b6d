"""Dense tensors with tape-recorded reverse-mode differentiation.

Values are numpy arrays. Every differentiable op looks for a :class:`Tape`
among its inputs and, if one is found, appends a :class:`Node` holding the
output and a vector-Jacobian closure. Inputs without a tape are constants.

Broadcasting is deliberately narrow: operands of an elementwise op must have
equal shapes, or one of them is a scalar, or the smaller shape is a suffix of
the larger one (a row vector added to a matrix, or a matrix added to a batch
of matrices).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "DimensionError",
    "NonFiniteError",
    "DegenerateRowError",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "einsum",
    "softmax_rows",
    "softmax_cross_entropy",
    "gather_rows",
    "reshape",
    "transpose",
    "index",
    "concat",
    "tsum",
    "backward",
    "finite_diff_check",
]


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
    name: str | None = None


@dataclass
class Tape:
    """Ordered record of operations. Single owner; not thread-safe."""

    nodes: list[Node] = field(default_factory=list)

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register a leaf (a parameter or an input we want gradients for)."""
        arr = np.array(value, copy=True) if not isinstance(value, Tensor) else value.data.copy()
        t = Tensor(arr, self, len(self.nodes))
        self.nodes.append(Node(t.node_id, "leaf", (), t, None, name))
        return t

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        t = Tensor(out, self, len(self.nodes))
        ids = tuple(x.node_id if x.tape is self else -1 for x in inputs)
        self.nodes.append(Node(t.node_id, op, ids, t, vjp))
        return t

    def __len__(self) -> int:
        return len(self.nodes)


class GradMap(dict):
    """node id -> gradient array; unreachable nodes read as zeros."""

    def __init__(self, tape: Tape):
        super().__init__()
        self._tape = tape

    def __missing__(self, key: int) -> np.ndarray:
        out = self._tape.nodes[key].output
        return np.zeros(out.shape, dtype=out.dtype)

    def of(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise ValueError("tensor does not belong to this tape")
        return self[t.node_id]


# --------------------------------------------------------------------------- helpers


def _find_tape(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _as_tensor(x, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like and arr.dtype.kind in "fiub":
        arr = arr.astype(like)
    return Tensor(arr)


def _common_dtype(*xs) -> np.dtype | None:
    for x in xs:
        if isinstance(x, Tensor) and x.data.dtype.kind == "f":
            return x.data.dtype
        if isinstance(x, np.ndarray) and x.dtype.kind == "f":
            return x.dtype
    return None


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced NaN or Inf")
    return arr


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    _check_finite(op, out)
    tape = _find_tape(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(op, inputs, out, vjp)


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if len(sa) == 0:
        return sb
    if len(sb) == 0:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    raise DimensionError(f"incompatible shapes {sa} and {sb} (only scalar or suffix broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    dt = _common_dtype(a, b)
    a, b = _as_tensor(a, dt), _as_tensor(b, dt)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    dt = _common_dtype(a, b)
    a, b = _as_tensor(a, dt), _as_tensor(b, dt)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    dt = _common_dtype(a, b)
    a, b = _as_tensor(a, dt), _as_tensor(b, dt)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.data, b.data
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    """Multiply by a constant Python scalar."""
    a = _as_tensor(a)
    s = float(s)
    return _emit("scale", (a,), a.data * a.data.dtype.type(s), lambda g: (g * s,))


# --------------------------------------------------------------------------- products


def matmul(a, b) -> Tensor:
    dt = _common_dtype(a, b)
    a, b = _as_tensor(a, dt), _as_tensor(b, dt)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return _emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def _parse_einsum(spec: str, n_ops: int) -> tuple[list[str], str]:
    spec = spec.replace(" ", "")
    if "->" not in spec:
        raise ValueError("einsum spec must be explicit ('...->...')")
    if "." in spec:
        raise ValueError("einsum ellipsis is not supported")
    lhs, out = spec.split("->")
    ins = lhs.split(",")
    if len(ins) != n_ops:
        raise ValueError(f"einsum spec names {len(ins)} operands, got {n_ops}")
    for s in ins + [out]:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated subscript in {s!r} is not supported")
    return ins, out


def einsum(spec: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` (explicit output, no repeated or ellipsis subscripts).

    The gradient for operand ``k`` is another einsum contracting the upstream
    gradient with the remaining operands; subscripts that only occur in operand
    ``k`` are restored by broadcasting.
    """
    dt = _common_dtype(*operands)
    ops = [_as_tensor(x, dt) for x in operands]
    ins, out = _parse_einsum(spec, len(ops))
    sizes: dict[str, int] = {}
    for s, t in zip(ins, ops):
        if len(s) != t.ndim:
            raise DimensionError(f"einsum subscripts {s!r} do not match shape {t.shape}")
        for ch, n in zip(s, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(f"einsum extent mismatch on {ch!r}: {sizes[ch]} vs {n}")
    vals = [t.data for t in ops]
    result = np.einsum(spec, *vals, optimize=True)

    def vjp(g):
        grads = []
        for k, sk in enumerate(ins):
            if ops[k].tape is None:
                grads.append(None)
                continue
            others = [(ins[j], vals[j]) for j in range(len(ins)) if j != k]
            avail = set(out).union(*[set(s) for s, _ in others]) if others else set(out)
            target = "".join(ch for ch in sk if ch in avail)
            sub_spec = ",".join([out] + [s for s, _ in others]) + "->" + target
            gk = np.einsum(sub_spec, g, *[v for _, v in others], optimize=True)
            if target != sk:
                # axes summed inside operand k alone: re-expand by broadcasting
                shape = [sizes[ch] if ch in target else 1 for ch in sk]
                perm = [target.index(ch) for ch in sk if ch in target]
                gk = np.broadcast_to(np.transpose(gk, perm).reshape(shape), ops[k].shape).copy()
            grads.append(gk)
        return grads

    return _emit("einsum", ops, np.asarray(result), vjp)


# --------------------------------------------------------------------------- normalisation and losses


def softmax_rows(x, mask=None, scale: float = 1.0, allow_empty: bool = False) -> Tensor:
    """Softmax over the last axis of ``x / scale``, ignoring masked-out entries.

    ``mask`` is boolean, True where an entry takes part. Excluded entries get an
    additive -inf before max subtraction, so their output and gradient are
    exactly zero. A row with no entry raises :class:`DegenerateRowError` unless
    ``allow_empty`` is set, in which case the row is returned as zeros.
    """
    x = _as_tensor(x)
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    z = x.data / x.data.dtype.type(scale) if scale != 1.0 else x.data
    empty = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            mask = np.broadcast_to(mask, x.shape)
        z = np.where(mask, z, -np.inf)
        empty = ~mask.any(axis=-1)
        if empty.any():
            if not allow_empty:
                raise DegenerateRowError("softmax row has no unmasked entry")
            z = np.where(empty[..., None], 0.0, z).astype(x.dtype, copy=False)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)
    if empty is not None and empty.any():
        y = np.where(empty[..., None], 0.0, y).astype(x.dtype, copy=False)
    inv = 1.0 / scale

    def vjp(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) * inv,)

    return _emit("softmax_rows", (x,), y, vjp)


def softmax_cross_entropy(logits, targets, weights=None) -> Tensor:
    """Sum over rows of ``weight * -log softmax(logits)[target]``.

    ``logits`` is (rows, classes); ``targets`` integer class ids per row;
    ``weights`` (defaults to ones) selects and scales rows. Returns a scalar.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects (rows, classes) logits")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.shape[0],):
        raise DimensionError("one target per row required")
    w = np.ones(t.shape, logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    live = w != 0
    if live.any() and (t[live].min() < 0 or t[live].max() >= logits.shape[1]):
        raise IndexError("target id out of range")
    tt = np.where(live, t, 0)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    nll = lse - z[np.arange(len(tt)), tt]
    loss = np.asarray((w * nll).sum(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(tt)), tt] -= 1.0
        return (p * (w * g)[:, None],)

    return _emit("softmax_cross_entropy", (logits,), loss, vjp)


# --------------------------------------------------------------------------- indexing and shape


def gather_rows(table, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D table")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"row id out of range [0, {v})")
    out = table.data[ids] if ids.size else np.zeros((0, table.shape[1]), table.dtype)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("gather_rows", (table,), out, vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def index(x, key) -> Tensor:
    """Basic (slice/int) indexing."""
    x = _as_tensor(x)
    out = np.array(x.data[key], copy=True)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _emit("index", (x,), out, vjp)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    dt = _common_dtype(*xs)
    ts = [_as_tensor(x, dt) for x in xs]
    ax = axis % ts[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return [np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(ts))]

    return _emit("concat", ts, np.concatenate([t.data for t in ts], axis=ax), vjp)


def tsum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (x,), out, vjp)


# --------------------------------------------------------------------------- reverse pass


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Accumulate d loss / d node for every node on ``tape``."""
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.data.size != 1 or loss.ndim > 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = GradMap(tape)
    grads[loss.node_id] = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        if node.vjp is None or node.id not in grads:
            continue
        g = dict.__getitem__(grads, node.id)
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp < 0 or gi is None:
                continue
            if inp in grads:
                dict.__setitem__(grads, inp, dict.__getitem__(grads, inp) + gi)
            else:
                dict.__setitem__(grads, inp, np.asarray(gi, dtype=tape.nodes[inp].output.dtype))
    return grads


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    n_coords: int = 50,
    seed: int = 0,
    floor: float = 1e-8,
    per_tensor: bool = False,
):
    """Compare ``backward`` against central differences.

    ``f`` maps a dict of tensors to a scalar tensor and must be deterministic.
    Up to ``n_coords`` coordinates per parameter are sampled (all of them when
    the tensor is smaller). The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    Returns the maximum, or a ``{name: max}`` dict when ``per_tensor``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    tape = Tape()
    watched = {k: tape.watch(np.asarray(v)) for k, v in params.items()}
    loss = f(watched)
    grads = backward(tape, loss)
    worst: dict[str, float] = {}
    for name, value in params.items():
        value = np.asarray(value)
        analytic = grads.of(watched[name]).reshape(-1)
        size = value.size
        coords = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        err = 0.0
        for c in coords:
            plus = {k: np.array(v, copy=True) for k, v in params.items()}
            minus = {k: np.array(v, copy=True) for k, v in params.items()}
            plus[name].reshape(-1)[c] += epsilon
            minus[name].reshape(-1)[c] -= epsilon
            fp = float(f({k: Tensor(v) for k, v in plus.items()}).data)
            fm = float(f({k: Tensor(v) for k, v in minus.items()}).data)
            numeric = (fp - fm) / (2 * epsilon)
            a = float(analytic[c])
            denom = max(abs(a), abs(numeric), floor)
            err = max(err, abs(a - numeric) / denom)
        worst[name] = err
    if per_tensor:
        return worst
    return max(worst.values()) if worst else 0.0

