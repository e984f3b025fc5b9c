"""A small reverse-mode differentiation engine over numpy arrays.

Operations executed while a :class:`Tape` is active and touching a tensor
with ``requires_grad`` are recorded in execution order, which is already a
topological order.  ``Tape.backward`` walks the record in reverse and visits
every node once.

Conventions at non-differentiable points: relu/max(., 0) has subgradient 0
at 0, and the Euclidean distance has gradient 0 where the two points coincide.
"""

from __future__ import annotations

import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = [np.float32]
CHECK_FINITE = [True]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE[0] = dtype


def default_dtype():
    return _DEFAULT_DTYPE[0]


class precision:
    """Context manager temporarily switching the default dtype."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self._old = default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._old)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{', name=' + self.name if self.name else ''})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: mul(a, -1.0)
    __getitem__ = lambda a, key: slice_(a, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Records differentiable operations; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True).reshape(inp.shape)
                else:
                    inp.grad += gi.reshape(inp.shape)
            # interior grads are no longer needed
            if node.out is not loss:
                node.out.grad = None


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _result(op: str, data, inputs: Sequence, backward: Callable) -> Tensor:
    data = np.asarray(data)
    if CHECK_FINITE[0] and data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        shapes = ", ".join(str(getattr(i, "shape", ())) for i in inputs)
        raise FloatingPointError(f"{op}: non-finite output (input shapes {shapes})")
    tape = _active_tape()
    needs = tape is not None and any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.nodes.append(_Node(op, out, tuple(inputs), backward))
    return out


def _shape_error(op, *tensors):
    shapes = " and ".join(str(t.shape) for t in tensors)
    return ValueError(f"{op}: incompatible shapes {shapes}")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------------

def _binary(op, a, b, fwd, ga, gb):
    # plain numbers adopt the tensor operand's dtype
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.data.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.data.dtype)
    try:
        out = fwd(a.data, b.data)
    except ValueError:
        raise _shape_error(op, a, b) from None
    return _result(op, out, (a, b), lambda g: (_unbroadcast(ga(g, a.data, b.data), a.shape),
                                               _unbroadcast(gb(g, a.data, b.data), b.shape)))


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    x, y = a.data, b.data
    return _result("matmul", x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


# -- shape manipulation ---------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *tensors) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def slice_(a: Tensor, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result("slice", out, (a,), back)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows ``a[idx]``; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    return slice_(a, idx)


def scatter_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` (unique) replaced by ``rows``."""
    idx = np.asarray(idx, dtype=np.int64)
    base, rows = as_tensor(base), as_tensor(rows)
    if rows.shape != (len(idx),) + base.shape[1:]:
        raise _shape_error("scatter_rows", base, rows)
    out = base.data.copy()
    out[idx] = rows.data

    def back(g):
        gb = g.copy()
        gb[idx] = 0
        return gb, g[idx]

    return _result("scatter_rows", out, (base, rows), back)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# -- reductions -----------------------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", out, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the leading axis, keeping it as a length-1 axis."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError(f"mean_rows: need a nonempty matrix, got shape {a.shape}")
    n = a.shape[0]
    return _result("mean_rows", a.data.mean(axis=0, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g / n, a.shape),))


def segment_mean(a: Tensor, segments, num_segments: int) -> Tensor:
    """Row means grouped by ``segments``; empty groups give zero rows."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(a.data.dtype)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(a.data.dtype)
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(out, seg, a.data)
    out *= inv[:, None]
    return _result("segment_mean", out, (a,), lambda g: ((g * inv[:, None])[seg],))


# -- nonlinearities -------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result("tanh", t, (a,), lambda g: (g * (1 - t * t),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def cos(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result("cos", np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    p = _softmax(a.data, axis)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result("softmax", p, (a,), back)


# -- distances and losses -------------------------------------------------------

def euclidean_distance(x: Tensor, y: Tensor) -> Tensor:
    """Row-wise Euclidean distance of two ``(B, d)`` tensors, shape ``(B,)``."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise _shape_error("euclidean_distance", x, y)
    diff = x.data - y.data
    d = np.sqrt((diff * diff).sum(axis=-1))

    def back(g):
        safe = np.where(d > 0, d, 1.0)
        unit = np.where((d > 0)[..., None], diff / safe[..., None], 0.0)
        gx = g[..., None] * unit
        return gx, -gx

    return _result("euclidean_distance", d, (x, y), back)


def triplet_margin(anchor: Tensor, positive: Tensor, negative: Tensor, alpha: float) -> Tensor:
    """Per-row ``max(d(a, p) - d(a, n) + alpha, 0)``."""
    return relu(add(sub(euclidean_distance(anchor, positive), euclidean_distance(anchor, negative)), alpha))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits, in the overflow-free form."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    if y.shape != x.shape:
        raise ValueError(f"bce_with_logits: targets {y.shape} vs logits {x.shape}")
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return _result("bce_with_logits", out, (logits,), lambda g: (g * (_sigmoid(x) - y),))


# -- recurrent cells ------------------------------------------------------------

def rnn_cell(x: Tensor, h: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """``tanh(x @ w_x + h @ w_h + b)``."""
    x, h = as_tensor(x), as_tensor(h)
    if x.shape[1] != w_x.shape[0] or h.shape[1] != w_h.shape[0] or w_x.shape[1] != w_h.shape[1]:
        raise _shape_error("rnn_cell", x, h, w_x, w_h)
    out = np.tanh(x.data @ w_x.data + h.data @ w_h.data + b.data)

    def back(g):
        gp = g * (1 - out * out)
        return gp @ w_x.data.T, gp @ w_h.data.T, x.data.T @ gp, h.data.T @ gp, gp.sum(axis=0)

    return _result("rnn_cell", out, (x, h, w_x, w_h, b), back)


def gru_cell(x: Tensor, h: Tensor, w_x: Tensor, w_h: Tensor, b_x: Tensor, b_h: Tensor) -> Tensor:
    """Standard GRU step; gate blocks in ``w_x``/``w_h`` columns are ordered (reset, update, candidate).

    r = sigmoid(x Wr + br + h Ur + cr), z = sigmoid(x Wz + bz + h Uz + cz),
    n = tanh(x Wn + bn + r * (h Un + cn)), h' = (1 - z) * n + z * h.
    """
    x, h = as_tensor(x), as_tensor(h)
    d = h.shape[1]
    if w_x.shape != (x.shape[1], 3 * d) or w_h.shape != (d, 3 * d):
        raise _shape_error("gru_cell", x, h, w_x, w_h)
    gx = x.data @ w_x.data + b_x.data
    gh = h.data @ w_h.data + b_h.data
    r = _sigmoid(gx[:, :d] + gh[:, :d])
    z = _sigmoid(gx[:, d:2 * d] + gh[:, d:2 * d])
    n = np.tanh(gx[:, 2 * d:] + r * gh[:, 2 * d:])
    out = (1 - z) * n + z * h.data

    def back(g):
        dn = g * (1 - z) * (1 - n * n)
        dz = g * (h.data - n) * z * (1 - z)
        dr = dn * gh[:, 2 * d:] * r * (1 - r)
        dgx = np.concatenate([dr, dz, dn], axis=1)
        dgh = np.concatenate([dr, dz, dn * r], axis=1)
        dx = dgx @ w_x.data.T
        dh = g * z + dgh @ w_h.data.T
        return dx, dh, x.data.T @ dgx, h.data.T @ dgh, dgx.sum(axis=0), dgh.sum(axis=0)

    return _result("gru_cell", out, (x, h, w_x, w_h, b_x, b_h), back)


# -- attention ------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, np.ndarray]:
    """Single-query attention per row.

    ``q`` is ``(B, d)``, ``k`` is ``(B, L, d)``, ``v`` is ``(B, L, e)`` and
    ``mask`` a boolean ``(B, L)`` of valid slots.  Rows without any valid slot
    produce a zero output.  Returns the output and the attention weights.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    B, L, d = k.shape
    if q.shape != (B, d) or v.shape[:2] != (B, L):
        raise _shape_error("scaled_dot_attention", q, k, v)
    mask = np.ones((B, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    scale = 1.0 / np.sqrt(d)
    s = np.einsum("bd,bld->bl", q.data, k.data) * scale
    s = np.where(mask, s, -np.inf)
    any_valid = mask.any(axis=1)
    s[~any_valid] = 0.0
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w = np.where(mask, w, 0.0)
    w = w / np.where(any_valid, w.sum(axis=1), 1.0)[:, None]
    out = np.einsum("bl,ble->be", w, v.data)

    def back(g):
        gw = np.einsum("be,ble->bl", g, v.data)
        gs = w * (gw - (gw * w).sum(axis=1, keepdims=True)) * scale
        gq = np.einsum("bl,bld->bd", gs, k.data)
        gk = gs[:, :, None] * q.data[:, None, :]
        gv = w[:, :, None] * g[:, None, :]
        return gq, gk, gv

    return _result("scaled_dot_attention", out, (q, k, v), back), w


def mix(weights: Tensor, values: Tensor) -> Tensor:
    """Weighted sum over the middle axis: ``(B, L) x (B, L, e) -> (B, e)``."""
    weights, values = as_tensor(weights), as_tensor(values)
    if values.ndim != 3 or weights.shape != values.shape[:2]:
        raise _shape_error("mix", weights, values)
    w, v = weights.data, values.data
    return _result("mix", np.einsum("bl,ble->be", w, v), (weights, values),
                   lambda g: (np.einsum("be,ble->bl", g, v), w[:, :, None] * g[:, None, :]))


# -- finite-difference gradient check -------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-5, floor: float = 1e-4, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    Relative error per entry is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``max_entries`` subsamples entries per parameter (uniformly, via ``rng``).
    """
    if not isinstance(params, dict):
        params = {f"p{k}": p for k, p in enumerate(params)}
    for p in params.values():
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss")
    tape.backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    worst_rel, worst_abs, worst, n = 0.0, 0.0, (None, None), 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            fp = f().item()
            flat[j] = orig - eps
            fm = f().item()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite value perturbing {name}[{j}]")
            num = (fp - fm) / (2 * eps)
            ana = analytic[name].reshape(-1)[j]
            err = abs(ana - num)
            rel = err / max(abs(ana), abs(num), floor)
            n += 1
            worst_abs = max(worst_abs, err)
            if rel > worst_rel:
                worst_rel, worst = rel, (name, int(j))
    return GradCheckReport(worst_rel, worst_abs, worst, n, tol)


# -- parameter checkpoints ------------------------------------------------------

PARAM_MAGIC = b"CPAR"
PARAM_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_params(params: dict[str, Tensor | np.ndarray], path) -> None:
    """Named-tensor file: header, directory (name, shape, dtype, offset), packed payload."""
    arrays = {k: np.ascontiguousarray(v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    arrays = {k: a.astype(a.dtype.newbyteorder("<")) for k, a in arrays.items()}
    directory, offset = [], 0
    for name, a in arrays.items():
        directory.append({"name": name, "shape": list(a.shape), "dtype": _DTYPE_CODES[a.dtype], "offset": offset})
        offset += a.nbytes
    blob = json.dumps(directory).encode()
    with Path(path).open("wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<II", PARAM_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(a.tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != PARAM_MAGIC:
        raise ValueError(f"{path}: bad parameter magic {raw[:4]!r}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != PARAM_VERSION:
        raise ValueError(f"{path}: unsupported parameter version {version}")
    directory = json.loads(raw[12:12 + n])
    base = 12 + n
    out = {}
    for entry in directory:
        dt = _CODE_DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        a = np.frombuffer(raw, dtype=dt, count=count, offset=base + entry["offset"])
        out[entry["name"]] = a.reshape(entry["shape"]).copy()
    return out
