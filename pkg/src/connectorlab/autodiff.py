"""Dense tensor math with reverse-mode differentiation.

Values are numpy arrays (float32 for training/bench runs, float64 for
gradient-check runs). Each operation records its inputs and a
vector-Jacobian rule on the output tensor; ``backward`` walks the recorded
graph in reverse topological order and accumulates gradients additively on
``requires_grad`` leaves. Tensors are treated as immutable once created,
except for their ``grad`` buffers.

Storage is row-major and ops are row-centric: no general broadcasting,
only the row-wise vector forms (``add_row``, ``mul_row``) needed by the
connectors and the toy decoder.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, GraphError, NumericError, ShapeError

_GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    """A dense array plus optional gradient buffer and graph record.

    Leaf tensors are built with :func:`tensor`; interior nodes are created
    by ops and carry ``_parents`` / ``_vjp`` / ``_forward`` records so the
    graph can be differentiated and replayed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp",
                 "_forward", "op", "_backward_done")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None,
                 forward=None, op="leaf"):
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self._forward = forward
        self.op = op
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        backward(self, seed)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    """Create a leaf tensor from array-like data."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _node(data, parents, vjp, forward, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents, vjp=vjp,
                  forward=forward, op=op)


def _check_same_dtype(*ts):
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.data.dtype}")
    return dt


def assert_finite(arr, what):
    """Raise NumericError if arr contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))
        raise NumericError(f"non-finite values in {what} at index {tuple(bad[0])}")


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    _check_same_dtype(a, b)
    out = a.data @ b.data

    def vjp(g):
        # skip the half of the product no one will consume (frozen operand)
        da = g @ b.data.T if a.requires_grad else None
        db = a.data.T @ g if b.requires_grad else None
        return da, db

    return _node(out, (a, b), vjp, lambda: a.data @ b.data, "matmul")


def transpose(x: Tensor) -> Tensor:
    out = np.ascontiguousarray(x.data.T)

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _node(out, (x,), vjp, lambda: np.ascontiguousarray(x.data.T), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _node(out, (x,), vjp, lambda: x.data.reshape(shape), "reshape")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes {a.data.shape} vs {b.data.shape}")
    _check_same_dtype(a, b)

    def vjp(g):
        return g, g

    return _node(a.data + b.data, (a, b), vjp, lambda: a.data + b.data, "add")


def add_row(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an (n, d) matrix."""
    if x.data.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_row shapes {x.data.shape} + {v.data.shape}")
    _check_same_dtype(x, v)

    def vjp(g):
        return g, g.sum(axis=0)

    return _node(x.data + v.data, (x, v), vjp, lambda: x.data + v.data, "add_row")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes {a.data.shape} vs {b.data.shape}")
    _check_same_dtype(a, b)

    def vjp(g):
        return g * b.data, g * a.data

    return _node(a.data * b.data, (a, b), vjp, lambda: a.data * b.data, "mul")


def mul_row(x: Tensor, v: Tensor) -> Tensor:
    """Scale every row of an (n, d) matrix elementwise by a length-d vector."""
    if x.data.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise ShapeError(f"mul_row shapes {x.data.shape} * {v.data.shape}")
    _check_same_dtype(x, v)

    def vjp(g):
        return g * v.data, (g * x.data).sum(axis=0)

    return _node(x.data * v.data, (x, v), vjp, lambda: x.data * v.data, "mul_row")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)

    def vjp(g):
        return (g * c,)

    return _node(x.data * c, (x,), vjp, lambda: x.data * c, "scale")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _node(out, (x,), vjp, lambda: np.maximum(x.data, 0), "relu")


def _gelu_fwd(x):
    c = x.dtype.type(_GELU_C)
    u = c * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    out = _gelu_fwd(x.data)

    def vjp(g):
        xv = x.data
        c = xv.dtype.type(_GELU_C)
        u = c * (xv + 0.044715 * xv ** 3)
        t = np.tanh(u)
        du = c * (1.0 + 3 * 0.044715 * xv ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t ** 2) * du),)

    return _node(out, (x,), vjp, lambda: _gelu_fwd(x.data), "gelu")


def layernorm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then affine per column.

    Uses population variance (denominator d). ``eps`` keeps the
    normalization defined for constant rows.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm expects a matrix, got {x.data.shape}")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layernorm affine params must have shape ({d},)")
    if d < 2 and eps == 0:
        raise NumericError("layernorm on width-1 rows with eps=0 divides by zero")
    _check_same_dtype(x, gamma, beta)
    eps = x.data.dtype.type(eps)

    def fwd():
        m = x.data.mean(axis=1, keepdims=True)
        var = x.data.var(axis=1, keepdims=True)
        xhat = (x.data - m) / np.sqrt(var + eps)
        return xhat * gamma.data + beta.data

    m = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - m) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) * inv
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(out, (x, gamma, beta), vjp, fwd, "layernorm")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, max-subtracted for stability.

    Every output row is nonnegative and sums to 1 (up to rounding) for
    arbitrary finite logits.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.data.shape}")

    def fwd():
        z = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    out = fwd()

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (x,), vjp, fwd, "softmax")


def concat_rows(parts) -> Tensor:
    """Stack matrices vertically; widths must agree."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows of nothing")
    width = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != width:
            raise ShapeError(
                f"concat_rows width mismatch: {[p.data.shape for p in parts]}")
    _check_same_dtype(*parts)
    counts = [p.data.shape[0] for p in parts]

    def vjp(g):
        out, at = [], 0
        for n in counts:
            out.append(g[at:at + n])
            at += n
        return tuple(out)

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts),
                 vjp, lambda: np.concatenate([p.data for p in parts], axis=0),
                 "concat_rows")


def take_rows(x: Tensor, ids) -> Tensor:
    """Gather rows by index (embedding lookup). Gradient scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    n = x.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"row index out of range [0, {n})")

    def vjp(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, ids, g)
        return (dx,)

    return _node(x.data[ids], (x,), vjp, lambda: x.data[ids], "take_rows")


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full_like(x.data, g),)

    return _node(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), vjp,
                 lambda: np.asarray(x.data.sum(), dtype=x.data.dtype), "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def vjp(g):
        return (np.full_like(x.data, g / n),)

    return _node(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), vjp,
                 lambda: np.asarray(x.data.mean(), dtype=x.data.dtype), "mean_all")


def renorm_rows(x: Tensor) -> Tensor:
    """Divide each row by its sum (rows must have nonzero sums)."""
    s = x.data.sum(axis=1, keepdims=True)
    if np.any(s == 0):
        raise NumericError("renorm_rows on a zero-sum row")
    out = x.data / s

    def vjp(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / s,)

    return _node(out, (x,), vjp, lambda: x.data / x.data.sum(axis=1, keepdims=True),
                 "renorm_rows")


def cross_entropy_rows(logits: Tensor, ids) -> Tensor:
    """Mean negative log-likelihood of ``ids`` under row-wise softmax(logits)."""
    ids = np.asarray(ids, dtype=np.int64)
    n, v = logits.data.shape
    if ids.shape != (n,):
        raise ShapeError(f"need one target per row: {ids.shape} vs {n} rows")
    if ids.size == 0:
        raise ShapeError("cross entropy over zero rows")
    if ids.min() < 0 or ids.max() >= v:
        raise ShapeError(f"target id out of range [0, {v})")

    def fwd():
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        return np.asarray(-logp[np.arange(n), ids].mean(), dtype=logits.data.dtype)

    out = fwd()

    def vjp(g):
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), ids] -= 1.0
        return (p * (g / n),)

    return _node(out, (logits,), vjp, fwd, "cross_entropy")


# ---------------------------------------------------------------------------
# graph traversal

def _topo(out: Tensor):
    order, seen, stack = [], set(), [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))
    return order


def backward(out: Tensor, seed=None):
    """Accumulate vector-Jacobian products onto requires_grad leaves.

    ``seed`` must match the output shape (scalar outputs default to 1).
    Running backward twice on the same output without rebuilding the graph
    raises GraphError, since grads would silently double-accumulate.
    """
    if out._backward_done:
        raise GraphError("backward already ran on this graph; rebuild the "
                         "forward pass (and zero grads) before differentiating again")
    if not out.requires_grad:
        raise GraphError("output does not depend on any requires_grad tensor")
    if seed is None:
        if out.data.ndim != 0:
            raise ShapeError("non-scalar output needs an explicit seed")
        seed = np.asarray(1.0, dtype=out.data.dtype)
    else:
        seed = np.asarray(seed, dtype=out.data.dtype)
        if seed.shape != out.data.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {out.data.shape}")
    out._backward_done = True

    grads = {id(out): seed}
    for node in reversed(_topo(out)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def replay(out: Tensor) -> bool:
    """Recompute every interior node from its parents; True if all values
    reproduce bit-for-bit."""
    order, seen, stack = [], set(), [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(node._parents)
    for node in order:
        if node._forward is not None:
            if not np.array_equal(node._forward(), node.data):
                return False
    return True


# ---------------------------------------------------------------------------
# finite-difference verification

def grad_check(f, x: Tensor, h=1e-5) -> float:
    """Compare analytic gradients of scalar-valued ``f`` at ``x`` against
    central differences; returns the max relative error over coordinates.

    Requires float64 input (finite differences need the headroom).
    """
    if not (1e-6 <= h <= 1e-3):
        raise ConfigError(f"step size {h} outside [1e-6, 1e-3]")
    if x.data.dtype != np.float64:
        raise ConfigError("grad_check requires a float64 tensor")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.ndim != 0:
        raise ConfigError("grad_check target must be scalar-valued")
    assert_finite(out.data, "grad_check forward output")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    flat = x.data.copy()
    worst = 0.0
    it = np.nditer(flat, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = flat[idx]
        flat[idx] = orig + h
        fp = f(Tensor(flat.copy())).data
        flat[idx] = orig - h
        fm = f(Tensor(flat.copy())).data
        flat[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite value in finite difference at {idx}")
        cd = (float(fp) - float(fm)) / (2 * h)
        a = float(analytic[idx])
        rel = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
        worst = max(worst, rel)
        it.iternext()
    return worst
