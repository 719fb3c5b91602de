"""Reverse-mode automatic differentiation on dense float64 arrays.

Tensors are plain numpy arrays of rank 0, 1 or 2. A :class:`Tape` records
operations in the order they are executed (define-by-run), caching every
primal value, and a single reverse sweep accumulates gradients with respect
to the leaf tensors. The op registry is closed: only the kinds listed in
``_FORWARD`` are accepted.

A tape is single-threaded; distinct tapes are independent and may be used
concurrently. Arrays handed to the tape are treated as immutable.
"""

from __future__ import annotations

import numpy as np

__all__ = ["ShapeError", "Tape", "OP_KINDS"]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op kind."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise ShapeError(f"rank {a.ndim} tensor not supported (max rank 2)")
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape`` by summing."""
    if grad.shape == shape:
        return grad
    # sum over prepended axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # sum over axes that were expanded from size 1
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _bn_train_forward(x, gamma, beta, eps):
    J = x.shape[0]
    mu = x.mean(axis=0)
    var = np.einsum("jk,jk->k", x, x) / J - mu * mu  # biased, divisor J
    np.maximum(var, 0.0, out=var)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, mu, var, inv, xhat


class Tape:
    """Dynamic computation tape.

    Nodes are integer ids. Inputs of a node always reference earlier nodes,
    so the insertion order is a topological order and one reverse pass
    visits every node exactly once.
    """

    __slots__ = ("kinds", "inputs", "primals", "attrs", "needs_grad", "_leaves")

    def __init__(self):
        self.kinds: list[str] = []
        self.inputs: list[tuple] = []
        self.primals: list[np.ndarray] = []
        self.attrs: list[dict | None] = []
        self.needs_grad: list[bool] = []
        self._leaves: list[int] = []

    def __len__(self):
        return len(self.kinds)

    def _append(self, kind, inputs, primal, attrs, needs_grad) -> int:
        self.kinds.append(kind)
        self.inputs.append(inputs)
        self.primals.append(primal)
        self.attrs.append(attrs)
        self.needs_grad.append(needs_grad)
        return len(self.kinds) - 1

    def leaf(self, value) -> int:
        """Register a trainable leaf tensor."""
        return self._append("leaf", (), _as_array(value), None, True)
        # gradients accumulate only into leaves

    def constant(self, value) -> int:
        """Register a non-trainable input tensor."""
        return self._append("const", (), _as_array(value), None, False)

    def value(self, node: int) -> np.ndarray:
        return self.primals[node]

    # -- recording ---------------------------------------------------------

    def record(self, kind: str, inputs, **attrs) -> int:
        """Execute ``kind`` on ``inputs`` (node ids), cache and return the node.

        Raises :class:`ShapeError` naming the op and the offending shapes
        when operands are incompatible, and ``KeyError`` for unknown kinds.
        """
        fwd = _FORWARD[kind]
        inputs = tuple(inputs)
        vals = [self.primals[i] for i in inputs]
        primal, extra = fwd(vals, attrs)
        if extra:
            attrs.update(extra)
        ng = any(self.needs_grad[i] for i in inputs)
        return self._append(kind, inputs, primal, attrs or None, ng)

    # -- reverse sweep -----------------------------------------------------

    def backward(self, root: int, seed: float = 1.0) -> dict[int, np.ndarray]:
        """Gradient of the scalar node ``root`` with respect to every leaf.

        Leaves the root does not depend on get zero gradients. ``seed``
        scales the initial adjoint (gradients are linear in it).
        """
        if self.primals[root].size != 1:
            raise ShapeError(
                f"backward root must be scalar-shaped, got {self.primals[root].shape}"
            )
        adj: list[np.ndarray | None] = [None] * len(self.kinds)
        adj[root] = np.full_like(self.primals[root], float(seed))
        for nid in range(root, -1, -1):
            g = adj[nid]
            if g is None or not self.needs_grad[nid]:
                continue
            kind = self.kinds[nid]
            if kind in ("leaf", "const"):
                continue
            if kind == "slice":
                # scatter-add in place; a fresh full-length zero vector per
                # slice node would dominate memory for large leaves
                tgt = self.inputs[nid][0]
                if self.needs_grad[tgt]:
                    cur = adj[tgt]
                    if cur is None:
                        cur = np.zeros_like(self.primals[tgt])
                        adj[tgt] = cur
                    elif not cur.flags.writeable:
                        cur = cur.copy()
                        adj[tgt] = cur
                    a = self.attrs[nid]
                    cur[a["start"]:a["stop"]] += g.reshape(-1)
                continue
            contribs = _BACKWARD[kind](self, nid, g)
            for inp, contrib in zip(self.inputs[nid], contribs):
                if contrib is None or not self.needs_grad[inp]:
                    continue
                if adj[inp] is None:
                    adj[inp] = contrib
                else:
                    adj[inp] = adj[inp] + contrib
        grads = {}
        for leaf in range(len(self.kinds)):
            if self.kinds[leaf] == "leaf":
                g = adj[leaf]
                grads[leaf] = np.zeros_like(self.primals[leaf]) if g is None else g
        return grads


# ---------------------------------------------------------------------------
# Op registry: forward(vals, attrs) -> (primal, extra_attrs)
#              backward(tape, node, grad) -> per-input gradient contributions
# ---------------------------------------------------------------------------


def _need(cond, kind, vals):
    if not cond:
        raise ShapeError(f"{kind}: incompatible shapes {[v.shape for v in vals]}")


def _fwd_add(v, a):
    try:
        return v[0] + v[1], None
    except ValueError:
        _need(False, "add", v)


def _fwd_sub(v, a):
    try:
        return v[0] - v[1], None
    except ValueError:
        _need(False, "sub", v)


def _fwd_mul(v, a):
    try:
        return v[0] * v[1], None
    except ValueError:
        _need(False, "mul", v)


def _fwd_scalar_mul(v, a):
    return v[0] * a["c"], None


def _fwd_matmul(v, a):
    x, y = v
    _need(x.ndim == 2 and y.ndim == 2, "matmul", v)
    if a.get("transpose_a"):
        x = x.T
    if a.get("transpose_b"):
        y = y.T
    _need(x.shape[1] == y.shape[0], "matmul", v)
    return x @ y, None


def _fwd_matvec(v, a):
    m, x = v
    _need(m.ndim == 2 and x.ndim == 1 and m.shape[1] == x.shape[0], "mat-vec", v)
    return m @ x, None


def _fwd_inner(v, a):
    x, y = v
    _need(x.shape == y.shape and x.ndim == 1, "inner-product", v)
    return np.asarray(x @ y), None


def _fwd_trace(v, a):
    m = v[0]
    _need(m.ndim == 2 and m.shape[0] == m.shape[1], "trace", v)
    return np.asarray(np.trace(m)), None


def _fwd_slice(v, a):
    flat = v[0]
    _need(flat.ndim == 1, "slice", v)
    start, stop, shape = a["start"], a["stop"], a["shape"]
    if stop > flat.shape[0]:
        raise ShapeError(f"slice: [{start}:{stop}] exceeds leaf length {flat.shape[0]}")
    return flat[start:stop].reshape(shape), None


def _fwd_gather_cols(v, a):
    x = v[0]
    _need(x.ndim == 2, "gather-cols", v)
    return x[:, a["idx"]], None


def _fwd_row_sum(v, a):
    x = v[0]
    _need(x.ndim == 2, "row-sum", v)
    return x.sum(axis=1, keepdims=True), None


def _fwd_rowwise_matvec(v, a):
    g, w = v
    d = a["d"]
    _need(
        g.ndim == 2 and w.ndim == 2 and g.shape[0] == w.shape[0]
        and g.shape[1] == d * d and w.shape[1] == d,
        "rowwise-matvec", v,
    )
    return np.einsum("jik,jk->ji", g.reshape(-1, d, d), w), None


def _fwd_batchnorm(v, a):
    x, gamma, beta = v
    _need(x.ndim == 2 and gamma.shape == (x.shape[1],) == beta.shape, "batchnorm", v)
    eps = a["eps"]
    if a.get("mode", "train") == "train":
        if x.shape[0] < 2:
            raise ShapeError(f"batchnorm: train mode needs batch size >= 2, got {x.shape[0]}")
        out, mu, var, inv, xhat = _bn_train_forward(x, gamma, beta, eps)
        return out, {"mu": mu, "var": var, "_inv": inv, "_xhat": xhat}
    inv = 1.0 / np.sqrt(a["running_var"] + eps)
    xhat = (x - a["running_mean"]) * inv
    return xhat * gamma + beta, {"_inv": inv, "_xhat": xhat}


_FORWARD = {
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "scalar-mul": _fwd_scalar_mul,
    "matmul": _fwd_matmul,
    "mat-vec": _fwd_matvec,
    "inner-product": _fwd_inner,
    "trace": _fwd_trace,
    "relu": lambda v, a: (np.maximum(v[0], 0.0), None),
    "square": lambda v, a: (v[0] * v[0], None),
    "cube": lambda v, a: (v[0] ** 3, None),
    "exp": lambda v, a: (np.exp(v[0]), None),
    "ln": lambda v, a: (np.log(v[0]), None),
    "reciprocal": lambda v, a: (1.0 / v[0], None),
    "sum": lambda v, a: (np.asarray(v[0].sum()), None),
    "mean": lambda v, a: (np.asarray(v[0].mean()), None),
    "squared-norm": lambda v, a: (np.asarray((v[0] * v[0]).sum()), None),
    "slice": _fwd_slice,
    "gather-cols": _fwd_gather_cols,
    "row-sum": _fwd_row_sum,
    "rowwise-matvec": _fwd_rowwise_matvec,
    "batchnorm": _fwd_batchnorm,
}

OP_KINDS = frozenset(_FORWARD)


def _in(t, n, k):
    return t.primals[t.inputs[n][k]]


def _bwd_add(t, n, g):
    a, b = (t.primals[i] for i in t.inputs[n])
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bwd_sub(t, n, g):
    a, b = (t.primals[i] for i in t.inputs[n])
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bwd_mul(t, n, g):
    a, b = (t.primals[i] for i in t.inputs[n])
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bwd_matmul(t, n, g):
    a = t.attrs[n] or {}
    ta, tb = a.get("transpose_a", False), a.get("transpose_b", False)
    x, y = (t.primals[i] for i in t.inputs[n])
    # out = op(x) @ op(y); chain rule per transpose flag combination
    if not ta and not tb:
        return g @ y.T, x.T @ g
    if not ta and tb:
        return g @ y, g.T @ x
    if ta and not tb:
        return y @ g.T, x @ g
    return (y @ g.T).T, (g.T @ x).T


def _bwd_matvec(t, n, g):
    m, x = (t.primals[i] for i in t.inputs[n])
    return np.outer(g, x), m.T @ g


def _bwd_inner(t, n, g):
    x, y = (t.primals[i] for i in t.inputs[n])
    return g * y, g * x


def _bwd_trace(t, n, g):
    m = _in(t, n, 0)
    return (float(g) * np.eye(m.shape[0]),)


def _bwd_relu(t, n, g):
    # derivative at exactly 0 is taken as 0
    return (g * (_in(t, n, 0) > 0.0),)


def _bwd_gather_cols(t, n, g):
    x = _in(t, n, 0)
    idx = t.attrs[n]["idx"]
    out = np.zeros_like(x)
    if len(np.unique(idx)) == len(idx):
        out[:, idx] = g  # fast path, no duplicate columns
    else:
        np.add.at(out, (slice(None), idx), g)
    return (out,)


def _bwd_rowwise_matvec(t, n, g):
    G, w = (t.primals[i] for i in t.inputs[n])
    d = t.attrs[n]["d"]
    dG = np.einsum("ji,jk->jik", g, w).reshape(G.shape)
    dW = np.einsum("jik,ji->jk", G.reshape(-1, d, d), g)
    return dG, dW


def _bwd_batchnorm(t, n, g):
    a = t.attrs[n]
    inv, xhat = a["_inv"], a["_xhat"]
    gamma = _in(t, n, 1)
    dgamma = np.einsum("jk,jk->k", g, xhat)
    dbeta = g.sum(axis=0)
    if a.get("mode", "train") == "train":
        J = xhat.shape[0]
        dx = g - dbeta / J - xhat * (dgamma / J)
        dx *= gamma * inv
    else:
        dx = g * (gamma * inv)
    return dx, dgamma, dbeta


def _ones_like_scaled(x, g):
    return np.full_like(x, float(g))


_BACKWARD = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "scalar-mul": lambda t, n, g: (g * t.attrs[n]["c"],),
    "matmul": _bwd_matmul,
    "mat-vec": _bwd_matvec,
    "inner-product": _bwd_inner,
    "trace": _bwd_trace,
    "relu": _bwd_relu,
    "square": lambda t, n, g: (2.0 * _in(t, n, 0) * g,),
    "cube": lambda t, n, g: (3.0 * _in(t, n, 0) ** 2 * g,),
    "exp": lambda t, n, g: (t.primals[n] * g,),
    "ln": lambda t, n, g: (g / _in(t, n, 0),),
    "reciprocal": lambda t, n, g: (-g * t.primals[n] ** 2,),
    "sum": lambda t, n, g: (_ones_like_scaled(_in(t, n, 0), g),),
    "mean": lambda t, n, g: (_ones_like_scaled(_in(t, n, 0), g / _in(t, n, 0).size),),
    "squared-norm": lambda t, n, g: (2.0 * float(g) * _in(t, n, 0),),
    "gather-cols": _bwd_gather_cols,
    "row-sum": lambda t, n, g: (np.broadcast_to(g, _in(t, n, 0).shape),),
    "rowwise-matvec": _bwd_rowwise_matvec,
    "batchnorm": _bwd_batchnorm,
}
