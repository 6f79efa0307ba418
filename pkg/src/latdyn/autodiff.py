"""Reverse-mode automatic differentiation on float64 numpy arrays.

This is the differentiable-computation core the rest of the package builds
on: a define-by-run graph of `Node` objects, the operations needed by the
recurrent sequence model (affine maps, gate nonlinearities, Gaussian
log-densities, categorical log-softmax, concat/split, stop-gradient), a
named parameter store with deterministic iteration order, the Adam
optimizer, flat binary parameter serialization, and a finite-difference
gradient checker.

Values are numpy arrays of dtype float64 throughout. Vectors are 1-D
arrays; most operations also accept a leading batch dimension (2-D arrays,
one independent row per batch element), which is how candidate rollouts,
importance samples and padded training batches are vectorized. A fresh
graph is built per training step; `backward` accumulates gradients into
`Node.grad`, and `adam_step` consumes and clears them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Node",
    "no_grad",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "square",
    "minimum",
    "clamp",
    "detach",
    "concat",
    "split",
    "matmul",
    "affine",
    "total_sum",
    "sum_last",
    "pick",
    "log_softmax",
    "gaussian_logpdf",
    "elementwise",
    "backward",
    "ParamStore",
    "AdamState",
    "adam_step",
    "save_params",
    "load_params",
    "dumps_params",
    "loads_params",
    "GradCheckReport",
    "grad_check",
]

LOG_2PI = float(np.log(2.0 * np.pi))

# Global define-by-run switch. When False, operations still compute values
# but register nothing on the graph (used for rollouts and evaluation).
_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction inside its body."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Node:
    """One vertex of the computation graph.

    value: np.ndarray (float64), any shape. grad: same-shape ndarray,
    allocated lazily (None means zeros). Parent links and the backward
    closure exist only on nodes produced while gradients are enabled and
    at least one input requires them.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "_backward")

    def __init__(self, value, parents=(), requires_grad=False, backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() on non-scalar node of shape {self.value.shape}")
        return float(self.value.reshape(()))

    def backward(self):
        backward(self)

    # Operator sugar; the right operand may be a Node or a python scalar.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(x) -> Node:
    """Wrap an array-like as a leaf node that never receives gradients."""
    return Node(np.asarray(x, dtype=np.float64))


def _wrap(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def _accum(node: Node, g):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def _unary(x: Node, out_val, grad_fn):
    """Build a node for out_val with d(out)/d(x) applied through grad_fn."""
    if not (_GRAD_ENABLED and x.requires_grad):
        return Node(out_val)

    def bw(g):
        _accum(x, grad_fn(g))

    return Node(out_val, (x,), True, bw)


# ---------------------------------------------------------------------------
# elementwise and arithmetic operations


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out_val = a.value + b.value
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return Node(out_val)

    def bw(g):
        if a.requires_grad:
            _accum(a, g if a.value.shape == g.shape else _reduce_to(g, a.value.shape))
        if b.requires_grad:
            _accum(b, g if b.value.shape == g.shape else _reduce_to(g, b.value.shape))

    return Node(out_val, (a, b), True, bw)


def _reduce_to(g, shape):
    # Only scalar-vs-array mixes occur in practice; sum the extra axes away.
    if shape == ():
        return g.sum()
    extra = g.ndim - len(shape)
    out = g.sum(axis=tuple(range(extra))) if extra > 0 else g
    return out


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out_val = a.value - b.value
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return Node(out_val)

    def bw(g):
        if a.requires_grad:
            _accum(a, g if a.value.shape == g.shape else _reduce_to(g, a.value.shape))
        if b.requires_grad:
            _accum(b, -g if b.value.shape == g.shape else -_reduce_to(g, b.value.shape))

    return Node(out_val, (a, b), True, bw)


def mul(a, b) -> Node:
    """Elementwise product of same-shape arrays, or node times scalar."""
    a, b = _wrap(a), _wrap(b)
    out_val = a.value * b.value
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return Node(out_val)

    def bw(g):
        if a.requires_grad:
            ga = g * b.value
            _accum(a, ga if a.value.shape == ga.shape else _reduce_to(ga, a.value.shape))
        if b.requires_grad:
            gb = g * a.value
            _accum(b, gb if b.value.shape == gb.shape else _reduce_to(gb, b.value.shape))

    return Node(out_val, (a, b), True, bw)


def neg(x) -> Node:
    x = _wrap(x)
    return _unary(x, -x.value, lambda g: -g)


def tanh(x) -> Node:
    x = _wrap(x)
    t = np.tanh(x.value)
    return _unary(x, t, lambda g: g * (1.0 - t * t))


def sigmoid(x) -> Node:
    x = _wrap(x)
    v = x.value
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _unary(x, s, lambda g: g * s * (1.0 - s))


def exp(x) -> Node:
    x = _wrap(x)
    e = np.exp(x.value)
    return _unary(x, e, lambda g: g * e)


def log(x) -> Node:
    x = _wrap(x)
    if np.any(x.value <= 0.0):
        raise ValueError("log requires strictly positive input")
    return _unary(x, np.log(x.value), lambda g: g / x.value)


def square(x) -> Node:
    x = _wrap(x)
    return _unary(x, x.value * x.value, lambda g: g * 2.0 * x.value)


def minimum(a, b) -> Node:
    """Elementwise min; the gradient follows the smaller branch (ties go
    to the first argument)."""
    a, b = _wrap(a), _wrap(b)
    out_val = np.minimum(a.value, b.value)
    if not (_GRAD_ENABLED and (a.requires_grad or b.requires_grad)):
        return Node(out_val)
    take_a = a.value <= b.value

    def bw(g):
        if a.requires_grad:
            _accum(a, g * take_a)
        if b.requires_grad:
            _accum(b, g * ~take_a)

    return Node(out_val, (a, b), True, bw)


def clamp(x, lo: float, hi: float) -> Node:
    """Clip values to [lo, hi]; gradient passes only where x lies inside."""
    x = _wrap(x)
    out_val = np.clip(x.value, lo, hi)
    mask = (x.value >= lo) & (x.value <= hi)
    return _unary(x, out_val, lambda g: g * mask)


def detach(x) -> Node:
    """Stop-gradient: the value flows forward, no gradient flows back."""
    x = _wrap(x)
    return Node(x.value)


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log, "square": square,
                "add": add, "mul": mul, "sub": sub}


def elementwise(op: str, *inputs) -> Node:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# structural operations


def concat(nodes, axis: int = -1) -> Node:
    """Concatenate along the last (feature) axis."""
    if axis != -1:
        raise ValueError("concat supports the last axis only")
    nodes = [_wrap(n) for n in nodes]
    out_val = np.concatenate([n.value for n in nodes], axis=-1)
    if not (_GRAD_ENABLED and any(n.requires_grad for n in nodes)):
        return Node(out_val)
    sizes = [n.value.shape[-1] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if n.requires_grad:
                _accum(n, g[..., lo:hi])

    return Node(out_val, tuple(nodes), True, bw)


def split(x, sizes) -> list:
    """Split along the last axis into pieces of the given sizes."""
    x = _wrap(x)
    if sum(sizes) != x.value.shape[-1]:
        raise ValueError(f"split sizes {sizes} do not cover last dim {x.value.shape[-1]}")
    bounds = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        piece = x.value[..., lo:hi]
        if _GRAD_ENABLED and x.requires_grad:
            def bw(g, lo=lo, hi=hi):
                if x.grad is None:
                    x.grad = np.zeros_like(x.value)
                x.grad[..., lo:hi] += g

            outs.append(Node(piece, (x,), True, bw))
        else:
            outs.append(Node(piece))
    return outs


def matmul(x, w) -> Node:
    """x @ w for x of shape (n,) or (B, n) and w of shape (n, m)."""
    x, w = _wrap(x), _wrap(w)
    if x.value.shape[-1] != w.value.shape[0]:
        raise ValueError(f"matmul inner dims differ: {x.value.shape} vs {w.value.shape}")
    out_val = x.value @ w.value
    if not (_GRAD_ENABLED and (x.requires_grad or w.requires_grad)):
        return Node(out_val)

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ w.value.T)
        if w.requires_grad:
            if x.value.ndim == 1:
                _accum(w, np.outer(x.value, g))
            else:
                _accum(w, x.value.T @ g)

    return Node(out_val, (x, w), True, bw)


def affine(x, w, b) -> Node:
    """x @ w + b, the only place a bias vector broadcasts over batch rows."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.value.shape[-1] != w.value.shape[0]:
        raise ValueError(f"affine inner dims differ: input {x.value.shape} vs weight {w.value.shape}")
    if w.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"affine bias dim {b.value.shape} does not match weight {w.value.shape}")
    out_val = x.value @ w.value + b.value
    if not (_GRAD_ENABLED and (x.requires_grad or w.requires_grad or b.requires_grad)):
        return Node(out_val)

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ w.value.T)
        if w.requires_grad:
            if x.value.ndim == 1:
                _accum(w, np.outer(x.value, g))
            else:
                _accum(w, x.value.T @ g)
        if b.requires_grad:
            _accum(b, g if g.ndim == 1 else g.sum(axis=0))

    return Node(out_val, (x, w, b), True, bw)


def total_sum(x) -> Node:
    """Sum of all elements, as a scalar node."""
    x = _wrap(x)
    return _unary(x, np.asarray(x.value.sum()), lambda g: np.broadcast_to(g, x.value.shape))


def sum_last(x) -> Node:
    """Sum over the last axis: (B, n) -> (B,), (n,) -> scalar."""
    x = _wrap(x)
    return _unary(x, x.value.sum(axis=-1), lambda g: np.broadcast_to(np.expand_dims(g, -1), x.value.shape))


def pick(x, index) -> Node:
    """Select one entry per row: x (B, n) with index (B,) -> (B,); 1-D x with int -> scalar."""
    x = _wrap(x)
    if x.value.ndim == 1:
        i = int(index)
        out_val = np.asarray(x.value[i])

        def grad_fn(g):
            full = np.zeros_like(x.value)
            full[i] = g
            return full

        return _unary(x, out_val, grad_fn)
    idx = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.value.shape[0])
    out_val = x.value[rows, idx]

    def grad_fn(g):
        full = np.zeros_like(x.value)
        full[rows, idx] = g
        return full

    return _unary(x, out_val, grad_fn)


def log_softmax(x) -> Node:
    """Log-softmax over the last axis, stabilized by max subtraction."""
    x = _wrap(x)
    m = x.value.max(axis=-1, keepdims=True)
    shifted = x.value - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_val = shifted - lse
    p = np.exp(out_val)
    return _unary(x, out_val, lambda g: g - p * g.sum(axis=-1, keepdims=True))


def gaussian_logpdf(x, mean, log_std) -> Node:
    """Diagonal-Gaussian log-density summed over the last axis.

    Returns a scalar for 1-D inputs, a (B,) vector for batched 2-D inputs.
    Differentiable with respect to x, mean and log_std.
    """
    x, mean, log_std = _wrap(x), _wrap(mean), _wrap(log_std)
    if not (x.value.shape == mean.value.shape == log_std.value.shape):
        raise ValueError(
            f"gaussian_logpdf shape mismatch: x {x.value.shape}, mean {mean.value.shape}, "
            f"log_std {log_std.value.shape}"
        )
    inv_std = np.exp(-log_std.value)
    d = (x.value - mean.value) * inv_std
    k = x.value.shape[-1]
    out_val = (-0.5 * d * d - log_std.value).sum(axis=-1) - 0.5 * k * LOG_2PI
    if not (_GRAD_ENABLED and (x.requires_grad or mean.requires_grad or log_std.requires_grad)):
        return Node(out_val)

    def bw(g):
        ge = np.expand_dims(g, -1)
        if x.requires_grad:
            _accum(x, ge * (-d * inv_std))
        if mean.requires_grad:
            _accum(mean, ge * (d * inv_std))
        if log_std.requires_grad:
            _accum(log_std, ge * (d * d - 1.0))

    return Node(out_val, (x, mean, log_std), True, bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Node) -> None:
    """Populate grads of every reachable node that requires them.

    Contributions from shared nodes accumulate (sum rule). The loss must be
    a scalar; its own gradient is seeded with 1.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameters, optimizer, serialization


class ParamStore:
    """Named map of trainable parameter nodes with lexicographic iteration.

    Deterministic ordering makes optimizer sweeps and the serialized file
    layout reproducible run to run.
    """

    def __init__(self):
        self._params: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = Node(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in sorted(self._params):
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.grad = None

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def checksum(self) -> bytes:
        """Digest of all parameter bytes, for detecting unintended updates."""
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        for name, node in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(node.value).tobytes())
        return h.digest()


@dataclass
class AdamState:
    """Adam moments and step count; one (m, v) pair per parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update in deterministic parameter order.

    Unset grads count as zeros. Grads are cleared after the update.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, node in params.items():
        g = node.grad if node.grad is not None else np.zeros_like(node.value)
        if name not in state.m:
            state.m[name] = np.zeros_like(node.value)
            state.v[name] = np.zeros_like(node.value)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        node.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        node.grad = None


_MAGIC = b"LHZ1"


def dumps_params(params: ParamStore) -> bytes:
    """Serialize to the flat binary layout.

    Layout: magic 'LHZ1', entry count, then per entry: name length, name
    bytes, shape rank, shape dims (all little-endian uint32), followed by
    the row-major float64 values. Round-trips bit-exactly.
    """
    chunks = [_MAGIC, struct.pack("<I", len(params))]
    for name, node in params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        shape = node.value.shape
        chunks.append(struct.pack("<I", len(shape)))
        for d in shape:
            chunks.append(struct.pack("<I", d))
        chunks.append(np.ascontiguousarray(node.value, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_params(params: ParamStore, path) -> None:
    with open(path, "wb") as f:
        f.write(dumps_params(params))


def load_params(path) -> ParamStore:
    with open(path, "rb") as f:
        data = f.read()
    return loads_params(data)


def loads_params(data: bytes) -> ParamStore:
    if data[:4] != _MAGIC:
        raise ValueError(f"bad parameter file magic {data[:4]!r}")
    off = 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        store.add(name, values.reshape(shape))
    return store


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between analytic and FD gradients."""

    per_param: dict
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self) -> str:
        return max(self.per_param, key=self.per_param.get)


def grad_check(f, params: ParamStore, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of the scalar loss f() against central
    finite differences over every parameter entry.

    f must rebuild its graph from the current parameter values and be
    deterministic (fix any sampling noise before calling). Errors are
    |analytic - fd| / max(1, |analytic|, |fd|), so tiny gradients are
    judged on an absolute scale.
    """
    params.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: (node.grad.copy() if node.grad is not None else np.zeros_like(node.value))
                for name, node in params.items()}
    params.zero_grad()

    report = {}
    worst = 0.0
    for name, node in params.items():
        flat = node.value.reshape(-1)
        a = analytic[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            denom = max(1.0, abs(a[i]), abs(fd))
            err = max(err, abs(a[i] - fd) / denom)
        report[name] = err
        worst = max(worst, err)
    return GradCheckReport(per_param=report, max_rel_error=worst, tol=tol)
