"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Define-by-run: every operation returns a Tensor holding its value, its
parents and a closure that routes the upstream gradient to them. The op
set is exactly what the descriptor pipeline needs; everything is checked
against central finite differences (see grad_check and the test suite).

Inside no_grad() the same functions run without recording, which is the
inference path.
"""

from __future__ import annotations

import base64
import hashlib
from contextlib import contextmanager

import numpy as np
from scipy.linalg.blas import dgemm

from .errors import ParameterError

_GRAD_ENABLED = True

# reusable scratch arrays for inference-mode internals (avoids page-fault
# churn on large fresh allocations); keyed by (tag, shape)
_SCRATCH: dict = {}


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _scratch(tag: str, shape: tuple) -> np.ndarray:
    """Internal workspace; reused across calls only when grads are off."""
    if _GRAD_ENABLED:
        return np.empty(shape)
    key = (tag, shape)
    arr = _SCRATCH.get(key)
    if arr is None:
        arr = _SCRATCH[key] = np.empty(shape)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None,
                 name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # ergonomic operators
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name=None) -> Tensor:
    return Tensor(x, requires_grad=False, name=name)


def _tracked(*parents) -> bool:
    return _GRAD_ENABLED and any(p.requires_grad for p in parents)


def _make(data, parents, backward) -> Tensor:
    if _tracked(*parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data),
                                       b.data.shape))

    return _make(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out, tuple(tensors), backward)


def narrow(a, axis, start, length) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            a._accumulate(full)

    return _make(a.data[sl], (a,), backward)


def take_axis1(a, idx) -> Tensor:
    """Gather columns of a (N, S, ...) tensor along axis 1 (idx is 1-D)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            for o, s in enumerate(idx):
                full[:, s] += g[:, o]
            a._accumulate(full)

    return _make(a.data[:, idx], (a,), backward)


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _make(a.data[idx], (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(np.maximum(a.data, 0.0), (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out)

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data  # ties go to the first argument

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b.data.shape))

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy()
                          if np.ndim(gg) else np.full_like(a.data, gg))

    return _make(out, (a,), backward)


def sorted_sum(a, axis) -> Tensor:
    """Sum along one axis with an order-independent reduction.

    Values are sorted before pairwise summation, so any permutation of
    the reduced axis produces a bit-identical result; the gradient is the
    ordinary broadcast (summation order does not affect it).
    """
    a = as_tensor(a)
    ax = axis % a.data.ndim
    out = np.sort(a.data, axis=ax).sum(axis=ax)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(np.expand_dims(g, ax),
                                          a.data.shape).copy())

    return _make(out, (a,), backward)


def sum_max_pool(a) -> Tensor:
    """Fused order-free sum and max over axis 1 of an (N, S, C) tensor.

    Returns (N, 2C): channelwise sorted-order summation concatenated with
    the channelwise maximum. Both reductions are invariant under any
    permutation of the pooled axis (the sum bit-exactly so).
    """
    a = as_tensor(a)
    n, s, c = a.data.shape
    xs = np.sort(a.data, axis=1)
    out = np.concatenate([xs.sum(axis=1), xs[:, -1, :]], axis=1)

    def backward(g):
        if a.requires_grad:
            gx = np.broadcast_to(g[:, None, :c], (n, s, c)).copy()
            am = np.argmax(a.data, axis=1)  # first max: deterministic routing
            np.put_along_axis(
                gx, am[:, None, :], np.take_along_axis(gx, am[:, None, :], 1)
                + g[:, None, c:], axis=1)
            a._accumulate(gx)

    return _make(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape) / count)

    return _make(out, (a,), backward)


def reduce_max(a, axis, keepdims=False) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.data.ndim
    am = np.argmax(a.data, axis=ax)  # first maximum: deterministic tie rule
    out = np.take_along_axis(a.data, np.expand_dims(am, ax), axis=ax)

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, ax)
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(am, ax), gg, axis=ax)
            a._accumulate(full)

    res = out if keepdims else out.squeeze(ax)
    return _make(res, (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate((g - dot) * y)

    return _make(y, (a,), backward)


def ring_conv(x, w) -> Tensor:
    """Circular 3x3 convolution over (layer, ring) with shared weights.

    x: (N, L, K, C_in) laid out in one group's traversal order.
    w: (3, 3, C_in, C_out); tap (dl, dj) multiplies x[l+dl-1, j+dj-1] with
    replicate padding on the layer axis and circular padding on the ring.
    """
    x, w = as_tensor(x), as_tensor(w)
    N, L, K, Ci = x.data.shape
    if K < 3:
        raise ParameterError("ring convolution needs K >= 3")
    if w.data.shape[:2] != (3, 3) or w.data.shape[2] != Ci:
        raise ParameterError(f"weights must be (3, 3, {Ci}, C_out)")
    Co = w.data.shape[3]
    # circular padding along the ring: xp[:, :, 0] = last ring position
    xp = _scratch("ring_conv.xp", (N, L, K + 2, Ci))
    xp[:, :, 1:K + 1] = x.data
    xp[:, :, 0] = x.data[:, :, K - 1]
    xp[:, :, K + 1] = x.data[:, :, 0]
    # tap-major im2col: every tap is one contiguous block, and the matching
    # tap GEMMs accumulate straight into the output (C += tap @ W[tap])
    cols = _scratch("ring_conv.cols", (9, N, L, K, Ci))
    pos = 0
    taps = []
    for a, dl in enumerate((-1, 0, 1)):
        for b in range(3):
            for l_out in range(L):
                l_in = min(max(l_out + dl, 0), L - 1)  # replicate layer pad
                cols[pos, :, l_out] = xp[:, l_in, b:b + K]
            taps.append((a, b))
            pos += 1
    out = np.empty((N, L, K, Co))
    out2 = out.reshape(-1, Co)
    for pos, (a, b) in enumerate(taps):
        tap = cols[pos].reshape(-1, Ci)
        beta = 0.0 if pos == 0 else 1.0
        dgemm(1.0, w.data[a, b].T, tap.T, beta=beta, c=out2.T, overwrite_c=1)

    def backward(g):
        g2 = g.reshape(-1, Co)
        if w.requires_grad:
            gw = np.empty((3, 3, Ci, Co))
            for pos, (a, b) in enumerate(taps):
                gw[a, b] = cols[pos].reshape(-1, Ci).T @ g2
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros((N, L, K + 2, Ci))
            for pos, (a, b) in enumerate(taps):
                gtap = (g2 @ w.data[a, b].T).reshape(N, L, K, Ci)
                dl = a - 1
                for l_out in range(L):
                    l_in = min(max(l_out + dl, 0), L - 1)
                    gxp[:, l_in, b:b + K] += gtap[:, l_out]
            gx = gxp[:, :, 1:K + 1].copy()
            gx[:, :, K - 1] += gxp[:, :, 0]
            gx[:, :, 0] += gxp[:, :, K + 1]
            x._accumulate(gx)

    return _make(out, (x, w), backward)


def neighbor_average(feats, canon_order, matrix, n_slots) -> Tensor:
    """Fixed-weight Gaussian neighbor averaging: (N, C) -> (N, S, C).

    matrix is the (N*S, N) sparse operator over points relabeled in
    canonical (lexicographic-coordinate) order; summation therefore runs
    in a point-order-independent sequence and the result is exactly
    permutation invariant. canon_order maps canonical rank -> point id.
    """
    feats = as_tensor(feats)
    n, c = feats.data.shape
    out = (matrix @ feats.data[canon_order]).reshape(n, n_slots, c)

    def backward(g):
        if feats.requires_grad:
            gc = matrix.T @ g.reshape(n * n_slots, c)
            full = np.empty_like(feats.data)
            full[canon_order] = gc
            feats._accumulate(full)

    return _make(out, (feats,), backward)


def neighbor_average_dyn(feats, weights, ids) -> Tensor:
    """Neighbor averaging with differentiable weights (scale adaptation).

    feats (N, C); weights (N, S, k) tensor; ids (N, S, k) constant indices.
    """
    from .features import neighbor_matrix

    feats, weights = as_tensor(feats), as_tensor(weights)
    n, c = feats.data.shape
    _, s, k = ids.shape
    gathered = feats.data[ids]                       # (N, S, k, C)
    out = np.einsum("nsk,nskc->nsc", weights.data, gathered)

    def backward(g):
        if weights.requires_grad:
            weights._accumulate(np.einsum("nsc,nskc->nsk", g, gathered))
        if feats.requires_grad:
            mat = neighbor_matrix(ids, weights.data, n)
            feats._accumulate(mat.T @ g.reshape(n * s, c))

    return _make(out, (feats, weights), backward)


def make_op(data, parents, backward) -> Tensor:
    """Hook for composite ops defined outside this module."""
    return _make(data, tuple(as_tensor(p) for p in parents), backward)


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints


class ParamStore:
    """Named trainable tensors with deterministic seeded initialization."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x9E37)))
        self.params: dict[str, Tensor] = {}

    def create(self, name: str, shape, fan_in: int) -> Tensor:
        """Uniform init in +-1/sqrt(fan_in); creation order is part of the seed."""
        if name in self.params:
            raise ParameterError(f"parameter {name!r} already exists")
        if " " in name or "\n" in name:
            raise ParameterError("parameter names must not contain whitespace")
        bound = 1.0 / np.sqrt(max(1, fan_in))
        data = self._rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(CHECKPOINT_MAGIC + "\n")
            for name, p in self.params.items():
                shape = ",".join(str(d) for d in p.data.shape) or "scalar"
                payload = base64.b64encode(
                    np.ascontiguousarray(p.data, dtype="<f8").tobytes()).decode()
                fh.write(f"{name} {shape} {payload}\n")

    def load(self, path) -> None:
        with open(path) as fh:
            magic = fh.readline().rstrip("\n")
            if magic != CHECKPOINT_MAGIC:
                raise ParameterError(f"not a checkpoint file: {magic!r}")
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                name, shape_s, payload = line.split(" ")
                shape = () if shape_s == "scalar" else tuple(
                    int(d) for d in shape_s.split(","))
                data = np.frombuffer(base64.b64decode(payload),
                                     dtype="<f8").reshape(shape).copy()
                if name in self.params:
                    if self.params[name].data.shape != data.shape:
                        raise ParameterError(
                            f"checkpoint shape mismatch for {name}")
                    self.params[name].data = data
                else:
                    self.params[name] = Tensor(data, requires_grad=True, name=name)


CHECKPOINT_MAGIC = "cylkern-checkpoint v1"


def checkpoint_hash(path) -> str:
    """Git-style blob id (sha1 over a blob header plus the file bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


class SGD:
    """SGD with momentum and global-norm gradient clipping.

    Clipping tames the occasional huge gradients the SVD backward emits
    near degenerate spectra; clip=None disables it. Update order is
    parameter creation order, so steps are deterministic.
    """

    def __init__(self, store: ParamStore, lr: float, momentum: float = 0.9,
                 clip: float | None = 1.0):
        self.store = store
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.clip = clip
        self._velocity = {name: np.zeros_like(p.data)
                          for name, p in store.params.items()}

    def _clip_scale(self) -> float:
        if self.clip is None:
            return 1.0
        total = 0.0
        for p in self.store.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = np.sqrt(total)
        return 1.0 if norm <= self.clip else self.clip / norm

    def step(self):
        scale = self._clip_scale()
        for name, p in self.store.params.items():
            if p.grad is None:
                continue
            v = self._velocity.setdefault(name, np.zeros_like(p.data))
            v *= self.momentum
            v -= (self.lr * scale) * p.grad
            p.data = p.data + v

    def zero_grad(self):
        self.store.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps a list of Tensors to a scalar Tensor. The relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
               for x in inputs]
    out = fn(*tensors)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gn = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*tensors).data)
            flat[i] = orig - eps
            lo = float(fn(*tensors).data)
            flat[i] = orig
            gn[i] = (hi - lo) / (2.0 * eps)
        ga_flat = ga.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ga_flat), np.abs(gn)), 1.0)
        worst = max(worst, float(np.max(np.abs(ga_flat - gn) / denom)))
    return worst
