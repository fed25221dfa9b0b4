"""Dense tensors with reverse-mode automatic differentiation.

Small numpy-backed autograd engine covering exactly the ops the rest of the
package needs: matmul, softmax, layer norm, embedding lookup, elementwise
arithmetic, reductions, reshapes/gathers and cross-entropy.  Training runs at
float32; gradient checks are done at float64 (see ``grad_check``).
"""

from __future__ import annotations

import weakref

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


# ---------------------------------------------------------------------------
# autograd mode + allocation tracking
# ---------------------------------------------------------------------------

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class AllocTracker:
    """High-water mark of live array bytes passing through the engine.

    Counts only arrays that own their memory (views are skipped); bytes are
    released when the array is garbage collected.  Used by the bench module.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def free(self, nbytes: int) -> None:
        self.live -= nbytes


_tracker: AllocTracker | None = None


def set_alloc_tracker(tracker: AllocTracker | None) -> None:
    global _tracker
    _tracker = tracker


def _track(arr: np.ndarray) -> None:
    if _tracker is not None and isinstance(arr, np.ndarray) and arr.base is None:
        _tracker.alloc(arr.nbytes)
        weakref.finalize(arr, _tracker.free, arr.nbytes)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense array plus (optionally) a node in the backward graph.

    ``data`` is always a numpy float array; ``grad`` has the same shape once
    ``backward()`` has run.  Tensors are immutable after construction within
    one training step; parameter updates mutate ``data`` between steps only.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None):
        if isinstance(data, (np.ndarray, np.generic)):
            data = np.asarray(data)
            if not np.issubdtype(data.dtype, np.floating):
                data = data.astype(np.float32)
        else:
            # plain python scalars/lists default to the training precision
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn
        _track(data)

    # -- structural -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backward ---------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, pow_(other, -1.0))

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in ts)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g
    _track(t.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        out_data = a.data * b
        if not _needs_grad(a):
            return Tensor(out_data)

        def backward_s(g):
            _accum(a, g * b)

        return Tensor(out_data, True, (a,), backward_s)
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def pow_(a, p) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data**p
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1))

    return Tensor(out_data, True, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        _accum(a, g * out_data)

    return Tensor(out_data, True, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        _accum(a, g / a.data)

    return Tensor(out_data, True, (a,), backward)


def sqrt(a) -> Tensor:
    return pow_(a, 0.5)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return Tensor(out_data, True, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, g * da)

    return Tensor(out_data, True, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return Tensor(out_data, True, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return Tensor(out_data, True, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(out_data, True, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.transpose(axes)
    inv = np.argsort(axes)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        _accum(a, g.transpose(inv))

    return Tensor(out_data, True, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _needs_grad(*tensors):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return Tensor(out_data, True, tuple(tensors), backward)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out_data = np.broadcast_to(a.data, shape)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return Tensor(out_data, True, (a,), backward)


def getitem(a, idx) -> Tensor:
    """Basic indexing (ints/slices); gradients scatter back into place."""
    a = _as_tensor(a)
    out_data = a.data[idx]
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        g0 = np.zeros_like(a.data)
        g0[idx] = g
        _accum(a, g0)

    return Tensor(out_data, True, (a,), backward)


def take0(a, idx) -> Tensor:
    """Gather rows along axis 0 with an integer index array of any shape.

    This is also the embedding lookup: ``take0(table, ids)``.  Gradients are
    scatter-added (duplicate indices accumulate).
    """
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError("take0 index out of range")
    out_data = a.data[idx]
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        g0 = np.zeros_like(a.data)
        np.add.at(g0, idx, g)
        _accum(a, g0)

    return Tensor(out_data, True, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra / nn primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    out_data = np.matmul(a.data, b.data)
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def softmax(a, axis=-1) -> Tensor:
    """Numerically stabilized softmax; rows sum to 1."""
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner))

    return Tensor(out_data, True, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out_data = xhat * gain.data + bias.data
    if not _needs_grad(x, gain, bias):
        return Tensor(out_data)

    def backward(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            gx = ivar * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(x, gx)

    return Tensor(out_data, True, (x, gain, bias), backward)


def cross_entropy_per_position(logits, targets) -> Tensor:
    """Per-row negative log softmax probability of the target index.

    ``logits`` is [n, K]; ``targets`` an int array of n entries in [0, K).
    Returns a length-n vector; compose with masking/means as needed.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError("cross entropy expects [n, K] logits")
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError("targets must be a vector matching the logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError("cross entropy target out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out_data = -logp[np.arange(n), targets]
    if not _needs_grad(logits):
        return Tensor(out_data)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        _accum(logits, p * g[:, None])

    return Tensor(out_data, True, (logits,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over all rows."""
    return mean(cross_entropy_per_position(logits, targets))


# ---------------------------------------------------------------------------
# seeded RNG and initializers
# ---------------------------------------------------------------------------


class Rng:
    """Deterministic random stream (PCG64 behind numpy's Generator).

    Identical seeds give identical draw sequences across runs and platforms
    (modulo the floating-point environment; see README).  ``spawn`` derives
    independent child streams deterministically.
    """

    def __init__(self, seed: int | None = None, _seq: np.random.SeedSequence | None = None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(None, _seq=child) for child in self._seq.spawn(n)]

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)


def init_linear(rng: Rng, fan_in: int, shape, dtype=np.float32) -> Tensor:
    """Scaled-uniform (fan-in) init for projection weights."""
    limit = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-limit, limit, shape).astype(dtype), requires_grad=True)


def init_embedding(rng: Rng, shape, dtype=np.float32) -> Tensor:
    """Unit-normal times 0.02 init for embedding tables."""
    return Tensor((0.02 * rng.normal(shape)).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar function against central
    finite differences; returns the worst relative error.

    The check runs at float64 regardless of the input dtype.  ``f`` must be a
    pure function of its tensor argument.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(x64)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = x64.grad if x64.grad is not None else np.zeros_like(x64.data)

    flat = x64.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            hi = float(f(Tensor(x64.data.copy())).data)
        flat[i] = orig - eps
        with no_grad():
            lo = float(f(Tensor(x64.data.copy())).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
