"""Dense 2-D arrays with a reverse-mode gradient tape.

Only the operators needed by the network and the losses are provided. Every
value is a 2-D array; scalars are 1x1. Operations are recorded on the
innermost active :class:`Tape` whenever one of their inputs requires a
gradient. Outside a tape, operations simply compute values.

Gradients *accumulate*: calling :meth:`Tape.backward` twice adds the same
contribution twice. Use :func:`zero_grad` between optimisation steps.
"""

import math

import numpy as np

__all__ = [
    "Tensor", "Tape", "as_tensor", "zero_grad", "set_debug",
    "matmul", "add", "sub", "mul", "mul_broadcast", "div", "scale",
    "concat_cols", "sigmoid", "relu", "softmax_rows", "normalize_rows",
    "global_avg_pool", "sum_all", "gather_rows", "nearest_upsample",
    "cross_entropy", "mse", "l2_norm", "grad_check", "ClampCounter",
    "CE_EPS",
]

CE_EPS = 1e-12
_LOG2 = math.log(2.0)
_TAPES = []
_DEBUG = False


def set_debug(flag=True):
    """Turn on finiteness checks after every forward operation."""
    global _DEBUG
    _DEBUG = bool(flag)


class ClampCounter:
    """Counts probability clamps performed by :func:`cross_entropy`."""

    def __init__(self):
        self.events = 0

    def reset(self):
        self.events = 0


clamp_counter = ClampCounter()


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(value, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Tensor must be at most 2-D, got shape {arr.shape}")
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        if self.value.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self):
        return self.value

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        return div(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zero_grad(params):
    for p in params:
        p.zero_grad()


class Tape:
    """Ordered record of operations for reverse-mode differentiation.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended in execution order, which is
    a valid topological order.
    """

    def __init__(self):
        self.ops = []
        self._produced = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, out, inputs, backward_fn):
        self.ops.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf tensor."""
        if loss.value.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced by an operation on this tape")
        grads = {id(loss): np.ones_like(loss.value)}
        for out, inputs, backward_fn in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gin in zip(inputs, backward_fn(g)):
                if gin is None or not inp.requires_grad:
                    continue
                if id(inp) in self._produced:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gin if prev is None else prev + gin
                elif inp.grad is None:
                    inp.grad = np.array(gin, copy=True)
                else:
                    inp.grad += gin


def _emit(value, inputs, backward_fn):
    if _DEBUG and not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite value produced by forward operation")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.requires_grad = False
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    (ra, ca), (rb, cb) = a.shape, b.shape
    if (ra, ca) == (rb, cb):
        return
    if rb in (1, ra) and cb in (1, ca):
        return
    raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _emit(av @ bv, (a, b), backward)


def add(a, b):
    """Elementwise sum; ``b`` may be a 1xc row or 1x1 broadcast over ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sb = b.shape
    return _emit(a.value + b.value, (a, b), lambda g: (g, _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sb = b.shape
    return _emit(a.value - b.value, (a, b), lambda g: (g, -_unbroadcast(g, sb)))


def mul(a, b):
    """Elementwise product; ``b`` may broadcast as in :func:`add`."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def backward(g):
        return (g * bv if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return _emit(av * bv, (a, b), backward)


def mul_broadcast(a, w):
    """Multiply every row of an n x c tensor by a 1 x c weight row."""
    a, w = as_tensor(a), as_tensor(w)
    if w.shape != (1, a.shape[1]):
        raise ValueError(f"mul_broadcast: weight must be (1, {a.shape[1]}), got {w.shape}")
    return mul(a, w)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv

    def backward(g):
        ga = g / bv if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward)


def scale(a, c):
    """Multiply by a Python constant."""
    a = as_tensor(a)
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def concat_cols(*tensors):
    tensors = [as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ValueError(f"concat_cols: row counts differ {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return _emit(np.concatenate([t.value for t in tensors], axis=1), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=1)))


def sigmoid(x):
    x = as_tensor(x)
    v = x.value
    # split by sign to stay finite for large |v|
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    x = as_tensor(x)
    mask = x.value > 0
    return _emit(x.value * mask, (x,), lambda g: (g * mask,))


def softmax_rows(x):
    x = as_tensor(x)
    v = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(v)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit(out, (x,), backward)


def normalize_rows(x):
    """Divide each row by its sum."""
    x = as_tensor(x)
    s = x.value.sum(axis=1, keepdims=True)
    out = x.value / s

    def backward(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / s,)

    return _emit(out, (x,), backward)


def global_avg_pool(x):
    """Column mean of an n x c tensor, returned as 1 x c."""
    x = as_tensor(x)
    n = x.shape[0]
    return _emit(x.value.mean(axis=0, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def sum_all(x):
    x = as_tensor(x)
    return _emit(np.array([[x.value.sum()]], dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g[0, 0], dtype=x.dtype),))


def _check_indices(idx, n, opname):
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{opname}: index out of range for {n} rows")
    return idx


def gather_rows(x, indices):
    x = as_tensor(x)
    idx = _check_indices(indices, x.shape[0], "gather_rows")

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.value[idx], (x,), backward)


def nearest_upsample(x_coarse, parent_index):
    """Copy coarse row ``parent_index[j]`` to fine row ``j``."""
    return gather_rows(x_coarse, parent_index)


def cross_entropy(z, y, class_weights=None):
    """Base-2 cross-entropy summed over rows, weighted by the true class.

    ``y`` is a constant one-hot (all-zero rows contribute nothing). True-class
    probabilities at or below ``CE_EPS`` are clamped; the number of clamps is
    added to ``clamp_counter``.
    """
    z = as_tensor(z)
    yv = y.value if isinstance(y, Tensor) else np.asarray(y, dtype=z.dtype)
    if yv.shape != z.shape:
        raise ValueError(f"cross_entropy: shape mismatch {z.shape} vs {yv.shape}")
    if class_weights is None:
        wy = yv
    else:
        w = class_weights.value if isinstance(class_weights, Tensor) else np.asarray(class_weights)
        w = w.reshape(1, -1)
        if w.shape[1] != z.shape[1]:
            raise ValueError("cross_entropy: class_weights length must equal number of classes")
        wy = yv * w
    active = wy != 0
    low = active & (z.value <= CE_EPS)
    clamp_counter.events += int(low.sum())
    zc = np.where(active, np.maximum(z.value, CE_EPS), 1.0)
    total = -(wy * np.log(zc)).sum() / _LOG2

    def backward(g):
        gz = np.where(active & ~low, -wy / (zc * _LOG2), 0.0)
        return (g[0, 0] * gz,)

    return _emit(np.array([[total]], dtype=z.dtype), (z,), backward)


def mse(z, y, mask=None):
    """Mean over selected rows of the squared Euclidean row error.

    ``mask`` selects rows (boolean, length n); the mean is taken over the
    selected rows and is zero when none are selected.
    """
    z = as_tensor(z)
    yv = y.value if isinstance(y, Tensor) else np.asarray(y, dtype=z.dtype)
    if yv.shape != z.shape:
        raise ValueError(f"mse: shape mismatch {z.shape} vs {yv.shape}")
    m = np.ones(z.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    diff = (z.value - yv) * m[:, None]
    total = (diff ** 2).sum() / count if count else 0.0

    def backward(g):
        if not count:
            return (np.zeros_like(z.value),)
        return (g[0, 0] * 2.0 * diff / count,)

    return _emit(np.array([[total]], dtype=z.dtype), (z,), backward)


def l2_norm(w):
    w = as_tensor(w)
    n = float(np.sqrt((w.value ** 2).sum()))

    def backward(g):
        if n == 0.0:
            return (np.zeros_like(w.value),)
        return (g[0, 0] * w.value / n,)

    return _emit(np.array([[n]], dtype=w.dtype), (w,), backward)


def grad_check(f, params, eps=1e-5, max_entries=None, seed=0, floor=1e-6):
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``f`` takes no arguments and rebuilds the computation from ``params``.
    When ``max_entries`` is set, at most that many randomly chosen entries of
    each parameter are probed. Returns the maximum relative error
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    zero_grad(params)
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for j in entries:
            orig = flat[j]
            flat[j] = orig + eps
            fp = f().item()
            flat[j] = orig - eps
            fm = f().item()
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            a = ga.reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    zero_grad(params)
    return worst
