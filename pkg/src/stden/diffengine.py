"""Dense float64 tensors with a reverse-mode differentiation tape.

The primitive set is fixed and small: add, subtract, hadamard, scale,
matmul, matvec, tanh, sigmoid, softplus, exp, log, sum, mean, concat,
slice, transpose, reshape. Every layer of the forecasting model is
expressed in these, which keeps the backward pass short enough to audit
line by line and to verify against finite differences.

Rules of the tape:
  * every primitive checks its result for NaN/Inf and raises NonFiniteError;
  * broadcasting is allowed only between a size-1 tensor and a tensor;
  * gradients accumulate additively where a value fans out;
  * one backward pass per tape, after which saved intermediates are freed.

Parameters live in a ParamStore (name -> array, plus a gradient slot) and
enter a tape as leaves via ParamStore.leaf.
"""

from __future__ import annotations

import builtins

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "ParamStore",
    "constant",
    "add",
    "subtract",
    "hadamard",
    "scale",
    "matmul",
    "matvec",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sum",
    "mean",
    "concat",
    "slice",
    "transpose",
    "reshape",
    "grad_check",
]

_py_slice = builtins.slice


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


def _finite(value, op):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return value


class Tensor:
    """Immutable float64 value, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tracked = "tracked" if self.tape is not None else "constant"
        return f"Tensor(shape={tuple(self.shape)}, {tracked})"


def constant(value) -> Tensor:
    return Tensor(value)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications; replayed once in reverse."""

    def __init__(self):
        self._entries = []
        self._next_id = 0
        self._leaves = []
        self._spent = False

    def _fresh(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, value) -> Tensor:
        return Tensor(value, tape=self, node=self._fresh())

    def _record(self, in_nodes, backward_fn) -> int:
        out = self._fresh()
        self._entries.append((out, in_nodes, backward_fn))
        return out

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every registered parameter slot."""
        if self._spent:
            raise RuntimeError("backward already ran on this tape")
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        self._spent = True
        grads = {loss.node: np.ones_like(loss.data)}
        for out, in_nodes, backward_fn in reversed(self._entries):
            g_out = grads.pop(out, None)
            if g_out is None:
                continue
            for nid, g in zip(in_nodes, backward_fn(g_out)):
                if nid is None or g is None:
                    continue
                held = grads.get(nid)
                # never in place: backward fns may hand back views
                grads[nid] = g if held is None else held + g
        for store, name, nid in self._leaves:
            g = grads.get(nid)
            if g is not None:
                store.grads[name] = store.grads[name] + g.reshape(store.params[name].shape)
        self._entries = []


class ParamStore:
    """Named trainable arrays with matching gradient slots."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def leaf(self, name, tape: Tape) -> Tensor:
        t = tape.leaf(self.params[name])
        tape._leaves.append((self, name, t.node))
        return t

    def zero_grads(self):
        for name, g in self.grads.items():
            self.grads[name] = np.zeros_like(g)

    def names(self):
        return list(self.params)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands live on different tapes")
    return tape


def _emit(tape, value, in_tensors, backward_fn, op) -> Tensor:
    _finite(value, op)
    if tape is None:
        return Tensor(value)
    in_nodes = tuple(t.node if t.tape is not None else None for t in in_tensors)
    node = tape._record(in_nodes, backward_fn)
    return Tensor(value, tape=tape, node=node)


def _binary_shapes(a, b, op):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g, operand):
    if operand.size == 1 and g.size != 1:
        return np.sum(g).reshape(operand.shape)
    return g


# -- elementwise and linear primitives --------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a.data, b.data, "add")
    value = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data), _unbroadcast(g, b.data)

    return _emit(_tape_of(a, b), value, (a, b), backward, "add")


def subtract(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a.data, b.data, "subtract")
    value = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data), _unbroadcast(-g, b.data)

    return _emit(_tape_of(a, b), value, (a, b), backward, "subtract")


def hadamard(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a.data, b.data, "hadamard")
    va, vb = a.data, b.data
    value = va * vb

    def backward(g):
        return _unbroadcast(g * vb, va), _unbroadcast(g * va, vb)

    return _emit(_tape_of(a, b), value, (a, b), backward, "hadamard")


def scale(x, c) -> Tensor:
    """Multiply a tensor by a plain (non-differentiated) scalar."""
    x = _wrap(x)
    c = float(c)
    value = x.data * c

    def backward(g):
        return (g * c,)

    return _emit(_tape_of(x), value, (x,), backward, "scale")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    va, vb = a.data, b.data
    value = va @ vb

    def backward(g):
        return g @ vb.T, va.T @ g

    return _emit(_tape_of(a, b), value, (a, b), backward, "matmul")


def matvec(a, x) -> Tensor:
    a, x = _wrap(a), _wrap(x)
    if a.data.ndim != 2 or x.data.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ValueError(f"matvec: shapes {a.shape} and {x.shape} do not conform")
    va, vx = a.data, x.data
    value = va @ vx

    def backward(g):
        return np.outer(g, vx), va.T @ g

    return _emit(_tape_of(a, x), value, (a, x), backward, "matvec")


def tanh(x) -> Tensor:
    x = _wrap(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _emit(_tape_of(x), y, (x,), backward, "tanh")


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    v = x.data
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _emit(_tape_of(x), y, (x,), backward, "sigmoid")


def softplus(x) -> Tensor:
    x = _wrap(x)
    v = x.data
    y = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = np.empty_like(v)
    pos = v >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    sig[~pos] = ev / (1.0 + ev)

    def backward(g):
        return (g * sig,)

    return _emit(_tape_of(x), y, (x,), backward, "softplus")


def exp(x) -> Tensor:
    x = _wrap(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _emit(_tape_of(x), y, (x,), backward, "exp")


def log(x) -> Tensor:
    x = _wrap(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    vx = x.data

    def backward(g):
        return (g / vx,)

    return _emit(_tape_of(x), y, (x,), backward, "log")


# -- reductions and shape primitives -----------------------------------------


def sum(x) -> Tensor:  # noqa: A001 - primitive named for what it does
    x = _wrap(x)
    shape = x.data.shape
    value = np.sum(x.data).reshape(())

    def backward(g):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return _emit(_tape_of(x), value, (x,), backward, "sum")


def mean(x) -> Tensor:
    x = _wrap(x)
    shape = x.data.shape
    n = x.data.size
    value = np.mean(x.data).reshape(())

    def backward(g):
        return (np.broadcast_to(g.reshape(()) / n, shape).copy(),)

    return _emit(_tape_of(x), value, (x,), backward, "mean")


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for k in range(len(sizes)):
            key = [_py_slice(None)] * g.ndim
            key[axis] = _py_slice(offsets[k], offsets[k + 1])
            out.append(g[tuple(key)])
        return out

    return _emit(_tape_of(*tensors), value, tensors, backward, "concat")


def slice(x, key) -> Tensor:  # noqa: A001 - primitive named for what it does
    """Basic slicing (ints and slice objects only, no fancy indexing)."""
    x = _wrap(x)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, np.integer, _py_slice)):
            raise ValueError(f"slice: unsupported index {k!r}")
    value = x.data[key].copy()
    in_shape = x.data.shape

    def backward(g):
        gx = np.zeros(in_shape)
        gx[key] = g
        return (gx,)

    return _emit(_tape_of(x), value, (x,), backward, "slice")


def transpose(x) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-d tensor, got shape {x.shape}")
    value = x.data.T.copy()

    def backward(g):
        return (g.T,)

    return _emit(_tape_of(x), value, (x,), backward, "transpose")


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    value = x.data.reshape(shape)
    in_shape = x.data.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return _emit(_tape_of(x), value, (x,), backward, "reshape")


# -- finite-difference validation --------------------------------------------


def _eval_loss(fn, store) -> float:
    loss = fn(store, Tape())
    if loss.data.size != 1:
        raise ValueError("grad_check function must return a scalar loss")
    val = loss.item()
    if not np.isfinite(val):
        raise NonFiniteError("grad_check probe evaluated to a non-finite loss")
    return val


def grad_check(fn, store: ParamStore, h=None) -> float:
    """Max relative error between tape gradients and central differences.

    fn(store, tape) must build a scalar loss on the tape, deterministically.
    The default probe step is 1e-6 * (1 + |coordinate|).
    """
    tape = Tape()
    loss = fn(store, tape)
    if loss.data.size != 1:
        raise ValueError("grad_check function must return a scalar loss")
    store.zero_grads()
    if loss.tape is not None:
        tape.backward(loss)
    ad = {name: store.grads[name].copy() for name in store.params}

    worst = 0.0
    for name, value in store.params.items():
        flat = value.reshape(-1)
        g_ad = ad[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            step = h if h is not None else 1e-6 * (1.0 + abs(saved))
            flat[i] = saved + step
            plus = _eval_loss(fn, store)
            flat[i] = saved - step
            minus = _eval_loss(fn, store)
            flat[i] = saved
            g_fd = (plus - minus) / (2.0 * step)
            err = abs(g_ad[i] - g_fd) / (abs(g_ad[i]) + abs(g_fd) + 1e-12)
            worst = max(worst, err)
    return worst
