"""Dense float tensors with an eager reverse-mode tape.

Every differentiable op builds its output with :func:`_node`, which records the
parents and a closure mapping the output gradient to one gradient per parent.
:func:`backward` sweeps the recorded DAG in reverse topological order and
consumes it.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_state = threading.local()


def _cfg():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
        _state.check_finite = False
    return _state


def default_dtype():
    return _cfg().dtype


def grad_enabled() -> bool:
    return _cfg().grad_enabled


@contextlib.contextmanager
def precision(dtype=np.float64, check_finite: bool = True):
    """Switch the default scalar type (verification mode uses float64 + finiteness checks)."""
    st = _cfg()
    old = (st.dtype, st.check_finite)
    st.dtype = np.dtype(dtype).type
    st.check_finite = check_finite
    try:
        yield
    finally:
        st.dtype, st.check_finite = old


@contextlib.contextmanager
def no_grad():
    st = _cfg()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def flatten(self) -> list:
        return self.data.ravel().tolist()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor_from(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    vals = np.array(list(values), dtype=default_dtype())
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != vals.size:
        raise ShapeError(f"length mismatch: shape {shape} needs {int(np.prod(shape))} values, got {vals.size}")
    return Tensor(vals.reshape(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    st = _cfg()
    if st.check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    need = st.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = need
    if need:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- elementwise


def _channel_view(b: np.ndarray, a_shape, axis: int) -> np.ndarray:
    shape = [1] * len(a_shape)
    shape[axis] = b.shape[0]
    return b.reshape(shape)


def _broadcast_operand(a: Tensor, b: Tensor, axis: int):
    """Return (b_view, reduce) where reduce maps a full-shape grad back to b's shape."""
    if b.shape == a.shape:
        return b.data, lambda g: g
    if b.size == 1 and b.ndim == 1:
        return b.data.reshape(()), lambda g: np.array([g.sum()], dtype=g.dtype)
    if b.ndim == 1 and a.ndim >= 2 and a.shape[axis] == b.shape[0]:
        axes = tuple(i for i in range(a.ndim) if i != axis % a.ndim)
        return _channel_view(b.data, a.shape, axis), lambda g: g.sum(axis=axes)
    raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape} along axis {axis}")


def add(a: Tensor, b, axis: int = 1) -> Tensor:
    b = as_tensor(b)
    bv, red = _broadcast_operand(a, b, axis)
    return _node(a.data + bv, (a, b), "add", lambda g: (g, red(g)))


def sub(a: Tensor, b, axis: int = 1) -> Tensor:
    b = as_tensor(b)
    bv, red = _broadcast_operand(a, b, axis)
    return _node(a.data - bv, (a, b), "sub", lambda g: (g, -red(g)))


def mul(a: Tensor, b, axis: int = 1) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    bv, red = _broadcast_operand(a, b, axis)
    ad = a.data
    return _node(ad * bv, (a, b), "mul", lambda g: (g * bv, red(g * ad)))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _node(a.data * s, (a,), "scale", lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def ewise(op: str, a: Tensor, b) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, float(b))
    if op == "neg":
        return neg(a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if ad.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(0)
        if bd.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(0)
        return ga, gb

    return _node(ad @ bd, (a, b), "matmul", bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _node(out, (a,), "permute", lambda g: (g.transpose(inv),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.array([a.data.sum()], dtype=a.data.dtype)
    return _node(out, (a,), "sum", lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------- reverse sweep


def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[int, Tensor]:
    """Reverse sweep from a scalar loss.

    Leaf gradients are accumulated into ``leaf.grad`` and also returned keyed by
    ``id(leaf)``. The tape is cleared afterwards, so a second call on the same
    loss raises :class:`ContractError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward on a graph with no grad-requiring inputs (or already consumed)")
    order = _topo(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.op == "leaf":
                leaves[id(node)] = node
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op} backward produced {pg.shape} for parent {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        # consume the tape
        node._parents = ()
        node._backward = None
        node.requires_grad = False
    return {k: Tensor(v.grad, dtype=v.grad.dtype) for k, v in leaves.items()}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
               coords: Optional[Sequence[int]] = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` must be scalar-valued; ``x`` is evaluated in float64. ``coords``
    restricts the check to a subsample of flat indices.
    """
    return grad_check_report(f, x, eps, coords)[0]


def grad_check_report(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
                      coords: Optional[Sequence[int]] = None, kink_guard: bool = False) -> Tuple[float, int]:
    """Like :func:`grad_check` but returns ``(max_error, skipped)``.

    With ``kink_guard``, a coordinate whose step straddles a non-differentiable point
    (ReLU zero, max-pool tie) is skipped. Detection: for a smooth function the gap
    between the forward and backward one-sided slopes is linear in the step, so it
    halves when the step halves; across a kink it does not.
    """
    with precision(np.float64):
        base = np.array(x.data, dtype=np.float64)
        xt = Tensor(base.copy(), requires_grad=True)
        backward(f(xt))
        analytic = xt.grad.reshape(-1) if xt.grad is not None else np.zeros(base.size)
        flat = base.reshape(-1)

        def at(i, delta):
            # returns f and the step actually representable at this coordinate
            old = flat[i]
            flat[i] = old + delta
            step = flat[i] - old
            with no_grad():
                v = f(Tensor(base.copy())).item()
            flat[i] = old
            return v, step

        idx = range(base.size) if coords is None else coords
        worst, skipped = 0.0, 0
        f0 = None
        for i in idx:
            (fp, hp), (fm, hm) = at(i, eps), at(i, -eps)
            a = analytic[i]
            err = abs(a - (fp - fm) / (hp - hm)) / max(1.0, abs(a))
            if kink_guard and err >= 1e-3:
                if f0 is None:
                    with no_grad():
                        f0 = f(Tensor(base.copy())).item()
                gap = abs((fp - f0) - (f0 - fm)) / eps
                h = eps / 2
                gap_half = abs((at(i, h)[0] - f0) - (f0 - at(i, -h)[0])) / h
                if gap > 0 and not 0.4 <= gap_half / gap <= 0.6:
                    skipped += 1
                    continue
            worst = max(worst, err)
    return worst, skipped
