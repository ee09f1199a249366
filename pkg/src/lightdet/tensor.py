"""Reverse-mode autodiff over numpy arrays.

Small closure-based tape: every op returns a new Tensor holding references to its
parents and a _backward closure that scatters the output gradient back to them.
backward() walks the DAG once in reverse topological order. Arrays are float32 by
default; float64 is used by grad_check. No views are mutated in place after they
enter a graph.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOATS = (np.float32, np.float64)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOATS:
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # reduce a broadcast gradient back to the parent shape
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._op = ""

    # ---- plumbing ----

    @property
    def shape(self) -> tuple:
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

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        if self.data.dtype == np.dtype(dtype):
            return self
        out = _node(self.data.astype(dtype), (self,), "astype")
        if out.requires_grad:
            src_dtype = self.data.dtype

            def _bw():
                _accum(self, out.grad.astype(src_dtype))

            out._backward = _bw
        return out

    def _accum_grad(self, g: np.ndarray) -> None:
        _accum(self, g)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output, got shape %r" % (self.shape,))
        order = toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # ---- arithmetic ----

    def __add__(self, other):
        return _binary(self, other, np.add, lambda a, b, g: (g, g), "add")

    __radd__ = __add__

    def __mul__(self, other):
        return _binary(self, other, np.multiply,
                       lambda a, b, g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda a, b, g: (g, -g), "sub")

    def __rsub__(self, other):
        return _binary(_wrap(other, self.dtype), self, np.subtract,
                       lambda a, b, g: (g, -g), "sub")

    def __truediv__(self, other):
        return _binary(self, other, np.divide,
                       lambda a, b, g: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other):
        return _binary(_wrap(other, self.dtype), self, np.divide,
                       lambda a, b, g: (g / b, -g * a / (b * b)), "div")

    def __neg__(self):
        out = _node(-self.data, (self,), "neg")
        if out.requires_grad:
            def _bw():
                _accum(self, -out.grad)
            out._backward = _bw
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = _node(self.data ** p, (self,), "pow")
        if out.requires_grad:
            a = self.data

            def _bw():
                _accum(self, out.grad * p * a ** (p - 1))

            out._backward = _bw
        return out

    def __matmul__(self, other):
        other = _wrap(other, self.dtype)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul needs 2-D or batched operands")
        out = _node(self.data @ other.data, (self, other), "matmul")
        if out.requires_grad:
            a, b = self.data, other.data

            def _bw():
                g = out.grad
                _accum(self, _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape))
                _accum(other, _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape))

            out._backward = _bw
        return out

    # ---- reductions ----

    def sum(self, axis=None, keepdims: bool = False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            shape = self.data.shape

            def _bw():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                _accum(self, np.broadcast_to(g, shape).copy())

            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else _axis_size(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims: bool = False):
        out_data = self.data.max(axis=axis, keepdims=keepdims)
        out = _node(out_data, (self,), "max")
        if out.requires_grad:
            # subgradient: split among argmax ties
            def _bw():
                g = out.grad
                od = out_data
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                    od = np.expand_dims(od, axis)
                mask = (self.data == od).astype(self.data.dtype)
                count = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
                _accum(self, mask * (g / count))

            out._backward = _bw
        return out

    # ---- elementwise ----

    def exp(self):
        out_data = np.exp(self.data)
        out = _node(out_data, (self,), "exp")
        if out.requires_grad:
            def _bw():
                _accum(self, out.grad * out_data)
            out._backward = _bw
        return out

    def log(self):
        out = _node(np.log(self.data), (self,), "log")
        if out.requires_grad:
            a = self.data

            def _bw():
                _accum(self, out.grad / a)

            out._backward = _bw
        return out

    def sqrt(self):
        out_data = np.sqrt(self.data)
        out = _node(out_data, (self,), "sqrt")
        if out.requires_grad:
            def _bw():
                _accum(self, out.grad * 0.5 / out_data)
            out._backward = _bw
        return out

    def abs(self):
        out = _node(np.abs(self.data), (self,), "abs")
        if out.requires_grad:
            a = self.data

            def _bw():
                _accum(self, out.grad * np.sign(a))

            out._backward = _bw
        return out

    def tanh(self):
        out_data = np.tanh(self.data)
        out = _node(out_data, (self,), "tanh")
        if out.requires_grad:
            def _bw():
                _accum(self, out.grad * (1.0 - out_data * out_data))
            out._backward = _bw
        return out

    def sigmoid(self):
        # stable both directions
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                            np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out_data = out_data.astype(x.dtype)
        out = _node(out_data, (self,), "sigmoid")
        if out.requires_grad:
            def _bw():
                _accum(self, out.grad * out_data * (1.0 - out_data))
            out._backward = _bw
        return out

    def softplus(self):
        out = _node(np.logaddexp(0.0, self.data).astype(self.data.dtype), (self,), "softplus")
        if out.requires_grad:
            x = self.data

            def _bw():
                sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                               np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
                _accum(self, out.grad * sig.astype(x.dtype))

            out._backward = _bw
        return out

    def sin(self):
        out = _node(np.sin(self.data), (self,), "sin")
        if out.requires_grad:
            a = self.data

            def _bw():
                _accum(self, out.grad * np.cos(a))

            out._backward = _bw
        return out

    def arcsin(self):
        out = _node(np.arcsin(self.data), (self,), "arcsin")
        if out.requires_grad:
            a = self.data

            def _bw():
                _accum(self, out.grad / np.sqrt(1.0 - a * a))

            out._backward = _bw
        return out

    def arctan(self):
        out = _node(np.arctan(self.data), (self,), "arctan")
        if out.requires_grad:
            a = self.data

            def _bw():
                _accum(self, out.grad / (1.0 + a * a))

            out._backward = _bw
        return out

    def clamp(self, lo=None, hi=None):
        out = _node(np.clip(self.data, lo, hi), (self,), "clamp")
        if out.requires_grad:
            a = self.data

            def _bw():
                mask = np.ones_like(a)
                if lo is not None:
                    mask = mask * (a >= lo)
                if hi is not None:
                    mask = mask * (a <= hi)
                _accum(self, out.grad * mask)

            out._backward = _bw
        return out

    def leaky_relu(self, slope: float = 0.01):
        a = self.data
        out = _node(np.where(a > 0, a, slope * a), (self,), "leaky_relu")
        if out.requires_grad:
            def _bw():
                _accum(self, out.grad * np.where(a > 0, 1.0, slope).astype(a.dtype))
            out._backward = _bw
        return out

    def relu(self):
        return self.leaky_relu(slope=0.0)

    def gelu(self):
        # tanh form; derivative matches this exact forward expression
        x = self.data
        c = float(np.sqrt(2.0 / np.pi))
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = _node((0.5 * x * (1.0 + t)).astype(x.dtype), (self,), "gelu")
        if out.requires_grad:
            def _bw():
                dinner = c * (1.0 + 3 * 0.044715 * x * x)
                grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
                _accum(self, out.grad * grad.astype(x.dtype))
            out._backward = _bw
        return out

    def maximum(self, other):
        return _binary(self, other, np.maximum,
                       lambda a, b, g: (g * (a >= b), g * (a < b)), "maximum")

    def minimum(self, other):
        return _binary(self, other, np.minimum,
                       lambda a, b, g: (g * (a <= b), g * (a > b)), "minimum")

    # ---- shape ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            src = self.data.shape

            def _bw():
                _accum(self, out.grad.reshape(src))

            out._backward = _bw
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = _node(self.data.transpose(axes), (self,), "transpose")
        if out.requires_grad:
            inv = np.argsort(axes)

            def _bw():
                _accum(self, out.grad.transpose(inv))

            out._backward = _bw
        return out

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def __getitem__(self, idx):
        out = _node(self.data[idx], (self,), "slice")
        if out.requires_grad:
            src_shape = self.data.shape
            src_dtype = self.data.dtype

            def _bw():
                g = np.zeros(src_shape, dtype=src_dtype)
                np.add.at(g, idx, out.grad)
                _accum(self, g)

            out._backward = _bw
        return out

    def pad2d(self, pad: int, value: float = 0.0):
        # NCHW padding on the last two axes
        if pad == 0:
            return self
        p = ((0, 0),) * (self.ndim - 2) + ((pad, pad), (pad, pad))
        out = _node(np.pad(self.data, p, constant_values=value), (self,), "pad2d")
        if out.requires_grad:
            def _bw():
                sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
                _accum(self, out.grad[sl])
            out._backward = _bw
        return out

    def softmax(self, axis: int = -1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)
        out = _node(s, (self,), "softmax")
        if out.requires_grad:
            def _bw():
                g = out.grad
                _accum(self, s * (g - (g * s).sum(axis=axis, keepdims=True)))
            out._backward = _bw
        return out


# ---- free functions ----


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result_dtype(a: Tensor, b: Tensor):
    return np.result_type(a.data.dtype, b.data.dtype)


def _node(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(p for p in parents if p.requires_grad or p._prev)
    else:
        out.requires_grad = False
        out._prev = ()
    out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and not t._prev:
        return
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _binary(a, b, fwd, bwd, op: str) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap(a, b.dtype)
    b = _wrap(b, a.dtype)
    dt = _result_dtype(a, b)
    ad = a.data.astype(dt, copy=False)
    bd = b.data.astype(dt, copy=False)
    out = _node(fwd(ad, bd), (a, b), op)
    if out.requires_grad:
        def _bw():
            ga, gb = bwd(ad, bd, out.grad)
            _accum(a, _unbroadcast(np.asarray(ga, dtype=dt), a.data.shape).astype(a.data.dtype, copy=False))
            _accum(b, _unbroadcast(np.asarray(gb, dtype=dt), b.data.shape).astype(b.data.dtype, copy=False))
        out._backward = _bw
    return out


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def toposort(root: Tensor) -> list[Tensor]:
    """Parents before children; the DAG is acyclic by construction."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]

        def _bw():
            splits = np.cumsum(sizes)[:-1]
            for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
                _accum(t, g)

        out._backward = _bw
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = t if isinstance(t, Tensor) else Tensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else axis + t.ndim + 1, 1)
        expanded.append(t.reshape(*shape))
    return concat(expanded, axis=axis)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a.dtype)
    dt = _result_dtype(a, b)
    out = _node(np.where(cond, a.data.astype(dt, copy=False), b.data.astype(dt, copy=False)), (a, b), "where")
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad * cond, a.data.shape).astype(a.data.dtype, copy=False))
            _accum(b, _unbroadcast(out.grad * ~cond, b.data.shape).astype(b.data.dtype, copy=False))
        out._backward = _bw
    return out


# ---- spatial primitives (NCHW) ----


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation, the deep-learning convention. w: (Cout, Cin/groups, kh, kw)."""
    n, c, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    if c != cpg * groups:
        raise ValueError(f"conv2d: {c} input channels, weight expects {cpg * groups}")
    if cout % groups:
        raise ValueError("conv2d: out channels not divisible by groups")
    xp = x.pad2d(padding) if padding else x
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d: kernel larger than padded input")

    xd = xp.data
    dt = xd.dtype
    # gather kernel taps: (n, c, kh, kw, ho, wo) without python-per-pixel loops
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xd[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cpgk = cpg * kh * kw
    cols_g = cols.reshape(n, groups, cpgk, ho * wo)
    wg = w.data.reshape(groups, cout // groups, cpgk)
    out_data = np.einsum("gok,ngkl->ngol", wg, cols_g, optimize=True)
    out_data = out_data.reshape(n, cout, ho, wo)
    if b is not None:
        out_data = out_data + b.data.reshape(1, cout, 1, 1)

    parents = (xp, w) if b is None else (xp, w, b)
    out = _node(out_data, parents, "conv2d")
    if out.requires_grad:
        def _bw():
            g = out.grad.reshape(n, groups, cout // groups, ho * wo)
            if w.requires_grad or w._prev:
                gw = np.einsum("ngol,ngkl->gok", g, cols_g, optimize=True)
                _accum(w, gw.reshape(w.data.shape))
            if b is not None and (b.requires_grad or b._prev):
                _accum(b, out.grad.sum(axis=(0, 2, 3)))
            if xp.requires_grad or xp._prev:
                gcols = np.einsum("gok,ngol->ngkl", wg, g, optimize=True)
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gx = np.zeros((n, c, hp, wp), dtype=dt)
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                _accum(xp, gx)
        out._backward = _bw
    return out


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or kernel
    xp = x.pad2d(padding, value=-np.inf) if padding else x
    n, c, hp, wp = xp.shape
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    xd = xp.data
    out_data = np.full((n, c, ho, wo), -np.inf, dtype=xd.dtype)
    argtap = np.zeros((n, c, ho, wo), dtype=np.int16)
    for i in range(kernel):
        for j in range(kernel):
            tap = xd[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            better = tap > out_data
            out_data = np.where(better, tap, out_data)
            argtap = np.where(better, i * kernel + j, argtap)
    out = _node(out_data, (xp,), "max_pool2d")
    if out.requires_grad:
        def _bw():
            gx = np.zeros((n, c, hp, wp), dtype=xd.dtype)
            for i in range(kernel):
                for j in range(kernel):
                    mask = argtap == (i * kernel + j)
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += out.grad * mask
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
                _accum(x, gx)
            else:
                _accum(xp, gx)
        out._backward = _bw
        if padding:
            # grad routes straight to the unpadded input; drop the -inf pad node
            out._prev = (x,)
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = _node(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,), "up2x")
    if out.requires_grad:
        def _bw():
            g = out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
            _accum(x, g)
        out._backward = _bw
    return out


# ---- gradient checking ----


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[Tensor], h: float = 1e-4,
               rtol: float = 1e-4):
    """Central finite differences vs autograd in float64.

    fn maps the given leaf tensors to a scalar Tensor. Returns (max_rel_err, report);
    report rows are (input_index, flat_index, analytic, numeric, rel_err, kink_flag).
    Kink flag: one-sided forward/backward differences disagree, i.e. the sample sits
    at or near a non-differentiable point where central FD is unreliable; flagged
    samples are excluded from max_rel_err but stay in the report.
    """
    leaves = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    out = fn(*leaves)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar function")
    out.backward()
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

    with no_grad():
        f0 = fn(*leaves).item()

    report = []
    max_err = 0.0
    for idx, lf in enumerate(leaves):
        flat = lf.data.reshape(-1)
        an = analytic[idx].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]

            def _eval(delta):
                flat[k] = orig + delta
                with no_grad():
                    v = fn(*leaves).item()
                flat[k] = orig
                return v

            fp, fm = _eval(h), _eval(-h)
            num = (fp - fm) / (2 * h)
            fwd = (fp - f0) / h
            bwd = (f0 - fm) / h
            rel = abs(an[k] - num) / max(abs(an[k]), abs(num), 1.0)
            kink = abs(fwd - bwd) > 50 * rtol * max(abs(fwd), abs(bwd), 1.0)
            report.append((idx, k, float(an[k]), float(num), float(rel), kink))
            if not kink:
                max_err = max(max_err, rel)
    return max_err, report
