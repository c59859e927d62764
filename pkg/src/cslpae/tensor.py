"""Small numpy-backed tensor with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` holding its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` orders the graph topologically and replays the
closures once each, accumulating into ``.grad`` of tensors that require it.

Neural primitives (convolutions, normalisations, attention) accept either an
unbatched ``(C, T)`` array or a batched ``(N, C, T)`` array.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class NumericError(FloatingPointError):
    """Raised when a computation produces NaN or infinite values."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # ----------------------------------------------------------------- basics
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
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    @staticmethod
    def make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Build an op output; ``backward(g)`` returns one gradient (or None) per parent."""
        out = Tensor(data, dtype=data.dtype)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = self._topological_order()
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def _topological_order(self) -> list["Tensor"]:
        order, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor.make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor.make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor.make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __pow__(self, exponent: float):
        a = self.data
        return Tensor.make(
            a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),)
        )

    def __matmul__(self, other):
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        # promote 1-D operands to matrices the way np.matmul does, then undo
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b

        def backward(g):
            if a.ndim == 1:
                g = np.expand_dims(g, -2)
            if b.ndim == 1:
                g = np.expand_dims(g, -1)
            ga = g @ np.swapaxes(b2, -1, -2)
            gb = np.swapaxes(a2, -1, -2) @ g
            return _unbroadcast(ga, a2.shape).reshape(a.shape), _unbroadcast(gb, b2.shape).reshape(b.shape)

        return Tensor.make(a @ b, (self, other), backward)

    def __getitem__(self, index):
        shape, dtype = self.shape, self.dtype

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, index, g)
            return (out,)

        return Tensor.make(np.array(self.data[index]), (self,), backward)

    # -------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------------ elementwise
    def exp(self):
        out = np.exp(self.data)
        return Tensor.make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor.make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor.make(out, (self,), lambda g: (g * 0.5 / out,))

    def relu(self):
        mask = self.data > 0
        return Tensor.make(self.data * mask, (self,), lambda g: (g * mask,))

    # ------------------------------------------------------------------ shape
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor.make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor.make(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
        )

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    @property
    def T(self):
        return self.transpose()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)


def _as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def as_tensor(value, dtype=None) -> Tensor:
    """Wrap arrays and scalars as constant tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    if dtype is None and isinstance(value, (np.ndarray, np.generic)) and np.issubdtype(value.dtype, np.floating):
        return Tensor(value)
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# Structural helpers
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    return Tensor.make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise ValueError(f"expected (C, T) or (N, C, T), got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# Neural primitives
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = as_tensor(x) @ weight
    return out if bias is None else out + bias


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation with zero padding.

    ``x`` is (C_in, T) or (N, C_in, T); ``weight`` is (C_out, C_in, k).
    Output length is ``(T + 2*padding - k) // stride + 1``.
    """
    x, squeeze = _batched(as_tensor(x))
    weight = as_tensor(weight)
    n, c_in, t = x.shape
    c_out, wc_in, k = weight.shape
    if wc_in != c_in:
        raise ValueError(f"input has {c_in} channels but kernel expects {wc_in}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    t_pad = t + 2 * padding
    if t_pad < k:
        raise ValueError(f"padded length {t_pad} shorter than kernel {k}")
    t_out = (t_pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, k, axis=2)[:, :, : stride * (t_out - 1) + 1 : stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(n, t_out, c_in * k)
    w2 = weight.data.reshape(c_out, c_in * k)
    out = np.ascontiguousarray((cols @ w2.T).transpose(0, 2, 1))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1))
        gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(c_out, c_in, k)
        dcols = (gt @ w2).reshape(n, t_out, c_in, k)
        dxp = np.zeros((n, c_in, t_pad), dtype=g.dtype)
        for j in range(k):
            dxp[:, :, j : j + stride * (t_out - 1) + 1 : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, padding : padding + t] if padding else dxp
        return dx, gw

    y = Tensor.make(out, (x, weight), backward)
    if bias is not None:
        y = y + as_tensor(bias).reshape(1, c_out, 1)
    return y.reshape(c_out, t_out) if squeeze else y


def conv1d_transposed(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 1-D convolution, the adjoint of :func:`conv1d`.

    ``x`` is (C_in, T) or (N, C_in, T); ``weight`` is (C_in, C_out, k).
    Output length is ``(T - 1)*stride + k - 2*padding``.
    """
    x, squeeze = _batched(as_tensor(x))
    weight = as_tensor(weight)
    n, c_in, t = x.shape
    wc_in, c_out, k = weight.shape
    if wc_in != c_in:
        raise ValueError(f"input has {c_in} channels but kernel expects {wc_in}")
    t_full = (t - 1) * stride + k
    t_out = t_full - 2 * padding
    if t_out <= 0:
        raise ValueError(f"transposed convolution output length {t_out} is not positive")

    xt = np.ascontiguousarray(x.data.transpose(0, 2, 1))
    w2 = weight.data.reshape(c_in, c_out * k)
    prod = (xt @ w2).reshape(n, t, c_out, k)
    full = np.zeros((n, c_out, t_full), dtype=prod.dtype)
    span = stride * (t - 1) + 1
    for j in range(k):
        full[:, :, j : j + span : stride] += prod[:, :, :, j].transpose(0, 2, 1)
    out = np.ascontiguousarray(full[:, :, padding : padding + t_out])

    def backward(g):
        gfull = np.zeros((n, c_out, t_full), dtype=g.dtype)
        gfull[:, :, padding : padding + t_out] = g
        dprod = np.empty((n, t, c_out, k), dtype=g.dtype)
        for j in range(k):
            dprod[:, :, :, j] = gfull[:, :, j : j + span : stride].transpose(0, 2, 1)
        dprod = dprod.reshape(n, t, c_out * k)
        dx = np.ascontiguousarray((dprod @ w2.T).transpose(0, 2, 1))
        gw = (xt.reshape(-1, c_in).T @ dprod.reshape(-1, c_out * k)).reshape(c_in, c_out, k)
        return dx, gw

    y = Tensor.make(out, (x, weight), backward)
    if bias is not None:
        y = y + as_tensor(bias).reshape(1, c_out, 1)
    return y.reshape(c_out, t_out) if squeeze else y


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise each channel of each sample over time (no affine)."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ValueError("instance_norm needs at least one time step")
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return Tensor.make(y.astype(a.dtype, copy=False), (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis then apply a learned affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gh = g * gain.data
        gm = gh.mean(axis=-1, keepdims=True)
        gym = (gh * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gh - gm - xhat * gym)
        flat_g = g.reshape(-1, g.shape[-1])
        return dx, (flat_g * xhat.reshape(flat_g.shape)).sum(axis=0), flat_g.sum(axis=0)

    return Tensor.make(out, (x, gain, bias), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.make(y, (x,), backward)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return Tensor.make(out, (x,), backward)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors to unit norm; vectors with norm below ``eps`` map to ~0."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    big = norm > eps

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / denom),)

    return Tensor.make(y, (x,), backward)


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return (diff * diff).mean()


def positional_encoding(length: int, dim: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fixed sinusoidal encodings, shape (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def multi_head_attention(x, params: dict, prefix: str, n_heads: int) -> Tensor:
    """Scaled dot-product self-attention over ``x`` of shape (N, T, d).

    Keys carry no bias: a key bias shifts every score of a query equally and
    therefore has identically zero gradient.
    """
    x = as_tensor(x)
    n, t, d = x.shape
    if d % n_heads:
        raise ValueError(f"model width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def heads(z):
        return z.reshape(n, t, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(linear(x, params[prefix + "q.weight"], params[prefix + "q.bias"]))
    k = heads(linear(x, params[prefix + "k.weight"]))
    v = heads(linear(x, params[prefix + "v.weight"], params[prefix + "v.bias"]))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    ctx = (softmax(scores, axis=-1) @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    return linear(ctx, params[prefix + "o.weight"], params[prefix + "o.bias"])


def attention_block(x, params: dict, prefix: str, n_heads: int) -> Tensor:
    """One pre-norm transformer encoder layer on (T, d) or (N, T, d) input."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.shape[-1] % n_heads:
        raise ValueError(f"model width {x.shape[-1]} not divisible by {n_heads} heads")
    h = layer_norm(x, params[prefix + "ln1.gain"], params[prefix + "ln1.bias"])
    x = x + multi_head_attention(h, params, prefix + "attn.", n_heads)
    h = layer_norm(x, params[prefix + "ln2.gain"], params[prefix + "ln2.bias"])
    h = linear(h, params[prefix + "ff1.weight"], params[prefix + "ff1.bias"]).relu()
    x = x + linear(h, params[prefix + "ff2.weight"], params[prefix + "ff2.bias"])
    return x.reshape(x.shape[1:]) if squeeze else x


def attention_block_shapes(prefix: str, d: int, ff: int) -> dict[str, tuple]:
    """Parameter names and shapes used by :func:`attention_block`."""
    return {
        prefix + "ln1.gain": (d,),
        prefix + "ln1.bias": (d,),
        prefix + "attn.q.weight": (d, d),
        prefix + "attn.q.bias": (d,),
        prefix + "attn.k.weight": (d, d),
        prefix + "attn.v.weight": (d, d),
        prefix + "attn.v.bias": (d,),
        prefix + "attn.o.weight": (d, d),
        prefix + "attn.o.bias": (d,),
        prefix + "ln2.gain": (d,),
        prefix + "ln2.bias": (d,),
        prefix + "ff1.weight": (d, ff),
        prefix + "ff1.bias": (ff,),
        prefix + "ff2.weight": (ff, d),
        prefix + "ff2.bias": (d,),
    }


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def gradcheck(fn: Callable[..., Tensor], point: Iterable, h: float = 1e-6,
              max_coords: int | None = None, seed: int = 0) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``fn`` maps the tensors in ``point`` to a scalar tensor. Each coordinate is
    perturbed in place by ``±h``. The per-coordinate error is
    ``|a - n| / max(1e-8, |a| + |n|)``. With ``max_coords``, larger tensors are
    checked on a random subset of that many coordinates.
    """
    pick = np.random.default_rng(seed)
    leaves = [p if isinstance(p, Tensor) else Tensor(p, dtype=np.float64) for p in point]
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    out = fn(*leaves)
    if out.size != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite at the check point")
    out.backward()
    worst = 0.0
    with no_grad():
        for leaf in leaves:
            analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
            flat = leaf.data.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = pick.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(fn(*leaves).data)
                flat[i] = orig - h
                f_minus = float(fn(*leaves).data)
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(f"non-finite value while perturbing coordinate {i}")
                numeric = (f_plus - f_minus) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                if math.isnan(a):
                    raise NumericError("analytic gradient contains NaN")
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    return worst
