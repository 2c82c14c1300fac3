"""Dense-array substrate with reverse-mode automatic differentiation.

Covers exactly the operations the layering model and its losses need:
3x3 same-padded convolution, 2x2 max-pool / nearest-neighbour upsampling,
channel concatenation, elementwise arithmetic, leaky ReLU, sigmoid,
per-channel normalization and axis reductions.  Gradients are exact
reverse-mode derivatives; the max reduction routes its subgradient to the
first (lowest flat index) argmax element.

Arrays are float32 by default; float64 is available for gradient
verification (pass dtype=np.float64 when creating leaves).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ParameterSet",
    "constant",
    "parameter",
    "concat",
    "gradients",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf value surfaces where a finite one is required."""


class Tensor:
    """A node in a computation graph holding an n-d float array.

    Leaves are created via :func:`constant` / :func:`parameter`; interior
    nodes are produced by the operations below.  ``backward()`` on a scalar
    fills ``grad`` on every node with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph construction helpers -------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data + other.data, _parents=(self, other))
        if out.requires_grad:
            def bw(g):
                return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)
            out._backward = bw
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data - other.data, _parents=(self, other))
        if out.requires_grad:
            def bw(g):
                return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)
            out._backward = bw
        return out

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (-g,)
        return out

    def __mul__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data * other.data, _parents=(self, other))
        if out.requires_grad:
            def bw(g):
                return (_unbroadcast(g * other.data, self.shape),
                        _unbroadcast(g * self.data, other.shape))
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data / other.data, _parents=(self, other))
        if out.requires_grad:
            def bw(g):
                return (_unbroadcast(g / other.data, self.shape),
                        _unbroadcast(-g * self.data / (other.data * other.data), other.shape))
            out._backward = bw
        return out

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def square(self):
        out = Tensor(self.data * self.data, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (2.0 * g * self.data,)
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = Tensor(y, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (g / (2.0 * y),)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (g / self.data,)
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (g * y,)
        return out

    def sigmoid(self):
        y = _sigmoid(self.data)
        out = Tensor(y, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (g * y * (1.0 - y),)
        return out

    def leaky_relu(self, alpha=0.1):
        x = self.data
        out = Tensor(np.maximum(x, alpha * x), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (np.where(x > 0, g, alpha * g),)
        return out

    def clip(self, lo, hi):
        """Clamp values to [lo, hi]; gradient passes only where unclamped."""
        inside = (self.data >= lo) & (self.data <= hi)
        out = Tensor(np.clip(self.data, lo, hi), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (np.where(inside, g, 0.0),)
        return out

    def floor_at(self, lo):
        """Elementwise max(self, lo); gradient passes where self > lo."""
        mask = self.data > lo
        out = Tensor(np.maximum(self.data, lo), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (np.where(mask, g, 0.0),)
        return out

    # -- reductions -----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))
        if out.requires_grad:
            def bw(g):
                return (_spread(g, self.shape, axis, keepdims),)
            out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def max(self, axis=None):
        """Max reduction; subgradient routes to the first argmax element."""
        if axis is None:
            flat = self.data.reshape(-1)
            idx = int(np.argmax(flat))
            out = Tensor(flat[idx].copy(), _parents=(self,))
            if out.requires_grad:
                def bw(g):
                    gx = np.zeros_like(self.data).reshape(-1)
                    gx[idx] = g
                    return (gx.reshape(self.shape),)
                out._backward = bw
            return out
        idx = np.argmax(self.data, axis=axis)  # first occurrence on ties
        out = Tensor(np.take_along_axis(self.data, np.expand_dims(idx, axis), axis).squeeze(axis),
                     _parents=(self,))
        if out.requires_grad:
            def bw(g):
                gx = np.zeros_like(self.data)
                np.put_along_axis(gx, np.expand_dims(idx, axis),
                                  np.expand_dims(g, axis), axis)
                return (gx,)
            out._backward = bw
        return out

    # -- structure ------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: (g.reshape(self.shape),)
        return out

    def select(self, i):
        """Index along the leading (batch) axis."""
        out = Tensor(self.data[i], _parents=(self,))
        if out.requires_grad:
            def bw(g):
                gx = np.zeros_like(self.data)
                gx[i] = g
                return (gx,)
            out._backward = bw
        return out

    # -- spatial ops (layout: batch, height, width, channels) -----------

    def conv2d(self, weight, bias):
        """3x3 convolution, stride 1, zero padding 1 (same spatial size)."""
        if self.data.ndim != 4:
            raise ShapeError(f"conv2d: input must be (B,H,W,C), got {self.shape}")
        if weight.shape[:2] != (3, 3) or weight.shape[2] != self.shape[3]:
            raise ShapeError(
                f"conv2d: weight {weight.shape} does not match input {self.shape}")
        B, H, W, Ci = self.shape
        Co = weight.shape[3]
        if bias.shape != (Co,):
            raise ShapeError(f"conv2d: bias {bias.shape} vs {Co} output channels")
        xp = np.zeros((B, H + 2, W + 2, Ci), dtype=self.data.dtype)
        xp[:, 1:-1, 1:-1, :] = self.data

        wmat = weight.data.reshape(9 * Ci, Co)
        out_flat = None
        for k in range(9):
            di, dj = divmod(k, 3)
            part = xp[:, di:di + H, dj:dj + W, :].reshape(-1, Ci) @ weight.data[di, dj]
            if out_flat is None:
                out_flat = part
            else:
                out_flat += part
        out_flat += bias.data
        out = Tensor(out_flat.reshape(B, H, W, Co), _parents=(self, weight, bias))
        if out.requires_grad:
            def bw(g):
                gf = g.reshape(-1, Co)
                gw = np.empty_like(weight.data)
                for k in range(9):
                    di, dj = divmod(k, 3)
                    gw[di, dj] = xp[:, di:di + H, dj:dj + W, :].reshape(-1, Ci).T @ gf
                gb = gf.sum(axis=0)
                if self.requires_grad:
                    # one wide gemm, then nine strided scatter-adds
                    dcols = (gf @ wmat.T).reshape(B, H, W, 9, Ci)
                    gxp = np.zeros_like(xp)
                    for k in range(9):
                        di, dj = divmod(k, 3)
                        gxp[:, di:di + H, dj:dj + W, :] += dcols[:, :, :, k, :]
                    gx = gxp[:, 1:-1, 1:-1, :]
                else:
                    gx = np.zeros((B, H, W, Ci), dtype=g.dtype)
                return gx, gw, gb
            out._backward = bw
        return out

    def maxpool2(self):
        """2x2 max pooling; ties route to the lowest flat (row-major) index."""
        B, H, W, C = self.shape
        if H % 2 or W % 2:
            raise ShapeError(f"maxpool2: spatial dims must be even, got {self.shape}")
        win = self.data.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
        win = win.reshape(B, H // 2, W // 2, 4, C)
        idx = np.argmax(win, axis=3)
        y = np.take_along_axis(win, idx[:, :, :, None, :], axis=3).squeeze(3)
        out = Tensor(y, _parents=(self,))
        if out.requires_grad:
            def bw(g):
                gw = np.zeros_like(win)
                np.put_along_axis(gw, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
                gx = gw.reshape(B, H // 2, W // 2, 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
                return (gx.reshape(B, H, W, C),)
            out._backward = bw
        return out

    def upsample2(self):
        """Nearest-neighbour 2x upsampling."""
        B, H, W, C = self.shape
        y = np.repeat(np.repeat(self.data, 2, axis=1), 2, axis=2)
        out = Tensor(y, _parents=(self,))
        if out.requires_grad:
            def bw(g):
                return (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),)
            out._backward = bw
        return out

    def channel_norm(self, scale, shift, eps=1e-5):
        """Normalize each channel by its own spatial mean/variance.

        Statistics are taken over the spatial axes per (batch, channel);
        scale/shift are learned per-channel parameters.
        """
        B, H, W, C = self.shape
        x = self.data
        mu = x.mean(axis=(1, 2), keepdims=True)
        var = (x * x).mean(axis=(1, 2), keepdims=True) - mu * mu
        inv = 1.0 / np.sqrt(np.maximum(var, 0.0) + eps)
        # fused affine: y = x * a + b with per-(batch, channel) coefficients
        a = inv * scale.data
        out = Tensor(x * a + (shift.data - mu * a), _parents=(self, scale, shift))
        if out.requires_grad:
            def bw(g):
                n = H * W
                xn = (x - mu) * inv
                gs = (g * xn).sum(axis=(0, 1, 2))
                gh = g.sum(axis=(0, 1, 2))
                gn = g * scale.data
                # standard normalization backward over the spatial axes
                gx = inv / n * (n * gn
                                - gn.sum(axis=(1, 2), keepdims=True)
                                - xn * (gn * xn).sum(axis=(1, 2), keepdims=True))
                return gx, gs, gh
            out._backward = bw
        return out

    # -- autodiff -------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a finite scalar."""
        if self.data.ndim != 0:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        if not np.isfinite(self.data):
            raise NonFiniteError("backward: loss is not finite")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        grads = {id(self): np.asarray(1.0, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                pgrads = node._backward(g)
                for p, pg in zip(node._parents, pgrads):
                    if not p.requires_grad:
                        continue
                    cur = grads.get(id(p))
                    grads[id(p)] = pg if cur is None else cur + pg
            if node._backward is None or node.name is not None:
                node.grad = g if node.grad is None else node.grad + g
        # leaves that never received gradient flow
        return None


def constant(data, dtype=np.float32):
    """A leaf that does not require gradients."""
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, name=None, dtype=np.float32):
    """A trainable leaf tensor."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def concat(tensors, axis=-1):
    """Concatenate along an axis."""
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), _parents=tuple(tensors))
    if out.requires_grad:
        sizes = [d.shape[axis] for d in datas]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            return tuple(np.split(g, splits, axis=axis))
        out._backward = bw
    return out


class ParameterSet:
    """Named trainable tensors with deterministic (sorted-name) iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.name = name
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def total_size(self):
        return sum(t.data.size for t in self._params.values())


def gradients(loss, params):
    """Gradient of a scalar loss with respect to every parameter.

    Returns a dict name -> ndarray with the parameter's shape.  Parameters
    the loss does not depend on get zero gradients.
    """
    params.zero_grad()
    loss.backward()
    out = {}
    for name, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        out[name] = g
    return out


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(grad, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _spread(grad, shape, axis, keepdims):
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(grad, shape).copy() if np.ndim(grad) == 0 else np.full(shape, grad)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for a in sorted(a % len(shape) for a in axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape).copy()
