"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Every training stage in this package runs on this engine.  The op set is
exactly what the models need: matmul (optionally batched), elementwise
arithmetic, layer norm, softmax / log-softmax, GELU / ReLU, embedding
lookup, reductions, reshapes and gathers.  Weights and activations default
to float32; reductions accumulate in float64 before casting back.

Gradients accumulate across backward() calls; call zero_grad() on the
parameters (or Tensor.zero_grad) to reset.  Non-finite values are detected
when a loss is evaluated (i.e. at backward time), not per op; the error
names the op that produced the bad value.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in the computation graph."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
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
    """A dense real tensor participating in a dynamically built graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=np.float64)
        self.grad += g

    # ------------------------------------------------------------------
    # graph construction helpers
    def _child(self, data, parents, backward, op):
        rg = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=rg, _parents=parents if rg else (),
                      _backward=backward if rg else None, op=op)

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other))

    # ------------------------------------------------------------------
    # arithmetic
    def __add__(self, other):
        other = self._wrap(other)
        out_data = self.data + other.data

        def backward(g):
            return (_unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape))

        return self._child(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = self._wrap(other)
        out_data = self.data - other.data

        def backward(g):
            return (_unbroadcast(g, self.data.shape), _unbroadcast(-g, other.data.shape))

        return self._child(out_data, (self, other), backward, "sub")

    def __neg__(self):
        return self._child(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = self._wrap(other)
        out_data = self.data * other.data
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

        return self._child(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        s = float(scalar)
        return self * (1.0 / s)

    def matmul(self, other):
        other = self._wrap(other)
        a, b = self, other
        out_data = a.data @ b.data

        def backward(g):
            if b.data.ndim == 1:
                ga = np.outer(g, b.data) if a.data.ndim == 2 else g[..., None] * b.data
                gb = (a.data * g[..., None]).sum(axis=tuple(range(a.data.ndim - 1)))
                return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))
            bt = np.swapaxes(b.data, -1, -2)
            at = np.swapaxes(a.data, -1, -2)
            if a.data.ndim == 1:
                ga = g @ bt
                gb = np.outer(a.data, g)
            else:
                ga = g @ bt
                gb = at @ g
            return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

        return self._child(out_data, (self, other), backward, "matmul")

    __matmul__ = matmul

    # ------------------------------------------------------------------
    # elementwise nonlinearities
    def relu(self):
        out_data = np.maximum(self.data, 0)
        mask = self.data > 0

        def backward(g):
            return (g * mask,)

        return self._child(out_data, (self,), backward, "relu")

    def gelu(self):
        """Tanh-approximated GELU with its exact analytic derivative."""
        x = self.data
        c = float(np.sqrt(2.0 / np.pi))
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out_data = (0.5 * x * (1.0 + t)).astype(x.dtype)

        def backward(g):
            dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
            dgelu = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
            return (g * dgelu,)

        return self._child(out_data, (self,), backward, "gelu")

    def tanh(self):
        t = np.tanh(self.data)

        def backward(g):
            return (g * (1.0 - t ** 2),)

        return self._child(t, (self,), backward, "tanh")

    def exp(self):
        e = np.exp(self.data)

        def backward(g):
            return (g * e,)

        return self._child(e, (self,), backward, "exp")

    def log(self):
        x = self.data
        with np.errstate(invalid="ignore", divide="ignore"):
            out_data = np.log(x)

        def backward(g):
            return (g / x,)

        return self._child(out_data, (self,), backward, "log")

    # ------------------------------------------------------------------
    # reductions (float64 accumulation)
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(self.data.dtype)
        shape = self.data.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(g.dtype),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return self._child(np.asarray(out_data), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n

    # ------------------------------------------------------------------
    # shape ops
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            return (g.reshape(old),)

        return self._child(out_data, (self,), backward, "reshape")

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def backward(g):
            return (g.transpose(inv),)

        return self._child(out_data, (self,), backward, "transpose")

    def swapaxes(self, a, b):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, idx):
        out_data = self.data[idx]
        shape = self.data.shape
        dtype = self.data.dtype

        def backward(g):
            full = np.zeros(shape, dtype=np.float64)
            np.add.at(full, idx, g)
            return (full.astype(dtype) if dtype != np.float64 else full,)

        return self._child(out_data, (self,), backward, "getitem")

    # ------------------------------------------------------------------
    # softmax family (last axis)
    def softmax(self):
        x = self.data
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        p = e / e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)

        def backward(g):
            dot = (g * p).sum(axis=-1, keepdims=True)
            return (p * (g - dot),)

        return self._child(p.astype(x.dtype), (self,), backward, "softmax")

    def log_softmax(self):
        x = self.data
        m = x.max(axis=-1, keepdims=True)
        z = x - m
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.dtype)
        out_data = z - lse
        p = np.exp(out_data)

        def backward(g):
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return self._child(out_data, (self,), backward, "log_softmax")

    # ------------------------------------------------------------------
    def backward(self):
        """Backpropagate from a scalar loss to every reachable parameter.

        Raises NonFiniteError naming the op if any node in the graph holds
        a NaN/Inf, and ValueError if the loss is not a scalar.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")

        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        for node in topo:
            if not np.all(np.isfinite(node.data)):
                raise NonFiniteError(node.op)

        grads = {id(self): np.ones_like(self.data, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.accumulate_grad(g)
                continue
            parent_grads = node._backward(g.astype(node.data.dtype) if node.data.dtype == np.float32 else g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if id(p) in grads:
                    grads[id(p)] += pg
                else:
                    grads[id(p)] = pg


# ----------------------------------------------------------------------
# free functions


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros(table.data.shape, dtype=np.float64)
        np.add.at(full, ids, g)
        return (full,)

    return table._child(out_data, (table,), backward, "embedding")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
    xc = xd - mu
    var = (xc.astype(np.float64) ** 2).mean(axis=-1, keepdims=True).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def backward(g):
        g_gain = _unbroadcast(g * xhat, gain.data.shape)
        g_bias = _unbroadcast(g, bias.data.shape)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, g_gain, g_bias)

    return x._child(out_data, (x, gain, bias), backward, "layer_norm")


def stack_pad(tensors: list, pad_value: float = 0.0) -> tuple[Tensor, np.ndarray]:
    """Stack variable-length [T_i, D] tensors into [B, Tmax, D] plus a bool
    validity mask [B, Tmax]. Gradient routes back to each input slice."""
    if not tensors:
        raise ValueError("stack_pad of empty list")
    lens = [t.data.shape[0] for t in tensors]
    tmax = max(lens)
    b = len(tensors)
    d = tensors[0].data.shape[1]
    dtype = tensors[0].data.dtype
    out_data = np.full((b, tmax, d), pad_value, dtype=dtype)
    mask = np.zeros((b, tmax), dtype=bool)
    for i, t in enumerate(tensors):
        out_data[i, :lens[i]] = t.data
        mask[i, :lens[i]] = True

    def backward(g):
        return tuple(g[i, :lens[i]] for i in range(b))

    rg = any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=rg,
                 _parents=tuple(tensors) if rg else (),
                 _backward=backward if rg else None, op="stack_pad")
    return out, mask


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Strided 1-D convolution: x [T, Cin], weight [k, Cin, Cout] -> [T', Cout].

    T' = floor((T - k) / stride) + 1; no padding. Raises ValueError when the
    input is shorter than the kernel.
    """
    xd = x.data
    k, cin, cout = weight.data.shape
    t = xd.shape[0]
    if t < k:
        raise ValueError(f"input length {t} shorter than kernel {k}")
    t_out = (t - k) // stride + 1
    # windows [T', k, Cin] via stride tricks (read-only view)
    s0, s1 = xd.strides
    win = np.lib.stride_tricks.as_strided(xd, shape=(t_out, k, cin),
                                          strides=(s0 * stride, s0, s1), writeable=False)
    out_data = np.tensordot(win, weight.data, axes=([1, 2], [0, 1])) + bias.data
    out_data = out_data.astype(xd.dtype)

    def backward(g):
        gw = np.tensordot(win, g, axes=([0], [0]))          # [k, Cin, Cout]
        gb = g.sum(axis=0)
        gx = np.zeros_like(xd, dtype=np.float64)
        # scatter each window's contribution back
        contrib = np.tensordot(g, weight.data, axes=([1], [2]))  # [T', k, Cin]
        for i in range(t_out):
            gx[i * stride:i * stride + k] += contrib[i]
        return (gx.astype(xd.dtype) if xd.dtype != np.float64 else gx, gw, gb)

    return x._child(out_data, (x, weight, bias), backward, "conv1d")


def label_smoothed_xent(logits: Tensor, targets: np.ndarray, eps: float,
                        mask: np.ndarray | None = None) -> Tensor:
    """Mean label-smoothed cross-entropy over unmasked positions.

    logits: [T, V]; targets: int ids [T]; mask: bool [T] (True = counted).
    Per position: -sum_k q(k) log p(k) with q = (1-eps)*onehot + eps/V.
    """
    targets = np.asarray(targets)
    t, v = logits.data.shape
    if targets.shape != (t,):
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {t}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("target id out of range")
    if mask is None:
        mask = np.ones(t, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("all positions masked out of the loss")

    x = logits.data.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    per_pos = -((1.0 - eps) * logp[np.arange(t), targets] + (eps / v) * logp.sum(axis=-1))
    loss = per_pos[mask].sum() / n

    def backward(g):
        p = np.exp(logp)
        q = np.full((t, v), eps / v)
        q[np.arange(t), targets] += 1.0 - eps
        grad = (p - q) * mask[:, None] / n
        return (grad * g,)

    return logits._child(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "label_smoothed_xent")
