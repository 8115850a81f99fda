"""Transformer building blocks (pre-LN) shared by the acoustic encoder, the
translation decoder and the neural language model.

Parameters live in a flat dict name -> Tensor so checkpoints can serialize
every model the same way.  Forward functions rebuild the autograd graph on
each call; attention masks are plain numpy additive biases (0 for visible,
-1e9 for hidden)."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, layer_norm

NEG_BIAS = -1e9


def init_param(params: dict, name: str, shape: tuple, rng: np.random.Generator,
               scale: float | None = None) -> Tensor:
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        scale = 1.0 / np.sqrt(max(fan_in, 1))
    t = Tensor(rng.normal(0.0, scale, size=shape).astype(np.float32), requires_grad=True)
    params[name] = t
    return t


def init_zeros(params: dict, name: str, shape: tuple) -> Tensor:
    t = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
    params[name] = t
    return t


def init_ones(params: dict, name: str, shape: tuple) -> Tensor:
    t = Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)
    params[name] = t
    return t


def init_linear(params: dict, prefix: str, din: int, dout: int, rng) -> None:
    init_param(params, prefix + ".w", (din, dout), rng)
    init_zeros(params, prefix + ".b", (dout,))


def apply_linear(params: dict, prefix: str, x: Tensor) -> Tensor:
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


def init_layernorm(params: dict, prefix: str, dim: int) -> None:
    init_ones(params, prefix + ".g", (dim,))
    init_zeros(params, prefix + ".b", (dim,))


def apply_layernorm(params: dict, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def pad_bias(valid: np.ndarray) -> np.ndarray:
    """[B, T] validity mask -> additive attention bias [B, 1, 1, T]."""
    return np.where(valid[:, None, None, :], 0.0, NEG_BIAS).astype(np.float32)


def causal_bias(t: int) -> np.ndarray:
    """Additive bias [1, 1, T, T] hiding future positions."""
    b = np.triu(np.full((t, t), NEG_BIAS, dtype=np.float32), k=1)
    return b[None, None]


def init_attention(params: dict, prefix: str, dim: int, rng) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{proj}", dim, dim, rng)


def apply_attention(params: dict, prefix: str, n_heads: int,
                    x_q: Tensor, x_kv: Tensor, bias: np.ndarray) -> Tensor:
    """Multi-head scaled dot-product attention. x_q [B,Tq,D], x_kv [B,Tk,D]."""
    b, tq, d = x_q.shape
    tk = x_kv.shape[1]
    dh = d // n_heads
    q = apply_linear(params, f"{prefix}.q", x_q).reshape(b, tq, n_heads, dh).transpose((0, 2, 1, 3))
    k = apply_linear(params, f"{prefix}.k", x_kv).reshape(b, tk, n_heads, dh).transpose((0, 2, 1, 3))
    v = apply_linear(params, f"{prefix}.v", x_kv).reshape(b, tk, n_heads, dh).transpose((0, 2, 1, 3))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    attn = (scores + bias).softmax()
    ctx = (attn @ v).transpose((0, 2, 1, 3)).reshape(b, tq, d)
    return apply_linear(params, f"{prefix}.o", ctx)


def init_ffn(params: dict, prefix: str, dim: int, inner: int, rng) -> None:
    init_linear(params, prefix + ".in", dim, inner, rng)
    init_linear(params, prefix + ".out", inner, dim, rng)


def apply_ffn(params: dict, prefix: str, x: Tensor) -> Tensor:
    return apply_linear(params, prefix + ".out", apply_linear(params, prefix + ".in", x).gelu())


def init_block(params: dict, prefix: str, dim: int, n_heads: int, inner: int,
               rng, cross: bool = False) -> None:
    init_layernorm(params, prefix + ".ln1", dim)
    init_attention(params, prefix + ".attn", dim, rng)
    if cross:
        init_layernorm(params, prefix + ".lnx", dim)
        init_attention(params, prefix + ".xattn", dim, rng)
    init_layernorm(params, prefix + ".ln2", dim)
    init_ffn(params, prefix + ".ffn", dim, inner, rng)


def apply_block(params: dict, prefix: str, n_heads: int, x: Tensor,
                self_bias: np.ndarray,
                memory: Tensor | None = None,
                mem_bias: np.ndarray | None = None) -> Tensor:
    h = apply_layernorm(params, prefix + ".ln1", x)
    x = x + apply_attention(params, prefix + ".attn", n_heads, h, h, self_bias)
    if memory is not None:
        h = apply_layernorm(params, prefix + ".lnx", x)
        x = x + apply_attention(params, prefix + ".xattn", n_heads, h, memory, mem_bias)
    h = apply_layernorm(params, prefix + ".ln2", x)
    return x + apply_ffn(params, prefix + ".ffn", h)


def positions(params: dict, name: str, t: int) -> Tensor:
    """Learned absolute positional embeddings for a length-t window."""
    table = params[name]
    if t > table.shape[0]:
        raise ValueError(f"sequence length {t} exceeds positional table {table.shape[0]}")
    return table[:t]
