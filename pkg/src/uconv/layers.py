"""Conformer block and its sublayers.

Shapes are ``[B, T, d]`` throughout; ``lengths`` is an int array of per-utterance
valid frame counts.  Frames at or beyond an utterance's length are padding and
never influence valid outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor


@dataclass(frozen=True)
class ConformerLayerConfig:
    attn_dim: int = 280
    heads: int = 8
    ffn_dim: int = 1024
    conv_kernel: int = 5
    dropout: float = 0.1
    pos_enc: str = "rel"  # "rel" (Transformer-XL style) or "abs" (sinusoidal added at the input)

    def __post_init__(self):
        if self.attn_dim % self.heads:
            raise ValueError(f"attn_dim {self.attn_dim} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pos_enc not in ("rel", "abs"):
            raise ValueError(f"pos_enc must be 'rel' or 'abs', got {self.pos_enc!r}")


def padding_mask(lengths, T: int) -> np.ndarray:
    """Boolean ``[B, T]`` array, true on padded frames."""
    lengths = np.asarray(lengths)
    if np.any(lengths > T):
        raise nx.ShapeError(f"valid lengths {lengths.tolist()} exceed padded extent {T}")
    if np.any(lengths < 1):
        raise nx.ShapeError(f"valid lengths must be >= 1, got {lengths.tolist()}")
    return np.arange(T)[None, :] >= lengths[:, None]


def zero_padding(x: Tensor, lengths) -> Tensor:
    mask = padding_mask(lengths, x.shape[1])
    if not mask.any():
        return x
    return nx.masked_fill(x, mask[:, :, None], 0.0)


class Module:
    """Minimal container: parameters and submodules are discovered from attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, (list, tuple)):
                        for j, sub in enumerate(item):
                            yield from sub.named_parameters(f"{name}.{i}.{j}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.weight = Parameter(_uniform(rng, (kernel, c_in, c_out), kernel * c_in))
        self.bias = Parameter(np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = kernel * kernel * c_in
        self.weight = Parameter(_uniform(rng, (kernel, kernel, c_in, c_out), fan_in))
        self.bias = Parameter(np.zeros(c_out))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    eps = 1e-5

    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """Pre-norm position-wise FFN; the block adds it back with weight 0.5."""

    def __init__(self, cfg: ConformerLayerConfig, rng: np.random.Generator):
        self.norm = LayerNorm(cfg.attn_dim)
        self.linear1 = Linear(cfg.attn_dim, cfg.ffn_dim, rng)
        self.linear2 = Linear(cfg.ffn_dim, cfg.attn_dim, rng)
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        h = nx.swish(self.linear1(self.norm(x)))
        h = nx.dropout(h, self.rate, rng, training)
        return self.linear2(h)


_pos_cache: dict = {}


def relative_positions(T: int, d: int, dtype) -> np.ndarray:
    """Sinusoidal embeddings of distances T-1, T-2, ..., -(T-1): ``[2T-1, d]``."""
    key = (T, d, np.dtype(dtype).str)
    table = _pos_cache.get(key)
    if table is None:
        table = nx.sinusoid_table(np.arange(T - 1, -T, -1), d, dtype)
        if len(_pos_cache) > 64:
            _pos_cache.clear()
        _pos_cache[key] = table
    return table


class MultiHeadSelfAttention(Module):
    """Pre-norm multi-head self-attention.

    With ``pos_enc="rel"`` the logits are the sum of a content term
    ``(q + u) k^T`` and a position term ``(q + v) p^T`` over projected relative
    sinusoids, as in Transformer-XL.  Padded keys get ``-inf`` logits.
    """

    def __init__(self, cfg: ConformerLayerConfig, rng: np.random.Generator):
        d, h = cfg.attn_dim, cfg.heads
        self.heads, self.d_k = h, d // h
        self.norm = LayerNorm(d)
        self.linear_q = Linear(d, d, rng)
        self.linear_k = Linear(d, d, rng)
        self.linear_v = Linear(d, d, rng)
        self.linear_out = Linear(d, d, rng)
        self.relative = cfg.pos_enc == "rel"
        if self.relative:
            self.linear_pos = Linear(d, d, rng, bias=False)
            self.pos_bias_u = Parameter(np.zeros((h, self.d_k)))
            self.pos_bias_v = Parameter(np.zeros((h, self.d_k)))
        self.rate = cfg.dropout
        self.keep_attention = False
        self.last_attention = None

    def _heads(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, lengths, training: bool = False, rng=None) -> Tensor:
        B, T, d = x.shape
        pad = padding_mask(lengths, T)
        xn = self.norm(x)
        q, k, v = self._heads(self.linear_q(xn)), self._heads(self.linear_k(xn)), self._heads(self.linear_v(xn))
        kt = nx.swap_last(k)
        scale = 1.0 / math.sqrt(self.d_k)
        if self.relative:
            pos = Tensor(relative_positions(T, d, x.dtype))
            p = self.linear_pos(pos).reshape(2 * T - 1, self.heads, self.d_k).transpose(1, 2, 0)
            q_u = (q + self.pos_bias_u.reshape(self.heads, 1, self.d_k)) * scale
            q_v = (q + self.pos_bias_v.reshape(self.heads, 1, self.d_k)) * scale
            scores = q_u @ kt + nx.rel_shift(q_v @ p)
        else:
            scores = (q * scale) @ kt
        if pad.any():
            scores = nx.masked_fill(scores, pad[:, None, None, :], -np.inf)
        attn = nx.softmax(scores, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        return nx.dropout(self.linear_out(ctx), self.rate, rng, training)


class ConvModule(Module):
    def __init__(self, cfg: ConformerLayerConfig, rng: np.random.Generator):
        d, k = cfg.attn_dim, cfg.conv_kernel
        self.norm = LayerNorm(d)
        self.pointwise1 = Linear(d, 2 * d, rng)
        self.depthwise_weight = Parameter(_uniform(rng, (k, d), k))
        self.depthwise_bias = Parameter(np.zeros(d))
        self.norm2 = LayerNorm(d)  # stands in for batch norm
        self.pointwise2 = Linear(d, d, rng)
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, lengths, training: bool = False, rng=None) -> Tensor:
        h = nx.glu(self.pointwise1(self.norm(x)))
        h = zero_padding(h, lengths)
        h = nx.depthwise_conv1d(h, self.depthwise_weight, self.depthwise_bias)
        h = nx.swish(self.norm2(h))
        return nx.dropout(self.pointwise2(h), self.rate, rng, training)


class ConformerBlock(Module):
    """Macaron FFN / self-attention / convolution / FFN, each residual, then a final norm."""

    def __init__(self, cfg: ConformerLayerConfig, rng: np.random.Generator):
        self.ffn1 = FeedForward(cfg, rng)
        self.mhsa = MultiHeadSelfAttention(cfg, rng)
        self.conv = ConvModule(cfg, rng)
        self.ffn2 = FeedForward(cfg, rng)
        self.final_norm = LayerNorm(cfg.attn_dim)
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, lengths, training: bool = False, rng=None) -> Tensor:
        x = x + 0.5 * nx.dropout(self.ffn1(x, training, rng), self.rate, rng, training)
        x = x + self.mhsa(x, lengths, training, rng)
        x = x + self.conv(x, lengths, training, rng)
        x = x + 0.5 * nx.dropout(self.ffn2(x, training, rng), self.rate, rng, training)
        return self.final_norm(x)


def ffn_params(d: int, ffn: int) -> int:
    return 2 * d * ffn + ffn + d + 2 * d


def mhsa_params(d: int, heads: int, relative: bool = True) -> int:
    n = 4 * (d * d + d) + 2 * d
    if relative:
        n += d * d + 2 * d  # position projection and the two per-head biases
    return n


def conv_module_params(d: int, kernel: int) -> int:
    return (d * 2 * d + 2 * d) + (kernel * d + d) + 2 * d + (d * d + d) + 2 * d


def block_params(cfg: ConformerLayerConfig) -> int:
    d = cfg.attn_dim
    return (2 * ffn_params(d, cfg.ffn_dim) + mhsa_params(d, cfg.heads, cfg.pos_enc == "rel")
            + conv_module_params(d, cfg.conv_kernel) + 2 * d)
