"""Masked cross-attention over the flattened spatio-temporal token grid,
plus the standard self-attention and feed-forward sublayers.

A decoder layer restricts each query's cross-attention to the foreground
its previous-layer mask predicted: the binarized, resized mask becomes an
additive 0/-inf matrix on the attention scores, applied jointly over all
T*H*W tokens in a single softmax (time is never factored out). Queries
whose predicted mask is empty fall back to an unrestricted row so the
softmax stays well-defined.

All sublayers are pre-norm residual blocks; attention is multi-head scaled
dot-product with an output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NEG_INF, Tensor, resize_bilinear


# ----------------------------------------------------------------------
# parameterized primitives shared with the decoder


class Linear:
    """Affine map y = x W + b on row-major 2D inputs."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        self.w = Tensor(rng.uniform(-limit, limit, (in_dim, out_dim)), requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b

    def named_parameters(self, prefix: str = ""):
        yield prefix + "w", self.w
        yield prefix + "b", self.b


class LayerNorm:
    """Per-row normalization over the channel axis with learned scale/shift."""

    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.g = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.g + self.b

    def named_parameters(self, prefix: str = ""):
        yield prefix + "g", self.g
        yield prefix + "b", self.b


class Mlp:
    """Stack of Linear layers with ReLU between them."""

    def __init__(self, dims: list[int], rng: np.random.Generator, dtype=np.float32):
        self.layers = [Linear(dims[i], dims[i + 1], rng, dtype) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = T.relu(x)
        return x

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}.")


# ----------------------------------------------------------------------
# the 3D attention mask


@dataclass
class AttentionMask3D:
    """Additive attention mask over flattened (t, x, y) token positions.

    ``additive[n, j]`` is 0 where query n may attend and NEG_INF where it
    may not; rows that would be entirely masked are replaced by all-zero
    (fully open) rows.
    """

    additive: np.ndarray
    source_layer: int = -1


def build_attention_mask(mask_prob, target_hw: tuple[int, int], source_layer: int = -1) -> AttentionMask3D:
    """Binarize a [N,T,H,W] mask prediction into the additive attention mask.

    Probabilities are bilinearly resized per frame to the attention
    resolution (the time axis is never resampled), thresholded at >= 0.5,
    and flattened over (t, x, y) row-major.
    """
    arr = mask_prob.data if isinstance(mask_prob, Tensor) else np.asarray(mask_prob)
    if arr.ndim != 4:
        raise ValueError(f"mask probabilities must be [N,T,H,W], got {arr.shape}")
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
        raise ValueError("mask probabilities must lie in [0, 1]")
    h_t, w_t = target_hw
    if h_t < 1 or w_t < 1:
        raise ValueError(f"target resolution must be positive, got {target_hw}")
    n, t = arr.shape[:2]
    if arr.shape[2:] != (h_t, w_t):
        arr = resize_bilinear(arr, (h_t, w_t))
    keep = (arr >= 0.5).reshape(n, t * h_t * w_t)
    additive = np.where(keep, 0.0, NEG_INF).astype(np.float32)
    empty = ~keep.any(axis=1)
    additive[empty] = 0.0
    return AttentionMask3D(additive=additive, source_layer=source_layer)


@dataclass
class AttentionWeights:
    """Post-softmax attention weights, one [N, tokens] matrix per head."""

    per_head: Tensor


# ----------------------------------------------------------------------
# attention cores


def _split_heads(x: Tensor, heads: int) -> Tensor:
    rows, c = x.shape
    return T.transpose(T.reshape(x, (rows, heads, c // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, rows, ch = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (rows, h * ch))


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                     additive: np.ndarray | None = None) -> tuple[Tensor, AttentionWeights]:
    """Multi-head scaled dot-product attention.

    q is [Nq,C], k and v are [Nk,C]; the optional additive mask [Nq,Nk]
    broadcasts over heads. Returns the merged [Nq,C] output and the
    per-head weights.
    """
    ch = q.shape[1] // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = T.bmm(qh, T.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(ch))
    if additive is not None:
        scores = scores + Tensor(additive, dtype=scores.dtype)
    weights = T.softmax_lastdim(scores)
    out = _merge_heads(T.bmm(weights, vh))
    return out, AttentionWeights(per_head=weights)


class CrossAttentionLayer:
    """Masked cross-attention sublayer: x_out = attn(q(x), k(feat+pos), v(feat)) + x."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads != 0:
            raise ValueError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.norm = LayerNorm(dim, dtype)
        self.f_q = Linear(dim, dim, rng, dtype)
        self.f_k = Linear(dim, dim, rng, dtype)
        self.f_v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, features: Tensor, mask: AttentionMask3D | None = None,
                 pos: Tensor | None = None, return_weights: bool = False):
        if features.shape[1] != x.shape[1]:
            raise ValueError(f"feature width {features.shape[1]} != query width {x.shape[1]}")
        if x.shape[0] == 0:
            raise ValueError("no queries")
        q = self.f_q(self.norm(x))
        k = self.f_k(features + pos if pos is not None else features)
        v = self.f_v(features)
        attn, weights = scaled_attention(q, k, v, self.heads,
                                         mask.additive if mask is not None else None)
        out = self.proj(attn) + x
        return (out, weights) if return_weights else out

    def named_parameters(self, prefix: str = ""):
        for name, mod in [("norm", self.norm), ("f_q", self.f_q), ("f_k", self.f_k),
                          ("f_v", self.f_v), ("proj", self.proj)]:
            yield from mod.named_parameters(f"{prefix}{name}.")


class SelfAttentionLayer:
    """Standard pre-norm residual self-attention over the query set."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        self.heads = heads
        self.norm = LayerNorm(dim, dtype)
        self.f_q = Linear(dim, dim, rng, dtype)
        self.f_k = Linear(dim, dim, rng, dtype)
        self.f_v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm(x)
        attn, _ = scaled_attention(self.f_q(h), self.f_k(h), self.f_v(h), self.heads)
        return self.proj(attn) + x

    def named_parameters(self, prefix: str = ""):
        for name, mod in [("norm", self.norm), ("f_q", self.f_q), ("f_k", self.f_k),
                          ("f_v", self.f_v), ("proj", self.proj)]:
            yield from mod.named_parameters(f"{prefix}{name}.")


class FeedForwardLayer:
    """Pre-norm residual two-layer MLP."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype)
        self.lin1 = Linear(dim, hidden, rng, dtype)
        self.lin2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(self.norm(x)))) + x

    def named_parameters(self, prefix: str = ""):
        for name, mod in [("norm", self.norm), ("lin1", self.lin1), ("lin2", self.lin2)]:
            yield from mod.named_parameters(f"{prefix}{name}.")


def masked_cross_attention(x_prev: Tensor, features: Tensor, mask: AttentionMask3D | None,
                           layer: CrossAttentionLayer, pos: Tensor | None = None) -> Tensor:
    return layer(x_prev, features, mask, pos)


def self_attention(x: Tensor, layer: SelfAttentionLayer) -> Tensor:
    return layer(x)


def ffn(x: Tensor, layer: FeedForwardLayer) -> Tensor:
    return layer(x)
