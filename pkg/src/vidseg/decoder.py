"""The full model: a toy per-frame pixel encoder, a stack of masked-attention
decoder layers over the flattened spatio-temporal grid, and the two
prediction heads (per-query 3D masks via an embedding dot product, classes
via a linear layer).

Object queries are shared across all frames, so one query's mask over
T x H x W is a track: the model segments and associates instances in a
single forward pass, for any clip length. Layer l's attention footprint is
the binarized mask predicted at layer l-1; layer 0's prediction comes from
the raw query embeddings so that the first decoder layer always has a mask
source.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (
    CrossAttentionLayer,
    FeedForwardLayer,
    LayerNorm,
    Linear,
    Mlp,
    SelfAttentionLayer,
    build_attention_mask,
)
from .posenc import combined_3d
from .tensor import Tensor, bilinear_matrix, resize_bilinear, load_tensor, save_tensor


@dataclass
class ModelConfig:
    """Desk-scale defaults; channels must divide evenly into heads."""

    num_queries: int = 10
    channels: int = 64
    num_layers: int = 3
    heads: int = 4
    num_classes: int = 2
    feature_resolutions: tuple = ((16, 16),)
    mask_resolution: tuple = (32, 32)
    ffn_multiplier: int = 4
    patch: int = 4
    encoder_convs: int = 1
    temporal_pe: bool = True

    def __post_init__(self):
        self.feature_resolutions = tuple(tuple(r) for r in self.feature_resolutions)
        self.mask_resolution = tuple(self.mask_resolution)
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.channels % self.heads != 0:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")

    def resolution_for_layer(self, layer_index: int) -> tuple[int, int]:
        """Feature resolution used by decoder layer `layer_index` (1-based),
        cycling through the configured list."""
        return self.feature_resolutions[(layer_index - 1) % len(self.feature_resolutions)]


@dataclass
class FeatureVolume:
    """Pixel embeddings for mask prediction plus per-resolution attention features."""

    e_pixel: Tensor                      # [T, Hm, Wm, C]
    attention: dict                      # (H_l, W_l) -> Tensor[T, H_l, W_l, C]


@dataclass
class DecoderState:
    """Predictions attached to the query features after a given layer."""

    layer_index: int
    x: Tensor             # [N, C]
    class_logits: Tensor  # [N, K+1]; slot K is "no object"
    mask_logits: Tensor   # [N, T, Hm, Wm]
    masks: Tensor         # sigmoid(mask_logits), in (0, 1)


@dataclass
class InstanceResult:
    """One scored track: a class, a confidence and a binary 3D mask, all
    produced by a single query across every frame."""

    class_id: int
    score: float
    mask: np.ndarray      # uint8 [T, H, W]
    query_index: int


def resize_features(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Differentiable bilinear resize of a [T,H,W,C] feature map, expressed
    as matmuls with constant interpolation matrices."""
    t, h, w, c = x.shape
    h2, w2 = out_hw
    out = x
    if h2 != h:
        rh = Tensor(bilinear_matrix(h, h2, dtype=x.data.dtype))
        y = T.reshape(T.transpose(out, (1, 0, 2, 3)), (h, t * w * c))
        y = T.reshape(T.matmul(rh, y), (h2, t, w, c))
        out = T.transpose(y, (1, 0, 2, 3))
    if w2 != w:
        rw = Tensor(bilinear_matrix(w, w2, dtype=x.data.dtype))
        y = T.reshape(T.transpose(out, (2, 0, 1, 3)), (w, t * h2 * c))
        y = T.reshape(T.matmul(rw, y), (w2, t, h2, c))
        out = T.transpose(y, (1, 2, 0, 3))
    return out


class PixelEncoder:
    """Per-frame local feature extractor with weights shared across frames.

    Patch embedding -> 3x3 conv (as unfold + linear) with a residual, then
    bilinear resampling to the mask resolution and each attention
    resolution. No cross-frame mixing happens here; all temporal reasoning
    lives in the decoder.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        c = config.channels
        p = config.patch
        self.config = config
        self.dtype = dtype
        self.stem = Linear(3 * p * p, c, rng, dtype)
        self.norm1 = LayerNorm(c, dtype)
        self.convs = [(Linear(9 * c, c, rng, dtype), LayerNorm(c, dtype))
                      for _ in range(config.encoder_convs)]
        self.mask_proj = Linear(c, c, rng, dtype)

    def __call__(self, clip: np.ndarray) -> FeatureVolume:
        if clip.ndim != 4 or clip.shape[3] != 3:
            raise ValueError(f"clip must be [T,H,W,3], got {clip.shape}")
        t, hh, ww, _ = clip.shape
        if t < 1:
            raise ValueError("empty clip")
        p = self.config.patch
        if hh % p or ww % p:
            raise ValueError(f"frame size {hh}x{ww} not divisible by patch size {p}")
        hb, wb = hh // p, ww // p
        c = self.config.channels
        patches = (clip.reshape(t, hb, p, wb, p, 3)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(t * hb * wb, p * p * 3))
        x = Tensor(patches.astype(self.dtype))
        y = T.relu(self.norm1(self.stem(x)))
        base = T.reshape(y, (t, hb, wb, c))
        for conv, norm in self.convs:
            z = conv(T.reshape(T.unfold3x3(base), (t * hb * wb, 9 * c)))
            z = T.relu(norm(z))
            base = base + T.reshape(z, (t, hb, wb, c))

        hm, wm = self.config.mask_resolution
        em = resize_features(base, (hm, wm))
        e_pixel = T.reshape(self.mask_proj(T.reshape(em, (t * hm * wm, c))), (t, hm, wm, c))
        attention = {res: resize_features(base, res)
                     for res in dict.fromkeys(self.config.feature_resolutions)}
        return FeatureVolume(e_pixel=e_pixel, attention=attention)

    def named_parameters(self, prefix: str = ""):
        yield from self.stem.named_parameters(f"{prefix}stem.")
        yield from self.norm1.named_parameters(f"{prefix}norm1.")
        for i, (conv, norm) in enumerate(self.convs):
            yield from conv.named_parameters(f"{prefix}convs.{i}.conv.")
            yield from norm.named_parameters(f"{prefix}convs.{i}.norm.")
        yield from self.mask_proj.named_parameters(f"{prefix}mask_proj.")


class DecoderLayer:
    """Masked cross-attention -> self-attention -> feed-forward, all residual."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, rng, dtype=np.float32):
        self.cross = CrossAttentionLayer(dim, heads, rng, dtype)
        self.self_attn = SelfAttentionLayer(dim, heads, rng, dtype)
        self.ffn = FeedForwardLayer(dim, ffn_hidden, rng, dtype)

    def __call__(self, x, features, mask, pos):
        x = self.cross(x, features, mask, pos)
        x = self.self_attn(x)
        return self.ffn(x)

    def named_parameters(self, prefix: str = ""):
        for name, mod in [("cross", self.cross), ("self_attn", self.self_attn), ("ffn", self.ffn)]:
            yield from mod.named_parameters(f"{prefix}{name}.")


def _mask_logits(x: Tensor, e_pixel: Tensor, head: Mlp) -> Tensor:
    t, h, w, c = e_pixel.shape
    if x.shape[1] != c:
        raise ValueError(f"query width {x.shape[1]} != pixel embedding width {c}")
    e_mask = head(x)
    pix = T.transpose(T.reshape(e_pixel, (t * h * w, c)), (1, 0))
    return T.reshape(T.matmul(e_mask, pix), (x.shape[0], t, h, w))


def predict_masks(x: Tensor, e_pixel: Tensor, head: Mlp) -> Tensor:
    """Per-query mask probabilities over the full T x H x W volume:
    sigmoid of dot(E_mask[n], E_pixel[t,h,w])."""
    return T.sigmoid(_mask_logits(x, e_pixel, head))


def predict_classes(x: Tensor, head: Linear) -> Tensor:
    """K+1 class logits per query; the extra slot means "no object"."""
    return head(x)


class Model:
    """Query-based video instance segmentation model."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = dtype
        c = config.channels
        self.encoder = PixelEncoder(config, rng, dtype)
        self.query_embed = Tensor(rng.standard_normal((config.num_queries, c)),
                                  requires_grad=True, dtype=dtype)
        self.layers = [DecoderLayer(c, config.heads, config.ffn_multiplier * c, rng, dtype)
                       for _ in range(config.num_layers)]
        self.decoder_norm = LayerNorm(c, dtype)
        self.class_head = Linear(c, config.num_classes + 1, rng, dtype)
        self.mask_head = Mlp([c, c, c, c], rng, dtype)

    # ------------------------------------------------------------------

    def named_parameters(self):
        yield "query_embed", self.query_embed
        yield from self.encoder.named_parameters("encoder.")
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"layers.{i}.")
        yield from self.decoder_norm.named_parameters("decoder_norm.")
        yield from self.class_head.named_parameters("class_head.")
        yield from self.mask_head.named_parameters("mask_head.")

    def parameter_groups(self):
        """(name, tensor, is_backbone) triples; the pixel encoder is the backbone."""
        for name, p in self.named_parameters():
            yield name, p, name.startswith("encoder.")

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    # ------------------------------------------------------------------

    def _positional(self, t: int, res: tuple[int, int]) -> Tensor:
        pe = combined_3d(t, res[0], res[1], self.config.channels, dtype=self.dtype)
        if self.config.temporal_pe:
            e = pe.e_pos.data
        else:
            e = np.broadcast_to(pe.e_pos_xy.data, (t,) + pe.e_pos_xy.shape[1:])
        return Tensor(e.reshape(t * res[0] * res[1], self.config.channels).copy(), dtype=self.dtype)

    def _predict(self, layer_index: int, x: Tensor, fv: FeatureVolume) -> DecoderState:
        xn = self.decoder_norm(x)
        class_logits = predict_classes(xn, self.class_head)
        mask_logits = _mask_logits(xn, fv.e_pixel, self.mask_head)
        return DecoderState(layer_index=layer_index, x=x, class_logits=class_logits,
                            mask_logits=mask_logits, masks=T.sigmoid(mask_logits))

    def forward(self, clip: np.ndarray) -> list[DecoderState]:
        """Run the decoder over a whole clip; returns L+1 states, index 0
        holding the pre-decoder predictions from the raw query embeddings."""
        clip = np.asarray(clip)
        if not np.isfinite(clip).all():
            raise ValueError("clip contains non-finite values")
        fv = self.encoder(clip)
        t = clip.shape[0]
        c = self.config.channels
        pos = {res: self._positional(t, res) for res in fv.attention}
        feats2d = {res: T.reshape(f, (t * res[0] * res[1], c)) for res, f in fv.attention.items()}

        states = [self._predict(0, self.query_embed, fv)]
        x = self.query_embed
        for l in range(1, self.config.num_layers + 1):
            res = self.config.resolution_for_layer(l)
            mask = build_attention_mask(states[-1].masks.data, res, source_layer=l - 1)
            x = self.layers[l - 1](x, feats2d[res], mask, pos[res])
            states.append(self._predict(l, x, fv))
        return states


def extract_instances(state: DecoderState, top_k: int = 10, frame_hw: tuple[int, int] | None = None):
    """Top-scoring (query, class) pairs as binarized 3D instance tracks.

    The score of a pair is the class-softmax probability with the no-object
    slot excluded; masks binarize at 0.5, optionally after bilinear
    upsampling to the output frame resolution. One query contributes one
    track across all frames.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    logits = state.class_logits.data.astype(np.float64)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    scores = probs[:, :-1]
    n, k = scores.shape
    flat = scores.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:top_k]
    results = []
    for idx in order:
        qi, ci = divmod(int(idx), k)
        prob = state.masks.data[qi]
        if frame_hw is not None and tuple(frame_hw) != prob.shape[1:]:
            prob = resize_bilinear(prob.astype(np.float32), tuple(frame_hw))
        results.append(InstanceResult(class_id=ci, score=float(flat[idx]),
                                      mask=(prob >= 0.5).astype(np.uint8), query_index=qi))
    return results


# ----------------------------------------------------------------------
# checkpoints: a directory of named tensor files plus a JSON config


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.config)
    cfg["dtype"] = "f64" if model.dtype == np.float64 else "f32"
    (path / "config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    for name, p in model.named_parameters():
        save_tensor(path / "params" / f"{name}.tns", p.data)


def load_checkpoint(path) -> Model:
    path = Path(path)
    raw = json.loads((path / "config.json").read_text())
    dtype = np.float64 if raw.pop("dtype", "f32") == "f64" else np.float32
    model = Model(ModelConfig(**raw), seed=0, dtype=dtype)
    for name, p in model.named_parameters():
        arr = load_tensor(path / "params" / f"{name}.tns").astype(dtype, copy=False)
        if arr.shape != p.shape:
            raise ValueError(f"checkpoint parameter {name}: shape {arr.shape} != expected {p.shape}")
        p.data = arr
    return model
