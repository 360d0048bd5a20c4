"""Set-prediction training loss.

Each decoder state's per-query predictions are matched one-to-one to the
ground-truth instances by exact minimum-cost bipartite assignment; matched
queries are supervised with classification plus dense binary-mask losses
(cross-entropy and dice over the whole T x H x W volume), unmatched
queries are pushed to the "no object" class at reduced weight. With deep
supervision the same loss applies to every state in the forward pass and
the total is their sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import DecoderState
from .tensor import Tensor, resize_bilinear


@dataclass
class GroundTruthInstance:
    """One annotated instance: a class id and a binary spatio-temporal mask."""

    class_id: int
    mask: np.ndarray  # [T, H, W], values {0, 1}

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if self.mask.ndim != 3:
            raise ValueError(f"instance mask must be [T,H,W], got {self.mask.shape}")
        if not self.mask.any():
            raise ValueError("instance mask is empty")


@dataclass
class Assignment:
    """Query->ground-truth pairs; queries not listed are implicitly "no object"."""

    pairs: list  # [(query_index, gt_index), ...]


@dataclass
class LossConfig:
    """Matching and supervision weights (the same weights serve both roles)."""

    w_cls: float = 2.0
    w_bce: float = 5.0
    w_dice: float = 5.0
    no_object_weight: float = 0.1
    deep_supervision: bool = True


def hungarian_match(cost) -> Assignment:
    """Exact minimum-cost assignment of every column (ground truth) to a
    distinct row (query), by shortest augmenting paths with potentials."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be a 2D matrix, got shape {c.shape}")
    n_q, n_g = c.shape
    if n_g == 0:
        return Assignment(pairs=[])
    if n_g > n_q:
        raise ValueError(f"more ground-truth instances ({n_g}) than queries ({n_q})")
    if not np.isfinite(c).all():
        raise ValueError("costs must be finite")

    a = c.T  # rows: ground truths, columns: queries
    u = np.zeros(n_g + 1)
    v = np.zeros(n_q + 1)
    match_q = np.zeros(n_q + 1, dtype=np.int64)  # query j -> gt (1-based), 0 = free
    way = np.zeros(n_q + 1, dtype=np.int64)
    for i in range(1, n_g + 1):
        match_q[0] = i
        j0 = 0
        minv = np.full(n_q + 1, np.inf)
        used = np.zeros(n_q + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_q[j0]
            delta, j1 = np.inf, -1
            for j in range(1, n_q + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n_q + 1):
                if used[j]:
                    u[match_q[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_q[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_q[j0] = match_q[j1]
            j0 = j1
    pairs = [(j - 1, int(match_q[j]) - 1) for j in range(1, n_q + 1) if match_q[j]]
    pairs.sort(key=lambda p: p[1])
    return Assignment(pairs=pairs)


def downsample_mask(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear-resize a binary [T,H,W] mask and re-threshold at 0.5."""
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape[1:] == tuple(out_hw):
        return mask
    return (resize_bilinear(mask, tuple(out_hw)) >= 0.5).astype(np.float32)


def _class_probs(state: DecoderState) -> np.ndarray:
    logits = state.class_logits.data.astype(np.float64)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _match_cost_arrays(state: DecoderState, gt_classes: np.ndarray,
                       gt_small: np.ndarray, cfg: LossConfig) -> np.ndarray:
    n = state.mask_logits.shape[0]
    t, hm, wm = state.mask_logits.shape[1:]
    vol = t * hm * wm
    z = state.mask_logits.data.reshape(n, vol).astype(np.float64)
    y = gt_small.reshape(gt_small.shape[0], vol).astype(np.float64)

    cls_cost = -_class_probs(state)[:, gt_classes]

    softplus = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    bce = (softplus.sum(axis=1)[:, None] - z @ y.T) / vol

    p = 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))
    inter = p @ y.T
    dice = 1.0 - (2.0 * inter + 1.0) / (p.sum(axis=1)[:, None] + y.sum(axis=1)[None, :] + 1.0)

    return cfg.w_cls * cls_cost + cfg.w_bce * bce + cfg.w_dice * dice


def match_cost(state: DecoderState, targets, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """[N, G] matching costs: w_cls * (-p[class_g]) + w_bce * BCE + w_dice * Dice,
    with the mask terms computed over the full prediction volume."""
    t, hm, wm = state.mask_logits.shape[1:]
    gt_small = np.stack([downsample_mask(tg.mask, (hm, wm)) for tg in targets])
    gt_classes = np.array([tg.class_id for tg in targets], dtype=np.int64)
    return _match_cost_arrays(state, gt_classes, gt_small, cfg)


def _state_loss(state: DecoderState, gt_small, gt_classes, cfg: LossConfig) -> Tensor:
    n, k_plus1 = state.class_logits.shape
    dtype = state.class_logits.data.dtype
    num_gt = 0 if gt_small is None else gt_small.shape[0]

    pairs = []
    if num_gt:
        cost = _match_cost_arrays(state, gt_classes, gt_small, cfg)
        pairs = hungarian_match(cost).pairs

    target_class = np.full(n, k_plus1 - 1, dtype=np.int64)
    class_weight = np.full(n, cfg.no_object_weight, dtype=np.float64)
    for q, g in pairs:
        target_class[q] = gt_classes[g]
        class_weight[q] = 1.0
    pick = np.zeros((n, k_plus1), dtype=np.float64)
    pick[np.arange(n), target_class] = class_weight
    logp = T.log_softmax_lastdim(state.class_logits)
    ce = (logp * Tensor(-pick / class_weight.sum(), dtype=dtype)).sum()
    loss = cfg.w_cls * ce

    if pairs:
        t, hm, wm = state.mask_logits.shape[1:]
        vol = t * hm * wm
        q_idx = [q for q, _ in pairs]
        g_idx = [g for _, g in pairs]
        z = T.gather_rows(T.reshape(state.mask_logits, (n, vol)), q_idx)
        y = gt_small.reshape(num_gt, vol)[g_idx].astype(dtype)
        bce = T.bce_with_logits(z, y).mean()
        p = T.sigmoid(z)
        inter = (p * Tensor(y, dtype=dtype)).sum(axis=1)
        denom = p.sum(axis=1) + Tensor(y.sum(axis=1), dtype=dtype)
        dice = (1.0 - (2.0 * inter + 1.0) / (denom + 1.0)).mean()
        loss = loss + cfg.w_bce * bce + cfg.w_dice * dice
    return loss


def set_loss(states, targets, cfg: LossConfig = LossConfig()) -> Tensor:
    """Total set-prediction loss over all decoder states (deep supervision).

    Matching is recomputed per state. With an empty target list every query
    is supervised toward "no object" and the mask terms are skipped.
    """
    if not states:
        raise ValueError("need at least one decoder state")
    t, hm, wm = states[0].mask_logits.shape[1:]
    gt_small = None
    gt_classes = None
    if targets:
        for tg in targets:
            if tg.mask.shape[0] != t:
                raise ValueError(f"target has {tg.mask.shape[0]} frames, predictions have {t}")
        gt_small = np.stack([downsample_mask(tg.mask, (hm, wm)) for tg in targets])
        gt_classes = np.array([tg.class_id for tg in targets], dtype=np.int64)

    supervised = states if cfg.deep_supervision else [states[-1]]
    total = None
    for state in supervised:
        sl = _state_loss(state, gt_small, gt_classes, cfg)
        total = sl if total is None else total + sl
    return total
