"""Training and inference pipelines.

Training samples fixed-length frame windows from longer clips, runs the
set-prediction loss over every decoder state and updates parameters with
decoupled-weight-decay Adam under a step learning-rate schedule (one decay
at a fixed fraction of the run, with a reduced multiplier for the pixel
encoder). Inference feeds the whole variable-length clip through a single
forward pass and keeps the top-scoring predictions; there is no tracking
post-processing of any kind.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import ClipDataset
from .decoder import InstanceResult, Model, extract_instances, save_checkpoint
from .loss import LossConfig, set_loss


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    backbone_lr_multiplier: float = 0.1
    total_iters: int = 500
    decay_fraction: float = 2.0 / 3.0
    decay_factor: float = 10.0
    batch_size: int = 4
    clip_length_T: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay_fraction < 1.0:
            raise ValueError("decay_fraction must lie in (0, 1)")
        if self.decay_factor <= 1.0:
            raise ValueError("decay_factor must exceed 1")
        if self.total_iters < 1 or self.batch_size < 1 or self.clip_length_T < 1:
            raise ValueError("total_iters, batch_size and clip_length_T must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss ({value}) at iteration {iteration}")
        self.iteration = iteration


def lr_at(iteration: int, cfg: TrainConfig, is_backbone: bool = False) -> float:
    """Step schedule: one division by decay_factor at decay_fraction of the
    run, with the backbone multiplier applied throughout."""
    lr = cfg.base_lr
    if is_backbone:
        lr *= cfg.backbone_lr_multiplier
    if iteration >= cfg.decay_fraction * cfg.total_iters:
        lr /= cfg.decay_factor
    return lr


class AdamW:
    """Adam with decoupled weight decay.

    Decay shrinks parameters by (1 - lr * wd) before the moment update, so
    parameters with zero gradient still decay. Moments are bias-corrected
    with the internal step count; the learning rate comes from `lr_at` for
    the iteration passed to `step`.
    """

    def __init__(self, model: Model, cfg: TrainConfig,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.cfg = cfg
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.groups = list(model.parameter_groups())
        self.m = {name: np.zeros_like(p.data) for name, p, _ in self.groups}
        self.v = {name: np.zeros_like(p.data) for name, p, _ in self.groups}
        self.step_count = 0

    def step(self, iteration: int) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p, is_backbone in self.groups:
            lr = lr_at(iteration, self.cfg, is_backbone)
            p.data *= 1.0 - lr * self.cfg.weight_decay
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    checkpoint_dir: str
    loss_curve_path: str
    losses: list = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train(model: Model, dataset: ClipDataset, cfg: TrainConfig,
          loss_cfg: LossConfig | None = None, out_dir="runs/train") -> TrainResult:
    """Run the full optimization and write a checkpoint plus the loss curve.

    Sampling, initialization and updates are all driven by explicit seeds,
    so identical (model, dataset, config) produce bit-identical artifacts.
    A non-finite loss aborts immediately, naming the iteration.
    """
    loss_cfg = loss_cfg or LossConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model, cfg)
    losses: list[float] = []
    for it in range(cfg.total_iters):
        batch = [dataset.sample_window(rng, cfg.clip_length_T) for _ in range(cfg.batch_size)]
        model.zero_grad()
        total = None
        try:
            for frames, targets in batch:
                clip_loss = set_loss(model.forward(frames), targets, loss_cfg)
                total = clip_loss if total is None else total + clip_loss
        except ValueError as e:
            # non-finite predictions surface as finite-cost violations in matching
            if "finite" in str(e):
                raise TrainingDiverged(it, float("nan")) from e
            raise
        loss = total * (1.0 / cfg.batch_size)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(it, value)
        loss.backward()
        opt.step(it)
        losses.append(value)

    ckpt_dir = out_dir / "checkpoint"
    save_checkpoint(model, ckpt_dir)
    curve_path = out_dir / "loss_curve.json"
    curve_path.write_text(json.dumps({"losses": losses}) + "\n")
    return TrainResult(checkpoint_dir=str(ckpt_dir), loss_curve_path=str(curve_path), losses=losses)


def infer(model: Model, clip: np.ndarray, top_k: int = 10) -> list[InstanceResult]:
    """Whole-sequence inference: one forward pass over all T frames, then the
    top-k predictions with masks upsampled to the input resolution."""
    clip = np.asarray(clip)
    states = model.forward(clip)
    return extract_instances(states[-1], top_k=top_k, frame_hw=clip.shape[1:3])
