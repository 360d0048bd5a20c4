"""HTTP service exposing the full pipeline: dataset generation, training,
whole-sequence inference, AP evaluation and mask overlays.

Endpoints exchange JSON configuration and filesystem paths; tensors stay on
the server's disk in the package's tensor file format, so results are
byte-identical to running the library directly. All randomness is governed
by seeds in the request bodies.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .datagen import ClipDataset, GenConfig, make_dataset
from .decoder import Model, ModelConfig, load_checkpoint
from .loss import LossConfig
from .metrics import evaluate_predictions, load_predictions, save_predictions
from .tensor import load_tensor
from .trainer import TrainConfig, TrainingDiverged, infer, train

OVERLAY_PALETTE = (
    (255, 64, 64), (64, 160, 255), (64, 255, 96), (255, 224, 64),
    (224, 64, 255), (64, 255, 224), (255, 128, 0), (128, 128, 255),
    (0, 200, 120), (200, 0, 120),
)


# ----------------------------------------------------------------------
# request / response schemas


class GenDataRequest(BaseModel):
    out_dir: str
    n_clips: int = Field(default=400, ge=1)
    base_seed: int = 0
    frame_h: int = Field(default=64, ge=8)
    frame_w: int = Field(default=64, ge=8)
    clip_length: int = Field(default=8, ge=1)
    min_instances: int = Field(default=1, ge=1)
    max_instances: int = Field(default=2, ge=1)
    disc_radius: list = [7.0, 14.0]
    rect_half: list = [5.0, 11.0]
    speed_max: float = 2.0
    crossing: bool = False


class GenDataResponse(BaseModel):
    manifest_path: str
    n_train: int
    n_val: int


class ModelOptions(BaseModel):
    num_queries: int = 10
    channels: int = 64
    num_layers: int = 3
    heads: int = 4
    num_classes: int = 2
    feature_resolutions: list = [[16, 16]]
    mask_resolution: list = [32, 32]
    ffn_multiplier: int = 4
    encoder_convs: int = 1
    temporal_pe: bool = True


class TrainOptions(BaseModel):
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    backbone_lr_multiplier: float = 0.1
    total_iters: int = Field(default=500, ge=1)
    decay_fraction: float = 2.0 / 3.0
    decay_factor: float = 10.0
    batch_size: int = Field(default=4, ge=1)
    clip_length_T: int = Field(default=2, ge=1)
    seed: int = 0


class LossOptions(BaseModel):
    w_cls: float = 2.0
    w_bce: float = 5.0
    w_dice: float = 5.0
    no_object_weight: float = 0.1
    deep_supervision: bool = True


class TrainRequest(BaseModel):
    manifest_path: str
    out_dir: str
    split: str = "train"
    model_seed: int = 0
    model: ModelOptions = ModelOptions()
    train: TrainOptions = TrainOptions()
    loss: LossOptions = LossOptions()


class TrainResponse(BaseModel):
    checkpoint_dir: str
    loss_curve_path: str
    iterations: int
    initial_loss: float
    final_loss: float


class InferRequest(BaseModel):
    checkpoint_dir: str
    clip_path: str
    out_dir: str
    clip_id: str = ""
    top_k: int = Field(default=10, ge=1)


class InferResponse(BaseModel):
    predictions_path: str
    num_predictions: int
    clip_length: int


class EvalRequest(BaseModel):
    manifest_path: str
    predictions_dir: str
    split: str = "val"
    report_path: str = ""


class EvalResponse(BaseModel):
    ap: float
    ap50: float
    ap75: float
    per_class: dict
    num_gt: int
    report: str
    report_path: str = ""


class OverlayRequest(BaseModel):
    clip_path: str
    predictions_path: str
    out_dir: str
    min_score: float = 0.5


class OverlayResponse(BaseModel):
    frame_paths: list


# ----------------------------------------------------------------------
# handlers


def _require(path: str, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise HTTPException(status_code=404, detail=f"{kind} not found: {path}")
    return p


def create_app() -> FastAPI:
    app = FastAPI(title="vidseg", description=__doc__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/datasets", response_model=GenDataResponse)
    def gen_data(req: GenDataRequest) -> GenDataResponse:
        try:
            cfg = GenConfig(frame_hw=(req.frame_h, req.frame_w), clip_length=req.clip_length,
                            min_instances=req.min_instances, max_instances=req.max_instances,
                            disc_radius=tuple(req.disc_radius), rect_half=tuple(req.rect_half),
                            speed_max=req.speed_max, crossing=req.crossing)
            manifest_path = make_dataset(cfg, req.n_clips, req.base_seed, req.out_dir)
        except (ValueError, RuntimeError) as e:
            raise HTTPException(status_code=400, detail=str(e))
        manifest = json.loads(Path(manifest_path).read_text())
        splits = [e["split"] for e in manifest["clips"]]
        return GenDataResponse(manifest_path=str(manifest_path),
                               n_train=splits.count("train"), n_val=splits.count("val"))

    @app.post("/train", response_model=TrainResponse)
    def train_endpoint(req: TrainRequest) -> TrainResponse:
        manifest = _require(req.manifest_path, "manifest")
        try:
            dataset = ClipDataset(manifest, req.split)
            model = Model(ModelConfig(**req.model.model_dump()), seed=req.model_seed)
            result = train(model, dataset, TrainConfig(**req.train.model_dump()),
                           LossConfig(**req.loss.model_dump()), out_dir=req.out_dir)
        except TrainingDiverged as e:
            raise HTTPException(status_code=400, detail=str(e))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        return TrainResponse(checkpoint_dir=result.checkpoint_dir,
                             loss_curve_path=result.loss_curve_path,
                             iterations=len(result.losses),
                             initial_loss=result.initial_loss,
                             final_loss=result.final_loss)

    @app.post("/infer", response_model=InferResponse)
    def infer_endpoint(req: InferRequest) -> InferResponse:
        ckpt = _require(req.checkpoint_dir, "checkpoint")
        clip_path = _require(req.clip_path, "clip")
        try:
            model = load_checkpoint(ckpt)
            clip = load_tensor(clip_path)
            results = infer(model, clip, top_k=req.top_k)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        clip_id = req.clip_id or clip_path.parent.name
        path = save_predictions(req.out_dir, clip_id, results)
        return InferResponse(predictions_path=str(path), num_predictions=len(results),
                             clip_length=int(clip.shape[0]))

    @app.post("/eval", response_model=EvalResponse)
    def eval_endpoint(req: EvalRequest) -> EvalResponse:
        manifest = _require(req.manifest_path, "manifest")
        _require(req.predictions_dir, "predictions directory")
        try:
            result = evaluate_predictions(manifest, req.predictions_dir, split=req.split)
        except FileNotFoundError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        report_path = ""
        if req.report_path:
            doc = result.to_dict()
            Path(req.report_path).parent.mkdir(parents=True, exist_ok=True)
            Path(req.report_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            report_path = req.report_path
        return EvalResponse(**result.to_dict(), report=result.report(), report_path=report_path)

    @app.post("/overlay", response_model=OverlayResponse)
    def overlay_endpoint(req: OverlayRequest) -> OverlayResponse:
        clip_path = _require(req.clip_path, "clip")
        pred_path = _require(req.predictions_path, "predictions")
        clip = load_tensor(clip_path)
        results = [r for r in load_predictions(pred_path) if r.score >= req.min_score]
        paths = render_overlays(clip, results, req.out_dir)
        return OverlayResponse(frame_paths=[str(p) for p in paths])

    return app


def render_overlays(clip: np.ndarray, results, out_dir) -> list:
    """Blend predicted masks over the frames and write one PNG per frame."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = (np.clip(clip, 0.0, 1.0) * 255).astype(np.uint8)
    paths = []
    for t in range(frames.shape[0]):
        canvas = frames[t].astype(np.float32)
        for i, r in enumerate(results):
            color = np.array(OVERLAY_PALETTE[i % len(OVERLAY_PALETTE)], dtype=np.float32)
            sel = r.mask[t].astype(bool)
            canvas[sel] = 0.45 * canvas[sel] + 0.55 * color
        path = out_dir / f"frame_{t:03d}.png"
        Image.fromarray(canvas.astype(np.uint8)).save(path)
        paths.append(path)
    return paths


app = create_app()
