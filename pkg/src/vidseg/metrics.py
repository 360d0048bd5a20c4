"""Video instance segmentation AP over spatio-temporal mask IoU.

A predicted track matches a ground-truth instance through the IoU of their
full T x H x W volumes, so a track that segments well per frame but drifts
between objects scores poorly. AP follows the COCO-style protocol:
predictions sorted by score, greedy matching per clip against unmatched
ground truth of the same class, 101-point interpolated precision/recall,
averaged over the 0.50:0.05:0.95 thresholds and over the classes present
in the ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import ClipDataset
from .decoder import InstanceResult
from .tensor import load_tensor, save_tensor

DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_class: dict
    num_gt: int

    def to_dict(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "per_class": {str(k): v for k, v in self.per_class.items()},
                "num_gt": self.num_gt}

    def report(self) -> str:
        lines = [
            f"AP   {100 * self.ap:6.2f}",
            f"AP50 {100 * self.ap50:6.2f}",
            f"AP75 {100 * self.ap75:6.2f}",
        ]
        for cls in sorted(self.per_class):
            lines.append(f"class {cls}: AP {100 * self.per_class[cls]:6.2f}")
        lines.append(f"ground-truth instances: {self.num_gt}")
        return "\n".join(lines)


def st_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary spatio-temporal volumes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _interp_ap_101(recall: np.ndarray, precision: np.ndarray) -> float:
    if recall.size == 0:
        return 0.0
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        at_least = precision[recall >= r - 1e-12]
        total += at_least.max() if at_least.size else 0.0
    return total / 101.0


def compute_ap(preds, gts, thresholds=None) -> EvalResult:
    """AP over a set of clips.

    `preds` and `gts` are parallel lists, one entry per clip, holding
    InstanceResult-like predictions (class_id, score, mask) and
    GroundTruthInstance-like annotations (class_id, mask). Tracks never
    match across clips.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists vs {len(gts)} ground-truth lists")
    thresholds = DEFAULT_THRESHOLDS if thresholds is None else tuple(thresholds)
    classes = sorted({g.class_id for clip in gts for g in clip})
    num_gt = sum(len(clip) for clip in gts)

    per_class_thr: dict = {}
    for cls in classes:
        entries = []  # (score, clip_index, position) in deterministic order
        for ci, clip_preds in enumerate(preds):
            for pi, pr in enumerate(clip_preds):
                if pr.class_id == cls:
                    entries.append((pr.score, ci, pi))
        entries.sort(key=lambda e: (-e[0], e[1], e[2]))
        gt_by_clip = {ci: [gi for gi, g in enumerate(clip) if g.class_id == cls]
                      for ci, clip in enumerate(gts)}
        n_gt_cls = sum(len(v) for v in gt_by_clip.values())

        # IoU of each candidate prediction against each same-class gt of its clip
        ious = {}
        for score, ci, pi in entries:
            pr = preds[ci][pi]
            ious[(ci, pi)] = [st_iou(pr.mask, gts[ci][gi].mask) for gi in gt_by_clip[ci]]

        per_thr = {}
        for thr in thresholds:
            taken = {ci: np.zeros(len(gt_by_clip[ci]), dtype=bool) for ci in gt_by_clip}
            tp = np.zeros(len(entries))
            for rank, (score, ci, pi) in enumerate(entries):
                best_j, best_iou = -1, -1.0
                for j, iou in enumerate(ious[(ci, pi)]):
                    if taken[ci][j] or iou < thr:
                        continue
                    if iou > best_iou:  # ties keep the lowest gt index
                        best_j, best_iou = j, iou
                if best_j >= 0:
                    taken[ci][best_j] = True
                    tp[rank] = 1.0
            if n_gt_cls == 0:
                per_thr[thr] = 0.0
                continue
            cum_tp = np.cumsum(tp)
            cum_fp = np.cumsum(1.0 - tp)
            recall = cum_tp / n_gt_cls
            precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
            per_thr[thr] = _interp_ap_101(recall, precision)
        per_class_thr[cls] = per_thr

    if not classes:
        return EvalResult(ap=0.0, ap50=0.0, ap75=0.0, per_class={}, num_gt=0)

    per_class = {cls: float(np.mean([per_class_thr[cls][t] for t in thresholds]))
                 for cls in classes}
    ap = float(np.mean(list(per_class.values())))
    ap50 = float(np.mean([per_class_thr[cls].get(0.5, 0.0) for cls in classes]))
    ap75 = float(np.mean([per_class_thr[cls].get(0.75, 0.0) for cls in classes]))
    return EvalResult(ap=ap, ap50=ap50, ap75=ap75, per_class=per_class, num_gt=num_gt)


# ----------------------------------------------------------------------
# prediction files: one JSON per clip plus mask tensors


def save_predictions(pred_dir, clip_id: str, results) -> Path:
    pred_dir = Path(pred_dir)
    pred_dir.mkdir(parents=True, exist_ok=True)
    doc = {"clip_id": clip_id, "predictions": []}
    for i, r in enumerate(results):
        mask_file = f"{clip_id}_mask_{i:02d}.tns"
        save_tensor(pred_dir / mask_file, r.mask.astype(np.float32))
        doc["predictions"].append({
            "class_id": int(r.class_id),
            "score": float(r.score),
            "query_index": int(r.query_index),
            "mask_file": mask_file,
        })
    path = pred_dir / f"{clip_id}.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_predictions(pred_file) -> list:
    pred_file = Path(pred_file)
    doc = json.loads(pred_file.read_text())
    results = []
    for item in doc["predictions"]:
        mask = (load_tensor(pred_file.parent / item["mask_file"]) >= 0.5).astype(np.uint8)
        results.append(InstanceResult(class_id=int(item["class_id"]), score=float(item["score"]),
                                      mask=mask, query_index=int(item.get("query_index", -1))))
    return results


def evaluate_predictions(manifest_path, predictions_dir, split: str = "val",
                         thresholds=None) -> EvalResult:
    """Score a directory of per-clip prediction files against a dataset split."""
    ds = ClipDataset(manifest_path, split)
    predictions_dir = Path(predictions_dir)
    preds, gts = [], []
    for entry, (frames, instances) in zip(ds.entries, ds.items):
        pred_file = predictions_dir / f"{entry['id']}.json"
        if not pred_file.exists():
            raise FileNotFoundError(f"missing predictions for {entry['id']}: {pred_file}")
        preds.append(load_predictions(pred_file))
        gts.append(instances)
    return compute_ap(preds, gts, thresholds=thresholds)
