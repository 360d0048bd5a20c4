"""Deterministic synthetic video clips: colored discs and rectangles moving
with constant velocity over a dark background, with exact per-instance 3D
ground-truth masks.

The class of an instance is its shape kind (0 = disc, 1 = rectangle), so a
model must discriminate geometry, not color. Instances are painted in
order, later ones occluding earlier ones; ground truth is the visible
occupancy after occlusion, so masks never overlap. A `crossing` scenario
generates two same-class shapes whose paths intersect mid-clip, exercising
tracking through an occlusion event.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .loss import GroundTruthInstance
from .tensor import load_tensor, save_tensor

CLASS_DISC = 0
CLASS_RECT = 1
CLASS_NAMES = ("disc", "rectangle")


# default dataset size: seeds base_seed..base_seed+N-1, split by parity
DEFAULT_NUM_CLIPS = 400


@dataclass
class GenConfig:
    frame_hw: tuple = (64, 64)
    clip_length: int = 8
    min_instances: int = 1
    max_instances: int = 2
    disc_radius: tuple = (7.0, 14.0)
    rect_half: tuple = (5.0, 11.0)
    rect_aspect_min: float = 1.4
    rect_aspect_max: float = 2.2
    speed_max: float = 2.0
    background_max: float = 0.15
    crossing: bool = False

    def __post_init__(self):
        self.frame_hw = tuple(self.frame_hw)
        self.disc_radius = tuple(self.disc_radius)
        self.rect_half = tuple(self.rect_half)
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")


@dataclass
class SyntheticClip:
    frames: np.ndarray  # [T, H, W, 3] float32 in [0, 1]
    instances: list     # of GroundTruthInstance, in paint order
    seed: int
    meta: dict = field(default_factory=dict)


def _fit_center_range(extent: float, size: int, v: float, t_last: int) -> tuple[float, float]:
    lo = extent + max(0.0, -v * t_last)
    hi = (size - 1) - extent - max(0.0, v * t_last)
    return lo, hi


def _sample_instance(cfg: GenConfig, rng: np.random.Generator, kind: int) -> dict:
    h, w = cfg.frame_hw
    t_last = cfg.clip_length - 1
    if kind == CLASS_DISC:
        r = rng.uniform(*cfg.disc_radius)
        ext_r = ext_c = r
        size = {"radius": r}
    else:
        # elongated rectangles: near-square ones are indistinguishable from
        # discs at coarse feature resolution, which poisons the class labels
        short_hi = max(cfg.rect_half[0], cfg.rect_half[1] / cfg.rect_aspect_min)
        short = rng.uniform(cfg.rect_half[0], short_hi)
        long_side = short * rng.uniform(cfg.rect_aspect_min, cfg.rect_aspect_max)
        long_side = min(long_side, cfg.rect_half[1])
        hr, hc = (short, long_side) if rng.random() < 0.5 else (long_side, short)
        ext_r, ext_c = hr, hc
        size = {"half_rows": hr, "half_cols": hc}
    if 2 * ext_r > h - 2 or 2 * ext_c > w - 2:
        raise ValueError(f"shape with extent ({ext_r:.1f}, {ext_c:.1f}) too large for {h}x{w} frame")

    v = rng.uniform(-cfg.speed_max, cfg.speed_max, 2)
    # damp the velocity until the whole trajectory stays inside the frame
    for _ in range(40):
        lo_r, hi_r = _fit_center_range(ext_r, h, v[0], t_last)
        lo_c, hi_c = _fit_center_range(ext_c, w, v[1], t_last)
        if lo_r <= hi_r and lo_c <= hi_c:
            break
        v = v * 0.5
    center = np.array([rng.uniform(lo_r, hi_r), rng.uniform(lo_c, hi_c)])

    color = rng.uniform(0.35, 1.0, 3)
    color = color / color.max()  # at least one full-intensity channel
    return {"kind": kind, "center": center, "velocity": v, "color": color, **size}


def _sample_crossing_pair(cfg: GenConfig, rng: np.random.Generator) -> list[dict]:
    """Two same-class instances whose centers coincide halfway through the clip."""
    h, w = cfg.frame_hw
    t_last = max(cfg.clip_length - 1, 1)
    t_mid = t_last / 2.0
    kind = int(rng.integers(2))
    insts = []
    meet = np.array([rng.uniform(0.4, 0.6) * (h - 1), rng.uniform(0.4, 0.6) * (w - 1)])
    speed = min(cfg.speed_max, (min(h, w) / 4.0) / max(t_mid, 1.0))
    angle = rng.uniform(0, np.pi)
    for sign in (1.0, -1.0):
        v = sign * speed * np.array([np.sin(angle), np.cos(angle)])
        inst = _sample_instance(cfg, rng, kind)
        center = meet - v * t_mid
        ext = inst.get("radius", None)
        ext_r = ext if ext is not None else inst["half_rows"]
        ext_c = ext if ext is not None else inst["half_cols"]
        for _ in range(40):
            lo_r, hi_r = _fit_center_range(ext_r, h, v[0], t_last)
            lo_c, hi_c = _fit_center_range(ext_c, w, v[1], t_last)
            ok_r = lo_r <= center[0] <= hi_r
            ok_c = lo_c <= center[1] <= hi_c
            if ok_r and ok_c:
                break
            v = v * 0.5
            center = meet - v * t_mid
        inst["center"] = center
        inst["velocity"] = v
        insts.append(inst)
    return insts


def _rasterize(inst: dict, t: int, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    rr, cc = np.mgrid[0:h, 0:w]
    cr, ccol = inst["center"] + inst["velocity"] * t
    if inst["kind"] == CLASS_DISC:
        return (rr - cr) ** 2 + (cc - ccol) ** 2 <= inst["radius"] ** 2
    return (np.abs(rr - cr) <= inst["half_rows"]) & (np.abs(cc - ccol) <= inst["half_cols"])


def generate_clip(cfg: GenConfig, seed: int) -> SyntheticClip:
    """Render one clip; identical (cfg, seed) pairs give identical bytes."""
    rng = np.random.default_rng(seed)
    h, w = cfg.frame_hw
    t_len = cfg.clip_length
    for _ in range(32):
        if cfg.crossing:
            insts = _sample_crossing_pair(cfg, rng)
        else:
            n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
            insts = [_sample_instance(cfg, rng, int(rng.integers(2))) for _ in range(n)]
        occ = np.zeros((len(insts), t_len, h, w), dtype=bool)
        for i, inst in enumerate(insts):
            for t in range(t_len):
                occ[i, t] = _rasterize(inst, t, (h, w))
        visible = occ.copy()
        for i in range(len(insts)):
            for j in range(i + 1, len(insts)):
                visible[i] &= ~occ[j]
        if all(v.any() for v in visible):
            break
    else:
        raise RuntimeError(f"could not generate a clip with all instances visible (seed {seed})")

    background = rng.uniform(0.0, cfg.background_max)
    frames = np.full((t_len, h, w, 3), background, dtype=np.float32)
    for inst, o in zip(insts, occ):  # paint order: later instances occlude
        frames[o] = inst["color"].astype(np.float32)

    instances = [GroundTruthInstance(class_id=inst["kind"], mask=v.astype(np.uint8))
                 for inst, v in zip(insts, visible)]
    meta = {
        "background": float(background),
        "instances": [
            {
                "kind": int(i["kind"]),
                "class_name": CLASS_NAMES[i["kind"]],
                "center": [float(x) for x in i["center"]],
                "velocity": [float(x) for x in i["velocity"]],
                "color": [float(x) for x in i["color"]],
                **({"radius": float(i["radius"])} if "radius" in i else
                   {"half_rows": float(i["half_rows"]), "half_cols": float(i["half_cols"])}),
            }
            for i in insts
        ],
    }
    return SyntheticClip(frames=frames, instances=instances, seed=seed, meta=meta)


# ----------------------------------------------------------------------
# on-disk dataset


def make_dataset(cfg: GenConfig, n_clips: int, base_seed: int, out_dir) -> Path:
    """Write clips, annotations and a manifest; split train/val by seed parity.

    Layout: <out>/manifest.json, <out>/clips/<id>/frames.tns,
    inst_XX_mask.tns and annotations.json per clip.
    """
    out_dir = Path(out_dir)
    clips_dir = out_dir / "clips"
    clips_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_clips):
        seed = base_seed + i
        split = "train" if seed % 2 == 0 else "val"
        clip = generate_clip(cfg, seed)
        cid = f"clip_{i:05d}"
        cdir = clips_dir / cid
        cdir.mkdir(parents=True, exist_ok=True)
        try:
            save_tensor(cdir / "frames.tns", clip.frames)
            ann = {"clip_id": cid, "seed": seed, "meta": clip.meta, "instances": []}
            for j, inst in enumerate(clip.instances):
                mask_file = f"inst_{j:02d}_mask.tns"
                save_tensor(cdir / mask_file, inst.mask.astype(np.float32))
                ann["instances"].append({"class_id": int(inst.class_id), "mask_file": mask_file})
            (cdir / "annotations.json").write_text(json.dumps(ann, indent=2) + "\n")
        except OSError as e:
            raise OSError(f"failed writing clip files under {cdir}: {e}") from e
        entries.append({
            "id": cid,
            "seed": seed,
            "split": split,
            "length": cfg.clip_length,
            "frames": f"clips/{cid}/frames.tns",
            "annotations": f"clips/{cid}/annotations.json",
        })
    manifest = {"generator": asdict(cfg), "base_seed": base_seed, "num_clips": n_clips,
                "class_names": list(CLASS_NAMES), "clips": entries}
    path = out_dir / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as e:
        raise OSError(f"failed writing manifest {path}: {e}") from e
    return path


def load_clip(manifest_path, entry) -> tuple[np.ndarray, list]:
    root = Path(manifest_path).parent
    frames = load_tensor(root / entry["frames"])
    ann = json.loads((root / entry["annotations"]).read_text())
    cdir = (root / entry["annotations"]).parent
    instances = [
        GroundTruthInstance(class_id=int(inst["class_id"]),
                            mask=load_tensor(cdir / inst["mask_file"]).astype(np.uint8))
        for inst in ann["instances"]
    ]
    return frames, instances


class ClipDataset:
    """One split of an on-disk dataset, loaded into memory.

    Serves full clips for evaluation and fixed-length windows for training;
    instances that are invisible inside a sampled window are dropped.
    """

    def __init__(self, manifest_path, split: str):
        manifest_path = Path(manifest_path)
        manifest = json.loads(manifest_path.read_text())
        self.split = split
        self.entries = [e for e in manifest["clips"] if e["split"] == split]
        if not self.entries:
            raise ValueError(f"no clips with split={split!r} in {manifest_path}")
        self.items = [load_clip(manifest_path, e) for e in self.entries]

    def __len__(self):
        return len(self.items)

    def clip(self, index: int):
        return self.items[index]

    def sample_window(self, rng: np.random.Generator, length: int):
        """Random (frames, targets) window of `length` frames from a random clip."""
        frames, instances = self.items[int(rng.integers(len(self.items)))]
        t_total = frames.shape[0]
        if length > t_total:
            raise ValueError(f"window length {length} exceeds clip length {t_total}")
        start = int(rng.integers(t_total - length + 1))
        window = frames[start:start + length]
        targets = []
        for inst in instances:
            sub = inst.mask[start:start + length]
            if sub.any():
                targets.append(GroundTruthInstance(class_id=inst.class_id, mask=sub))
        return window, targets
