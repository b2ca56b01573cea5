"""Deterministic synthetic multi-modal scenes with exact groundtruth.

Each scene renders a handful of moving rectangles/ellipses into a camera
image (per-object base intensity from disjoint bands, a small texture, and
a per-scene linear brightness drift over time standing in for illumination
change) and a range image (the drift-free base value, a depth-like
per-object constant). The drift is bounded so intensity bands stay disjoint
across the whole temporal union: object identity is always decodable from
appearance, but only training across frames rewards a drift-invariant code.
Labels, flow and occlusion are mutually consistent by construction:
per-frame motion is integral, depth order is object index (lower = nearer),
and a source pixel is flagged occluded exactly when its target lands on a
different instance in the next frame. Warping frame-t labels by the
groundtruth flow therefore reproduces frame-t+1 labels on every pixel both
frames mark valid.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import fileio
from .fields import MODALITIES, EmbeddingMap, FlowField, Frame, FrameGroup, LabelMap
from .rng import philox

_MIN_VISIBLE_FRACTION = 0.93
_PLACEMENT_TRIES = 120


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    n_objects: int = 4
    n_classes: int = 3
    motion: tuple | None = None          # per-object (dx, dy) pixels/frame, integral
    modalities: tuple = MODALITIES
    frames: int = 3
    seed: int = 0
    camera_channels: int = 2
    max_speed: int = 2
    appearance_drift: float = 0.03       # per-frame additive camera brightness bound
    texture_amp: float = 0.05

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if min(self.height, self.width) < 8:
            raise ValueError("canvas too small")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ValueError(f"unknown modality {m!r}")
        if self.motion is not None:
            if len(self.motion) != self.n_objects:
                raise ValueError("motion must list one (dx, dy) per object")
            for dx, dy in self.motion:
                if dx != int(dx) or dy != int(dy):
                    raise ValueError("motion must be integral pixels/frame")

    @property
    def total_classes(self) -> int:
        # semantic classes are 1..n_classes for objects, 0 for background
        return self.n_classes + 1


@dataclass(frozen=True)
class _SceneObject:
    shape: str
    half_h: int
    half_w: int
    center0: tuple[int, int]
    motion: tuple[int, int]
    semantic: int
    value: float
    phase: float


def _raster(obj: _SceneObject, t: int, height: int, width: int) -> np.ndarray:
    cy = obj.center0[0] + t * obj.motion[1]
    cx = obj.center0[1] + t * obj.motion[0]
    rr, cc = np.indices((height, width))
    if obj.shape == "rect":
        return (np.abs(rr - cy) <= obj.half_h) & (np.abs(cc - cx) <= obj.half_w)
    return ((rr - cy) / obj.half_h) ** 2 + ((cc - cx) / obj.half_w) ** 2 <= 1.0


def _place_objects(spec: SceneSpec, rng) -> list[_SceneObject]:
    objects = []
    for o in range(spec.n_objects):
        shape = "rect" if rng.random() < 0.5 else "ellipse"
        if shape == "rect":
            half_h = int(rng.integers(8, 12))
            half_w = int(rng.integers(8, 12))
        else:
            half_h = int(rng.integers(12, 15))
            half_w = int(rng.integers(12, 15))
        if spec.motion is not None:
            motion = (int(spec.motion[o][0]), int(spec.motion[o][1]))
        else:
            motion = (int(rng.integers(-spec.max_speed, spec.max_speed + 1)),
                      int(rng.integers(-spec.max_speed, spec.max_speed + 1)))
        span = spec.frames - 1
        r_lo = half_h + max(0, -motion[1] * span)
        r_hi = spec.height - 1 - half_h - max(0, motion[1] * span)
        c_lo = half_w + max(0, -motion[0] * span)
        c_hi = spec.width - 1 - half_w - max(0, motion[0] * span)
        if r_lo > r_hi or c_lo > c_hi:
            raise ValueError("impossible spec: object exceeds canvas over its trajectory")
        semantic = int(rng.integers(1, spec.n_classes + 1))
        value = (o + 1) / (spec.n_objects + 1) + float(rng.uniform(-0.02, 0.02))
        phase = float(rng.uniform(0.0, 2.0 * math.pi))

        best = None
        best_vis = -1.0
        for _ in range(_PLACEMENT_TRIES):
            center = (int(rng.integers(r_lo, r_hi + 1)), int(rng.integers(c_lo, c_hi + 1)))
            cand = _SceneObject(shape, half_h, half_w, center, motion, semantic, value, phase)
            vis = 1.0
            for t in range(spec.frames):
                mask = _raster(cand, t, spec.height, spec.width)
                covered = np.zeros_like(mask)
                for nearer in objects:
                    covered |= _raster(nearer, t, spec.height, spec.width)
                visible = (mask & ~covered).sum() / max(mask.sum(), 1)
                vis = min(vis, visible)
            if vis > best_vis:
                best_vis = vis
                best = cand
            if vis >= _MIN_VISIBLE_FRACTION:
                break
        objects.append(best)
    return objects


def _render_labels(spec: SceneSpec, objects, t: int) -> LabelMap:
    inst = np.zeros((spec.height, spec.width), dtype=np.int64)
    sem = np.zeros((spec.height, spec.width), dtype=np.int64)
    # farther objects first so nearer (lower index) overwrite at overlaps
    for o in range(spec.n_objects - 1, -1, -1):
        mask = _raster(objects[o], t, spec.height, spec.width)
        inst[mask] = o + 1
        sem[mask] = objects[o].semantic
    return LabelMap(instance_id=inst, semantic_class=sem,
                    valid=np.ones((spec.height, spec.width), dtype=bool))


def _texture(spec: SceneSpec, phase: float, channel: int) -> np.ndarray:
    rr, cc = np.indices((spec.height, spec.width))
    return spec.texture_amp * np.cos(2.0 * math.pi * (rr + cc) / 7.0 + phase + 0.9 * channel)


def _render_camera(spec: SceneSpec, objects, labels: LabelMap, shifts) -> EmbeddingMap:
    # even channels carry the value, odd channels its complement: object
    # identity is then a direction in channel space, not just a magnitude,
    # which keeps distinct objects angularly separated for a downstream net.
    # Each channel drifts independently over time (illumination change), so
    # only training across frames rewards a drift-invariant embedding.
    img = np.zeros((spec.height, spec.width, spec.camera_channels), dtype=np.float64)
    for o, obj in enumerate(objects):
        visible = labels.instance_id == o + 1
        val = obj.value + _texture(spec, obj.phase, 0)[visible]
        for ch in range(spec.camera_channels):
            base = val if ch % 2 == 0 else 1.0 - val
            img[..., ch][visible] = base + shifts[ch % len(shifts)]
    return EmbeddingMap(img)


def _render_range(spec: SceneSpec, objects, labels: LabelMap) -> EmbeddingMap:
    img = np.zeros((spec.height, spec.width, spec.camera_channels), dtype=np.float64)
    for o, obj in enumerate(objects):
        visible = labels.instance_id == o + 1
        for ch in range(spec.camera_channels):
            img[..., ch][visible] = obj.value if ch % 2 == 0 else 1.0 - obj.value
    return EmbeddingMap(img)


def _flow_between(spec: SceneSpec, objects, labels_t: LabelMap, labels_next: LabelMap) -> FlowField:
    du = np.zeros((spec.height, spec.width), dtype=np.float64)
    dv = np.zeros((spec.height, spec.width), dtype=np.float64)
    for o, obj in enumerate(objects):
        on = labels_t.instance_id == o + 1
        du[on] = obj.motion[0]
        dv[on] = obj.motion[1]
    rr, cc = np.indices((spec.height, spec.width))
    tr = rr + dv.astype(np.int64)
    tc = cc + du.astype(np.int64)
    in_bounds = (tr >= 0) & (tr < spec.height) & (tc >= 0) & (tc < spec.width)
    occ = ~in_bounds
    occ[in_bounds] = (labels_next.instance_id[tr[in_bounds], tc[in_bounds]]
                      != labels_t.instance_id[in_bounds])
    return FlowField(du=du, dv=dv, occluded=occ)


def generate(spec: SceneSpec):
    """Render one scene.

    Returns (groups, flows): one FrameGroup per time step holding all
    requested modalities (the rendered image sits in the embedding slot),
    and one groundtruth FlowField per consecutive frame pair.
    """
    rng = philox(spec.seed, 11)
    objects = _place_objects(spec, rng)
    gammas = rng.uniform(-spec.appearance_drift, spec.appearance_drift, size=2)
    labels = [_render_labels(spec, objects, t) for t in range(spec.frames)]
    groups = []
    for t in range(spec.frames):
        frames = []
        if "camera" in spec.modalities:
            shifts = tuple(float(g) * t for g in gammas)
            frames.append(Frame("camera", t, _render_camera(spec, objects, labels[t], shifts),
                                labels[t]))
        if "range" in spec.modalities:
            frames.append(Frame("range", t, _render_range(spec, objects, labels[t]), labels[t]))
        groups.append(FrameGroup(tuple(frames), consistent_ids=True))
    flows = [_flow_between(spec, objects, labels[t], labels[t + 1])
             for t in range(spec.frames - 1)]
    return groups, flows


def one_hot_scores(labels: LabelMap, n_classes_total: int) -> EmbeddingMap:
    """Groundtruth semantic scores: one-hot of the per-pixel class."""
    if labels.semantic_class.max() >= n_classes_total:
        raise ValueError("semantic class out of range for the requested class count")
    h, w = labels.instance_id.shape
    scores = np.zeros((h, w, n_classes_total), dtype=np.float64)
    rr, cc = np.indices((h, w))
    scores[rr, cc, labels.semantic_class] = 1.0
    return EmbeddingMap(scores)


def write_scene_dir(path, groups, flows) -> None:
    """Emit EMB1 fields, PNG previews, and flow files for one scene."""
    os.makedirs(path, exist_ok=True)
    for t, group in enumerate(groups):
        for frame in group.frames:
            stem = os.path.join(path, f"frame_{t}_{frame.modality}")
            fileio.save_field(frame.embedding, stem + ".emb")
            fileio.save_field(frame.labels, stem + ".lbl")
            preview = frame.embedding.data[..., 0]
            fileio.save_gray_png(np.clip(preview, 0.0, 1.0), stem + ".png")
    for t, flow in enumerate(flows):
        fileio.save_flo(flow, os.path.join(path, f"flow_{t}.flo"))
        # .flo cannot carry the occlusion mask; keep a lossless sibling
        fileio.save_field(flow, os.path.join(path, f"flow_{t}.emb"))


def load_scene_dir(path, frames: int, modalities) -> tuple[list[FrameGroup], list[FlowField]]:
    groups = []
    for t in range(frames):
        members = []
        for modality in modalities:
            stem = os.path.join(path, f"frame_{t}_{modality}")
            emb = fileio.load_field(stem + ".emb")
            labels = fileio.load_field(stem + ".lbl")
            members.append(Frame(modality, t, emb, labels))
        groups.append(FrameGroup(tuple(members), consistent_ids=True))
    flows = []
    for t in range(frames - 1):
        emb_path = os.path.join(path, f"flow_{t}.emb")
        if os.path.exists(emb_path):
            flows.append(fileio.load_field(emb_path))
        else:
            flows.append(fileio.load_flo(os.path.join(path, f"flow_{t}.flo")))
    return groups, flows


def write_manifest(path, spec: SceneSpec, scene_dirs, seeds) -> None:
    manifest = {
        "format": "embedseg-scenes-v1",
        "height": spec.height,
        "width": spec.width,
        "n_objects": spec.n_objects,
        "n_classes": spec.n_classes,
        "total_classes": spec.total_classes,
        "frames": spec.frames,
        "modalities": list(spec.modalities),
        "camera_channels": spec.camera_channels,
        "scenes": [{"dir": d, "seed": s} for d, s in zip(scene_dirs, seeds)],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "embedseg-scenes-v1":
        raise ValueError("not an embedseg scene manifest")
    return manifest
