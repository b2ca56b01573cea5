"""Inference-time mask extraction from per-pixel embeddings.

Mean-shift variant on the unit sphere: seed at a random unclustered
foreground pixel, gather inliers within a scaled-cosine-distance margin,
move the center to their renormalized mean, repeat until the center stops
moving, then freeze the inlier set as one cluster and continue until every
foreground pixel is clustered. Thin artifacts are dropped by an
area/perimeter filter; classes come from a per-mask majority vote over the
semantic scores, and off-class pixels are dropped from the mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEmbeddingError
from .fields import EmbeddingMap
from .rng import philox


@dataclass(frozen=True)
class ClusterConfig:
    margin: float = 0.1
    max_iters: int = 100
    shift_tol: float = 1e-4
    min_ratio: float = 4.0
    seed: int = 0
    semantic_concat: bool = True
    semantic_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.margin < 1.0:
            raise ValueError("margin must lie strictly inside (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(eq=False)
class InstanceMask:
    pixels: np.ndarray           # (h, w) bool
    instance_id: int
    semantic_class: int
    confidence: float


@dataclass(eq=False)
class MaskSet:
    masks: list
    unassigned: np.ndarray       # (h, w) bool
    height: int
    width: int


def scaled_cosine_distance(x, y) -> float:
    """(1 - sim(x, y)) / 2, mapping [-1, 1] similarity onto [0, 1]."""
    from .loss import cosine_sim

    return (1.0 - cosine_sim(x, y)) / 2.0


def concat_semantics(emb: EmbeddingMap, semantics, n_classes: int,
                     semantic_scale: float = 1.0) -> EmbeddingMap:
    """Append a scaled one-hot class block to L2-normalized embeddings.

    Zero-norm pixels keep a zero instance block (the one-hot part still
    carries geometry); classes must lie in [0, n_classes).
    """
    semantics = np.asarray(semantics, dtype=np.int64)
    if semantics.shape != (emb.height, emb.width):
        raise ValueError("semantics must be one class per pixel")
    if semantics.min() < 0 or semantics.max() >= n_classes:
        raise ValueError("class out of range")
    data = emb.data
    norms = np.linalg.norm(data, axis=2)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = data / safe[..., None]
    onehot = np.zeros((emb.height, emb.width, n_classes), dtype=np.float64)
    rr, cc = np.indices((emb.height, emb.width))
    onehot[rr, cc, semantics] = semantic_scale
    return EmbeddingMap(np.concatenate([unit, onehot], axis=2))


def mean_shift_cluster(emb: EmbeddingMap, foreground, cfg: ClusterConfig) -> np.ndarray:
    """Cluster foreground pixels; returns per-pixel cluster ids, -1 outside.

    Deterministic given cfg.seed. Membership is frozen at discovery, and the
    final inlier set is re-gathered against the converged center so every
    member sits within the margin of its cluster center.
    """
    foreground = np.asarray(foreground, dtype=bool)
    if foreground.shape != (emb.height, emb.width):
        raise ValueError("foreground mask must match embedding dimensions")
    h, w = foreground.shape
    flat = np.flatnonzero(foreground.ravel())
    result = np.full(h * w, -1, dtype=np.int64)
    if flat.size == 0:
        return result.reshape(h, w)
    vectors = emb.data.reshape(-1, emb.channels)[flat]
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("degenerate embedding: zero-norm foreground pixel")
    unit = vectors / norms[:, None]

    rng = philox(cfg.seed, 5)
    unclustered = np.ones(flat.size, dtype=bool)
    assigned = np.full(flat.size, -1, dtype=np.int64)
    cluster = 0
    while unclustered.any():
        pool = np.flatnonzero(unclustered)
        seed_idx = pool[int(rng.integers(pool.size))]
        center = unit[seed_idx]
        members = None
        for _ in range(cfg.max_iters):
            dist = 0.5 * (1.0 - unit[pool] @ center)
            inliers = pool[dist < cfg.margin]
            if inliers.size == 0:
                break
            members = inliers
            mean = unit[inliers].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0.0:
                break
            mean /= norm
            moved = 0.5 * (1.0 - center @ mean)
            center = mean
            if moved < cfg.shift_tol:
                break
        dist = 0.5 * (1.0 - unit[pool] @ center)
        final = pool[dist < cfg.margin]
        if final.size == 0:
            final = members if members is not None else np.array([seed_idx])
        assigned[final] = cluster
        unclustered[final] = False
        cluster += 1
    result[flat] = assigned
    return result.reshape(h, w)


def mask_perimeter(mask) -> int:
    """Count of 4-connected edges between the mask and non-mask, image
    border included."""
    mask = np.asarray(mask, dtype=bool)
    p = int(mask[:, 0].sum() + mask[:, -1].sum() + mask[0, :].sum() + mask[-1, :].sum())
    p += int((mask[:, 1:] != mask[:, :-1]).sum())
    p += int((mask[1:, :] != mask[:-1, :]).sum())
    return p


def filter_masks(cluster_ids, cfg: ClusterConfig) -> MaskSet:
    """Drop clusters with area/perimeter below cfg.min_ratio.

    Kept masks are numbered 1.. in discovery order; semantic class and
    confidence are placeholders (-1, 0.0) until assign_semantics runs.
    """
    cluster_ids = np.asarray(cluster_ids)
    h, w = cluster_ids.shape
    masks = []
    next_id = 1
    for cid in range(int(cluster_ids.max()) + 1):
        mask = cluster_ids == cid
        area = int(mask.sum())
        if area == 0:
            continue
        if area / mask_perimeter(mask) < cfg.min_ratio:
            continue
        masks.append(InstanceMask(pixels=mask, instance_id=next_id,
                                  semantic_class=-1, confidence=0.0))
        next_id += 1
    unassigned = np.ones((h, w), dtype=bool)
    for m in masks:
        unassigned &= ~m.pixels
    return MaskSet(masks=masks, unassigned=unassigned, height=h, width=w)


def _score_array(semantic_scores) -> np.ndarray:
    scores = semantic_scores.data if isinstance(semantic_scores, EmbeddingMap) \
        else np.asarray(semantic_scores, dtype=np.float64)
    if scores.ndim != 3:
        raise ValueError("semantic scores must be h x w x n_classes")
    if np.isnan(scores).any():
        raise ValueError("degenerate semantic scores (NaN)")
    sums = scores.sum(axis=2)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("semantic scores must sum to 1 per pixel")
    return scores


def assign_semantics(maskset: MaskSet, semantic_scores) -> MaskSet:
    """Majority-vote a class per mask, drop off-class pixels, score confidence.

    Vote ties break toward the lower class index; confidence is the mean
    score of the selected class over the retained pixels.
    """
    scores = _score_array(semantic_scores)
    if scores.shape[:2] != (maskset.height, maskset.width):
        raise ValueError("scores must match mask dimensions")
    votes = scores.argmax(axis=2)
    n_classes = scores.shape[2]
    out_masks = []
    unassigned = maskset.unassigned.copy()
    for m in maskset.masks:
        counts = np.bincount(votes[m.pixels], minlength=n_classes)
        selected = int(counts.argmax())
        keep = m.pixels & (votes == selected)
        dropped = m.pixels & ~keep
        unassigned |= dropped
        confidence = float(scores[..., selected][keep].mean())
        out_masks.append(InstanceMask(pixels=keep, instance_id=m.instance_id,
                                      semantic_class=selected, confidence=confidence))
    return MaskSet(masks=out_masks, unassigned=unassigned,
                   height=maskset.height, width=maskset.width)


def segment(emb: EmbeddingMap, semantic_scores, cfg: ClusterConfig,
            thing_classes=None) -> MaskSet:
    """Full mask extraction: semantic foreground filter, optional one-hot
    concatenation, mean shift, artifact filter, majority-vote classes.

    thing_classes defaults to every class except 0 (the background/stuff
    bucket of the synthetic scenes).
    """
    scores = _score_array(semantic_scores)
    if scores.shape[:2] != (emb.height, emb.width):
        raise ValueError("embedding and scores must share spatial dimensions")
    votes = scores.argmax(axis=2)
    n_classes = scores.shape[2]
    if thing_classes is None:
        thing_classes = range(1, n_classes)
    foreground = np.isin(votes, np.asarray(sorted(thing_classes), dtype=np.int64))
    if not foreground.any():
        return MaskSet(masks=[], unassigned=np.ones((emb.height, emb.width), dtype=bool),
                       height=emb.height, width=emb.width)
    work = emb
    if cfg.semantic_concat:
        work = concat_semantics(emb, votes, n_classes, cfg.semantic_scale)
    cluster_ids = mean_shift_cluster(work, foreground, cfg)
    pre = filter_masks(cluster_ids, cfg)
    return assign_semantics(pre, scores)


def rle_encode(mask) -> list[int]:
    """Row-major run lengths alternating background/foreground, background first."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    pos = 0
    for change in np.flatnonzero(flat[1:] != flat[:-1]) + 1:
        runs.append(int(change - pos))
        pos = change
    runs.append(int(flat.size - pos))
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(counts, height: int, width: int) -> np.ndarray:
    total = height * width
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if run < 0 or pos + run > total:
            raise ValueError("run-length data out of range")
        flat[pos:pos + run] = value
        pos += run
        value = not value
    if pos != total:
        raise ValueError("run-length data does not cover the mask")
    return flat.reshape(height, width)


def maskset_to_json_dict(ms: MaskSet) -> dict:
    return {
        "height": ms.height,
        "width": ms.width,
        "masks": [
            {
                "id": m.instance_id,
                "class": m.semantic_class,
                "confidence": m.confidence,
                "rle": rle_encode(m.pixels),
            }
            for m in ms.masks
        ],
    }


def maskset_from_json_dict(payload: dict) -> MaskSet:
    h = int(payload["height"])
    w = int(payload["width"])
    masks = [
        InstanceMask(
            pixels=rle_decode(entry["rle"], h, w),
            instance_id=int(entry["id"]),
            semantic_class=int(entry["class"]),
            confidence=float(entry["confidence"]),
        )
        for entry in payload["masks"]
    ]
    unassigned = np.ones((h, w), dtype=bool)
    for m in masks:
        unassigned &= ~m.pixels
    return MaskSet(masks=masks, unassigned=unassigned, height=h, width=w)


def save_maskset(ms: MaskSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(maskset_to_json_dict(ms), fh, sort_keys=True)
        fh.write("\n")


def load_maskset(path) -> MaskSet:
    with open(path) as fh:
        return maskset_from_json_dict(json.load(fh))
