"""Evaluation: matched-AP for instance masks, temporal embedding stability,
and the qualitative similarity-map / RGB-projection views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEmbeddingError
from .fields import EmbeddingMap, FlowField, LabelMap
from .rng import philox
from .warp import warp_embeddings


@dataclass(eq=False)
class TemporalConsistencyReport:
    mean_cosine_distance: float
    accuracy: float                       # percent of instances below the margin
    per_instance: list                    # (instance_id, distance)

    def to_json_dict(self) -> dict:
        return {
            "mean_cosine_distance": self.mean_cosine_distance,
            "accuracy": self.accuracy,
            "per_instance": [{"id": i, "distance": d} for i, d in self.per_instance],
        }

    def to_text(self) -> str:
        lines = [f"{'instance':>10} {'distance':>10}"]
        for iid, dist in self.per_instance:
            lines.append(f"{iid:>10d} {dist:>10.4f}")
        lines.append(f"mean distance {self.mean_cosine_distance:.4f}  "
                     f"accuracy {self.accuracy:.1f}%")
        return "\n".join(lines)


@dataclass(eq=False)
class APReport:
    per_class_ap: dict
    mean_ap: float
    iou_thresholds: list

    def to_json_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "mean_ap": self.mean_ap,
            "iou_thresholds": list(self.iou_thresholds),
        }

    def to_text(self) -> str:
        lines = [f"{'class':>8} {'AP':>8}"]
        for cls, ap in sorted(self.per_class_ap.items()):
            lines.append(f"{cls:>8d} {ap:>8.4f}")
        lines.append(f"mean AP {self.mean_ap:.4f} over IoU {list(self.iou_thresholds)}")
        return "\n".join(lines)


def temporal_consistency(emb_current: EmbeddingMap, emb_next: EmbeddingMap,
                         labels_current: LabelMap, labels_next: LabelMap,
                         flow: FlowField, margin: float = 0.1) -> TemporalConsistencyReport:
    """Stability of per-instance mean embeddings between two time steps.

    Next-frame embeddings are warped into the current frame; for every
    instance present in both frames, both means are taken over the current
    frame's instance pixels that survived the warp, and their scaled cosine
    distance is reported. Accuracy is the percentage below `margin`.
    Background (id 0) is not an instance.
    """
    from .clustering import scaled_cosine_distance

    warped, warp_valid = warp_embeddings(emb_next, flow)
    ids_current = set(labels_current.present_instances(include_background=False))
    ids_next = set(labels_next.present_instances(include_background=False))
    per_instance = []
    for iid in sorted(ids_current & ids_next):
        support = (labels_current.instance_id == iid) & labels_current.valid & warp_valid
        if not support.any():
            continue
        mean_cur = emb_current.data[support].mean(axis=0)
        mean_nxt = warped.data[support].mean(axis=0)
        per_instance.append((iid, scaled_cosine_distance(mean_cur, mean_nxt)))
    if not per_instance:
        raise ValueError("no shared instances between the two frames")
    dists = np.array([d for _, d in per_instance])
    return TemporalConsistencyReport(
        mean_cosine_distance=float(dists.mean()),
        accuracy=float(100.0 * (dists < margin).sum() / dists.size),
        per_instance=per_instance,
    )


def _gt_instances(gt: LabelMap):
    """(class, mask) per groundtruth instance, majority class over valid pixels."""
    out = []
    for iid in gt.present_instances(include_background=False):
        mask = (gt.instance_id == iid) & gt.valid
        classes = gt.semantic_class[mask]
        cls = int(np.bincount(classes).argmax())
        out.append((cls, mask))
    return out


def _mask_iou(a, b) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def _ap_from_flags(flags, n_gt) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        return 0.0
    flags = np.asarray(flags, dtype=np.float64)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for k in range(mpre.size - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def match_greedy(pred_masks, gt_masks, threshold: float):
    """TP flags for confidence-ordered predictions, greedy best-IoU matching."""
    matched = [False] * len(gt_masks)
    flags = []
    for pm in pred_masks:
        best, best_iou = -1, 0.0
        for gi, gm in enumerate(gt_masks):
            if matched[gi]:
                continue
            iou = _mask_iou(pm, gm)
            if iou >= threshold and iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            matched[best] = True
            flags.append(1.0)
        else:
            flags.append(0.0)
    return flags


def instance_ap(pred, gt: LabelMap, iou_thresholds=None) -> APReport:
    """Matched-AP of a predicted MaskSet against groundtruth labels.

    Per class and IoU threshold, predictions sorted by descending confidence
    are greedily matched to unmatched GT instances; AP is the all-point
    interpolated PR area, averaged over thresholds then over classes that
    have at least one GT instance.
    """
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ValueError("prediction and groundtruth dimensions differ")
    if iou_thresholds is None:
        iou_thresholds = [round(0.5 + 0.05 * k, 2) for k in range(10)]
    gts = _gt_instances(gt)
    classes = sorted({cls for cls, _ in gts})
    per_class = {}
    for cls in classes:
        gt_masks = [m for c, m in gts if c == cls]
        preds = [m for m in pred.masks if m.semantic_class == cls]
        preds = sorted(preds, key=lambda m: -m.confidence)
        pred_masks = [m.pixels for m in preds]
        aps = [_ap_from_flags(match_greedy(pred_masks, gt_masks, thr), len(gt_masks))
               for thr in iou_thresholds]
        per_class[cls] = float(np.mean(aps))
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APReport(per_class_ap=per_class, mean_ap=mean_ap,
                    iou_thresholds=list(iou_thresholds))


def similarity_map(emb: EmbeddingMap, pixel) -> np.ndarray:
    """Scaled cosine distance of every pixel to the embedding at `pixel`.

    Zero-norm pixels other than the query read as 0.5 (treated orthogonal).
    """
    r, c = pixel
    if not (0 <= r < emb.height and 0 <= c < emb.width):
        raise ValueError("query pixel out of bounds")
    query = emb.data[r, c]
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding: zero norm at query pixel")
    norms = np.linalg.norm(emb.data, axis=2)
    safe = np.where(norms > 0.0, norms, 1.0)
    cos = (emb.data @ (query / qn)) / safe
    cos[norms == 0.0] = 0.0
    return (1.0 - np.clip(cos, -1.0, 1.0)) / 2.0


def embedding_to_rgb(emb: EmbeddingMap, seed: int = 0) -> np.ndarray:
    """Project c>=3 channels onto a seeded random orthonormal RGB basis.

    One affine rescale per image maps the projection onto [0, 255];
    constant fields come out black.
    """
    if emb.channels < 3:
        raise ValueError("need at least 3 channels to project to RGB")
    rng = philox(seed, 3)
    basis = rng.standard_normal((emb.channels, 3))
    q, r = np.linalg.qr(basis)
    q = q * np.sign(np.diag(r))[None, :]
    projected = emb.data @ q
    lo = projected.min()
    hi = projected.max()
    if hi > lo:
        scaled = (projected - lo) * (255.0 / (hi - lo))
    else:
        scaled = np.zeros_like(projected)
    return np.round(scaled).astype(np.uint8)


def save_report_json(report, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
