"""Label and embedding transport along optical flow.

Labels move source -> target by forward splatting at nearest-integer target
coordinates (labels are never interpolated). Where two sources land on one
target the one with the larger flow magnitude wins (nearer-to-camera under
motion parallax); ties go to the row-major-earlier source. Targets that no
source reaches (range-map count zero) are occluded and invalid, as are
targets whose backward probe leaves the canvas.

Embeddings move the other way: a backward gather at round(p + flow(p)),
invalid where the flow marks p occluded or the lookup leaves the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import EmbeddingMap, FlowField, LabelMap


@dataclass(frozen=True, eq=False)
class WarpResult:
    warped_labels: LabelMap
    occlusion: np.ndarray       # target frame: no source pixel splatted here
    out_of_bounds: np.ndarray   # target frame: backward probe leaves the canvas


def round_half_away(x) -> np.ndarray:
    """round() with halves away from zero, fixed for cross-platform stability."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, np.floor(x + 0.5), np.ceil(x - 0.5)).astype(np.int64)


def _splat_targets(flow: FlowField):
    h, w = flow.du.shape
    rr, cc = np.indices((h, w))
    tr = round_half_away(rr + flow.dv)
    tc = round_half_away(cc + flow.du)
    in_bounds = (tr >= 0) & (tr < h) & (tc >= 0) & (tc < w)
    return rr, cc, tr, tc, in_bounds


def range_map_occlusion(flow: FlowField) -> np.ndarray:
    """Target pixels that receive zero source pixels under the rounded flow."""
    h, w = flow.du.shape
    _, _, tr, tc, in_bounds = _splat_targets(flow)
    counts = np.zeros((h, w), dtype=np.int64)
    np.add.at(counts, (tr[in_bounds], tc[in_bounds]), 1)
    return counts == 0


def warp_labels(labels: LabelMap, flow: FlowField) -> WarpResult:
    """Transport labels source -> target along the flow.

    Sources with invalid labels, or flagged occluded by the flow, do not
    splat (their content is not visible in the target frame).
    """
    h, w = labels.instance_id.shape
    if flow.du.shape != (h, w):
        raise ValueError("labels and flow must share dimensions")
    _, _, tr, tc, in_bounds = _splat_targets(flow)

    eligible = labels.valid & ~flow.occluded & in_bounds
    src_flat = np.flatnonzero(eligible.ravel())
    mag = (flow.du.ravel()[src_flat] ** 2 + flow.dv.ravel()[src_flat] ** 2)
    # winner must write last: sort by magnitude ascending, row-major index
    # descending inside ties, then let plain assignment overwrite.
    order = np.lexsort((-src_flat, mag))
    src_flat = src_flat[order]

    inst = np.zeros((h, w), dtype=np.int64)
    sem = np.zeros((h, w), dtype=np.int64)
    received = np.zeros((h, w), dtype=bool)
    t_r = tr.ravel()[src_flat]
    t_c = tc.ravel()[src_flat]
    inst[t_r, t_c] = labels.instance_id.ravel()[src_flat]
    sem[t_r, t_c] = labels.semantic_class.ravel()[src_flat]
    received[t_r, t_c] = True

    occlusion = range_map_occlusion(flow)
    rr, cc = np.indices((h, w))
    probe_r = round_half_away(rr - flow.dv)
    probe_c = round_half_away(cc - flow.du)
    out_of_bounds = (probe_r < 0) | (probe_r >= h) | (probe_c < 0) | (probe_c >= w)

    valid = received & ~occlusion & ~out_of_bounds
    inst[~received] = 0
    sem[~received] = 0
    warped = LabelMap(instance_id=inst, semantic_class=sem, valid=valid)
    return WarpResult(warped_labels=warped, occlusion=occlusion, out_of_bounds=out_of_bounds)


def warp_embeddings(emb: EmbeddingMap, flow: FlowField):
    """Fetch next-frame embeddings into the flow's source frame.

    Returns (warped EmbeddingMap, valid mask): for each source pixel p the
    embedding at round(p + flow(p)), nearest-neighbor, invalid where p is
    flagged occluded or the lookup leaves the image.
    """
    h, w = flow.du.shape
    if (emb.height, emb.width) != (h, w):
        raise ValueError("embedding and flow must share dimensions")
    _, _, tr, tc, in_bounds = _splat_targets(flow)
    out = np.zeros((h, w, emb.channels), dtype=np.float64)
    out[in_bounds] = emb.data[tr[in_bounds], tc[in_bounds]]
    valid = in_bounds & ~flow.occluded
    return EmbeddingMap(out), valid
