"""Sample-set construction for the contrastive loss.

Per frame, a fixed budget of samples is spread as evenly as possible across
the instances present there (background counts as one instance when enabled),
with an optional per-instance quota drawn from a band around mask boundaries.
Samples from all frames are concatenated into one cross-modal/temporal union.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fields import FrameGroup, LabelMap
from .rng import philox


@dataclass(frozen=True)
class SamplerConfig:
    total_samples: int = 8192
    boundary_fraction: float = 0.5
    boundary_band: int = 10
    include_background: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.total_samples < 2:
            raise ValueError("total_samples must be >= 2")
        if self.boundary_band < 1:
            raise ValueError("boundary_band must be >= 1")
        if not 0.0 <= self.boundary_fraction <= 1.0:
            raise ValueError("boundary_fraction must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Sample:
    frame_index: int
    pixel: tuple[int, int]
    instance_id: int
    embedding: np.ndarray


class SampleSet:
    """Drawn samples plus an index partitioning them by instance id."""

    def __init__(self, samples):
        self.samples = list(samples)
        index: dict[int, list[int]] = {}
        for k, s in enumerate(self.samples):
            index.setdefault(s.instance_id, []).append(k)
        self.instance_index = index
        self._matrix = None
        self._ids = None

    def __len__(self):
        return len(self.samples)

    def embedding_matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([s.embedding for s in self.samples]).astype(np.float64)
        return self._matrix

    def id_array(self) -> np.ndarray:
        if self._ids is None:
            self._ids = np.array([s.instance_id for s in self.samples], dtype=np.int64)
        return self._ids


def boundary_band_mask(labels: LabelMap, band: int) -> np.ndarray:
    """True at valid pixels within Euclidean distance `band` of a boundary pixel.

    Boundary pixels have a 4-connected neighbor with a different instance_id,
    or sit on the image edge. The comparison is done on integer squared
    distances (via the exact feature transform) so there is no float fuzz.
    """
    if band < 1:
        raise ValueError("band must be >= 1")
    ids = labels.instance_id
    boundary = np.zeros(ids.shape, dtype=bool)
    boundary[0, :] = True
    boundary[-1, :] = True
    boundary[:, 0] = True
    boundary[:, -1] = True
    horiz = ids[:, 1:] != ids[:, :-1]
    boundary[:, 1:] |= horiz
    boundary[:, :-1] |= horiz
    vert = ids[1:, :] != ids[:-1, :]
    boundary[1:, :] |= vert
    boundary[:-1, :] |= vert

    nearest = ndimage.distance_transform_edt(~boundary, return_distances=False, return_indices=True)
    rr, cc = np.indices(ids.shape)
    d2 = (rr - nearest[0]) ** 2 + (cc - nearest[1]) ** 2
    return labels.valid & (d2 <= band * band)


def allocate_evenly(available: dict[int, int], total: int) -> tuple[dict[int, int], int]:
    """Spread `total` draws over instances, floor + remainder by ascending id.

    Instances holding fewer pixels than their quota contribute everything;
    the shortfall is re-spread over the rest until a fixpoint. Returns the
    final allocation and any budget left once every instance is exhausted.
    """
    final: dict[int, int] = {}
    pool = sorted(available)
    budget = int(total)
    while pool and budget > 0:
        base, rem = divmod(budget, len(pool))
        quota = {iid: base + (1 if rank < rem else 0) for rank, iid in enumerate(pool)}
        capped = [iid for iid in pool if available[iid] < quota[iid]]
        if not capped:
            for iid in pool:
                final[iid] = quota[iid]
            return final, 0
        for iid in capped:
            final[iid] = available[iid]
            budget -= available[iid]
        pool = [iid for iid in pool if iid not in capped]
    for iid in pool:
        final.setdefault(iid, 0)
    return final, budget


def _draw_instance_pixels(rng, pix, band_flags, quota, boundary_fraction):
    """Flat pixel indices for one instance honoring the boundary quota.

    Without replacement while the instance has enough pixels; once the quota
    exceeds availability every pixel is taken once and the rest are repeated
    uniform draws.
    """
    n = pix.size
    if quota <= 0:
        return np.empty(0, dtype=np.int64)
    if quota >= n:
        if quota == n:
            return pix.copy()
        extra = rng.choice(pix, size=quota - n, replace=True)
        return np.concatenate([pix, extra])
    if boundary_fraction <= 0.0:
        return rng.choice(pix, size=quota, replace=False)
    band = pix[band_flags]
    inner = pix[~band_flags]
    n_band = min(int(math.floor(quota * boundary_fraction + 0.5)), band.size)
    n_inner = quota - n_band
    if n_inner > inner.size:
        # band is large enough to absorb the shortfall since band+inner >= quota
        n_band = quota - inner.size
        n_inner = inner.size
    parts = []
    if n_band > 0:
        parts.append(rng.choice(band, size=n_band, replace=False))
    if n_inner > 0:
        parts.append(rng.choice(inner, size=n_inner, replace=False))
    return np.concatenate(parts)


def sample_group(group: FrameGroup, cfg: SamplerConfig, stream: int = 0) -> SampleSet:
    """Draw cfg.total_samples per frame, evenly across instances, and union them.

    `stream` keys an independent random stream (e.g. the training step) so
    repeated sampling of one group stays deterministic but not identical.
    Each frame gets its own Philox substream, so per-frame work may run in
    parallel without changing the result.
    """
    if not group.frames:
        raise ValueError("empty group")
    samples = []
    for fi, frame in enumerate(group.frames):
        labels = frame.labels
        emb = frame.embedding.data
        rng = philox(cfg.seed, stream, fi)
        ids_present = labels.present_instances(include_background=cfg.include_background)
        if not ids_present:
            raise ValueError(f"no valid pixels to sample in frame {fi}")
        flat_ids = labels.instance_id.ravel()
        flat_valid = labels.valid.ravel()
        pixels = {iid: np.flatnonzero(flat_valid & (flat_ids == iid)) for iid in ids_present}
        alloc, leftover = allocate_evenly({iid: p.size for iid, p in pixels.items()},
                                          cfg.total_samples)
        if leftover > 0:
            top_up, _ = allocate_evenly({iid: leftover for iid in ids_present}, leftover)
            for iid, extra in top_up.items():
                alloc[iid] = alloc.get(iid, 0) + extra
        band_flat = None
        if cfg.boundary_fraction > 0.0:
            band_flat = boundary_band_mask(labels, cfg.boundary_band).ravel()
        width = labels.width
        for iid in ids_present:
            pix = pixels[iid]
            flags = band_flat[pix] if band_flat is not None else None
            chosen = _draw_instance_pixels(rng, pix, flags, alloc.get(iid, 0),
                                           cfg.boundary_fraction)
            for flat in chosen:
                r, c = divmod(int(flat), width)
                samples.append(Sample(fi, (r, c), iid, emb[r, c].copy()))
    return SampleSet(samples)
