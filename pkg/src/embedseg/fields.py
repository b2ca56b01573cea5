"""Dense per-pixel field types shared across the pipeline.

All fields are immutable after construction: payload arrays are marked
read-only, so instances are safe to share between threads. Geometry is
row-major with the origin at the top-left; pixels are addressed (row, col).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODALITIES = ("camera", "range")

MAX_INSTANCE_ID = 2**32 - 1
MAX_SEMANTIC_CLASS = 2**16 - 1


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class EmbeddingMap:
    """Dense h x w x c real field: an input image, predicted embeddings,
    or a per-class score map.

    In-memory data is float64 so loss/gradient math keeps full precision;
    the on-disk element type is float32 (see fileio).
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"embedding data must be h x w x c, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError("height, width and channels must all be >= 1")
        if not np.isfinite(data).all():
            raise ValueError("non-finite value in embedding data")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def vector_at(self, row: int, col: int) -> np.ndarray:
        return self.data[row, col]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel instance id (0 = background), semantic class and validity.

    Pixels with valid=False are excluded from sampling and from metrics;
    warped pseudo-groundtruth uses that flag for occluded / off-image pixels.
    """

    instance_id: np.ndarray
    semantic_class: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        inst = np.ascontiguousarray(self.instance_id, dtype=np.int64)
        sem = np.ascontiguousarray(self.semantic_class, dtype=np.int64)
        val = np.ascontiguousarray(self.valid, dtype=bool)
        if inst.ndim != 2 or min(inst.shape) < 1:
            raise ValueError(f"labels must be 2-d h x w, got shape {inst.shape}")
        if sem.shape != inst.shape or val.shape != inst.shape:
            raise ValueError("instance_id, semantic_class and valid must share one shape")
        if inst.min() < 0 or inst.max() > MAX_INSTANCE_ID:
            raise ValueError("instance id out of range [0, 2^32)")
        if sem.min() < 0 or sem.max() > MAX_SEMANTIC_CLASS:
            raise ValueError("semantic class out of range [0, 2^16)")
        object.__setattr__(self, "instance_id", _frozen(inst))
        object.__setattr__(self, "semantic_class", _frozen(sem))
        object.__setattr__(self, "valid", _frozen(val))

    @property
    def height(self) -> int:
        return self.instance_id.shape[0]

    @property
    def width(self) -> int:
        return self.instance_id.shape[1]

    def present_instances(self, include_background: bool = True) -> list[int]:
        """Instance ids that own at least one valid pixel, ascending."""
        ids = np.unique(self.instance_id[self.valid])
        if not include_background:
            ids = ids[ids != 0]
        return [int(i) for i in ids]


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel 2-d displacement (du along columns, dv along rows).

    `occluded` is indexed by this flow's source frame: True where the pixel
    has no visible correspondence in the target frame.
    """

    du: np.ndarray
    dv: np.ndarray
    occluded: np.ndarray = None

    def __post_init__(self):
        du = np.ascontiguousarray(self.du, dtype=np.float64)
        dv = np.ascontiguousarray(self.dv, dtype=np.float64)
        if du.ndim != 2 or min(du.shape) < 1:
            raise ValueError(f"flow must be 2-d h x w, got shape {du.shape}")
        if dv.shape != du.shape:
            raise ValueError("du and dv must share one shape")
        if not (np.isfinite(du).all() and np.isfinite(dv).all()):
            raise ValueError("non-finite value in flow data")
        occ = self.occluded
        if occ is None:
            occ = np.zeros(du.shape, dtype=bool)
        occ = np.ascontiguousarray(occ, dtype=bool)
        if occ.shape != du.shape:
            raise ValueError("occluded mask must match flow dimensions")
        object.__setattr__(self, "du", _frozen(du))
        object.__setattr__(self, "dv", _frozen(dv))
        object.__setattr__(self, "occluded", _frozen(occ))

    @property
    def height(self) -> int:
        return self.du.shape[0]

    @property
    def width(self) -> int:
        return self.du.shape[1]


@dataclass(frozen=True, eq=False)
class Frame:
    """One (modality, time) view: a dense field plus its labels."""

    modality: str
    time_index: int
    embedding: EmbeddingMap
    labels: LabelMap

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}, expected one of {MODALITIES}")
        if (self.embedding.height, self.embedding.width) != (self.labels.height, self.labels.width):
            raise ValueError("embedding and labels must share spatial dimensions")


@dataclass(frozen=True, eq=False)
class FrameGroup:
    """Frames across modalities/time sharing a channel count.

    With consistent_ids=True the same instance_id denotes the same physical
    object in every member frame; the cross-frame sample union relies on it.
    """

    frames: tuple[Frame, ...]
    consistent_ids: bool = True

    def __post_init__(self):
        frames = tuple(self.frames)
        channels = {f.embedding.channels for f in frames}
        if len(channels) > 1:
            raise ValueError(f"all frames in a group must share one channel count, got {sorted(channels)}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)


def merge_groups(groups, consistent_ids: bool = True) -> FrameGroup:
    """Concatenate the frames of several groups into one, in group order."""
    frames = []
    for g in groups:
        frames.extend(g.frames)
    return FrameGroup(tuple(frames), consistent_ids=consistent_ids)


def select_frames(groups, modalities=None, times=None, consistent_ids: bool = True) -> FrameGroup:
    """Union of frames filtered by modality and/or time index."""
    frames = []
    for g in groups:
        for f in g.frames:
            if modalities is not None and f.modality not in modalities:
                continue
            if times is not None and f.time_index not in times:
                continue
            frames.append(f)
    if not frames:
        raise ValueError("frame selection is empty")
    return FrameGroup(tuple(frames), consistent_ids=consistent_ids)
