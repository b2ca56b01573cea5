"""Bit-exact serialization for dense fields.

EMB1 container, little-endian:

    magic "EMB1" (4 bytes) | kind u8 | height u32 | width u32 | channels u32 | payload

kind 1 = embedding, payload h*w*c float32
kind 2 = label,     payload h*w * (instance u32, semantic u16, valid u8), channels 1
kind 3 = flow,      payload h*w * (du f32, dv f32, occluded u8), channels 2

Label maps can additionally be exported/imported as 16-bit grayscale PNG
(instance ids only). Flow fields can be exchanged in the Middlebury .flo
layout (magic "PIEH", interleaved f32 u,v) which carries no occlusion mask.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import FormatError
from .fields import EmbeddingMap, FlowField, LabelMap

MAGIC = b"EMB1"
KIND_EMBEDDING = 1
KIND_LABEL = 2
KIND_FLOW = 3

_HEADER = struct.Struct("<4sBIII")
_MAX_U32 = 2**32 - 1

_LABEL_DTYPE = np.dtype([("instance", "<u4"), ("semantic", "<u2"), ("valid", "u1")])
_FLOW_DTYPE = np.dtype([("du", "<f4"), ("dv", "<f4"), ("occluded", "u1")])

_FLO_MAGIC = 202021.25


def _check_dims(*dims):
    for d in dims:
        if d > _MAX_U32:
            raise ValueError(f"dimension overflow: {d} does not fit in u32")


def _f32_payload(data, name):
    with np.errstate(over="ignore"):
        out = np.asarray(data).astype("<f4")
    if not np.isfinite(out).all():
        raise ValueError(f"non-finite value in {name} after float32 conversion")
    return out


def save_field(field, path) -> None:
    """Write an EmbeddingMap / LabelMap / FlowField in the EMB1 format."""
    if isinstance(field, EmbeddingMap):
        h, w, c = field.data.shape
        _check_dims(h, w, c)
        header = _HEADER.pack(MAGIC, KIND_EMBEDDING, h, w, c)
        payload = _f32_payload(field.data, "embedding").tobytes()
    elif isinstance(field, LabelMap):
        h, w = field.instance_id.shape
        _check_dims(h, w)
        header = _HEADER.pack(MAGIC, KIND_LABEL, h, w, 1)
        rec = np.empty(h * w, dtype=_LABEL_DTYPE)
        rec["instance"] = field.instance_id.ravel()
        rec["semantic"] = field.semantic_class.ravel()
        rec["valid"] = field.valid.ravel()
        payload = rec.tobytes()
    elif isinstance(field, FlowField):
        h, w = field.du.shape
        _check_dims(h, w)
        header = _HEADER.pack(MAGIC, KIND_FLOW, h, w, 2)
        rec = np.empty(h * w, dtype=_FLOW_DTYPE)
        rec["du"] = _f32_payload(field.du, "flow").ravel()
        rec["dv"] = _f32_payload(field.dv, "flow").ravel()
        rec["occluded"] = field.occluded.ravel()
        payload = rec.tobytes()
    else:
        raise TypeError(f"cannot serialize {type(field).__name__}")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_field(path):
    """Read an EMB1 file back into its typed field, validating invariants."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, kind, h, w, c = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    payload = blob[_HEADER.size:]
    if kind == KIND_EMBEDDING:
        expected = h * w * c * 4
    elif kind == KIND_LABEL:
        if c != 1:
            raise FormatError(f"label kind requires channels=1, got {c}")
        expected = h * w * _LABEL_DTYPE.itemsize
    elif kind == KIND_FLOW:
        if c != 2:
            raise FormatError(f"flow kind requires channels=2, got {c}")
        expected = h * w * _FLOW_DTYPE.itemsize
    else:
        raise FormatError(f"unknown kind {kind}")
    if len(payload) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(payload)}")
    if len(payload) > expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {len(payload)}")

    if kind == KIND_EMBEDDING:
        data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
        return EmbeddingMap(data.astype(np.float64))
    if kind == KIND_LABEL:
        rec = np.frombuffer(payload, dtype=_LABEL_DTYPE)
        return LabelMap(
            instance_id=rec["instance"].reshape(h, w).astype(np.int64),
            semantic_class=rec["semantic"].reshape(h, w).astype(np.int64),
            valid=rec["valid"].reshape(h, w).astype(bool),
        )
    rec = np.frombuffer(payload, dtype=_FLOW_DTYPE)
    return FlowField(
        du=rec["du"].reshape(h, w).astype(np.float64),
        dv=rec["dv"].reshape(h, w).astype(np.float64),
        occluded=rec["occluded"].reshape(h, w).astype(bool),
    )


def save_label_png(labels: LabelMap, path) -> None:
    """Export instance ids as a 16-bit grayscale PNG (ids only)."""
    ids = labels.instance_id
    if ids.max() > 65535:
        raise ValueError("instance id exceeds 16-bit PNG range")
    Image.fromarray(ids.astype(np.uint16)).save(path, format="PNG")


def load_label_png(path) -> LabelMap:
    """Import instance ids from a 16-bit PNG; semantics 0, everything valid."""
    ids = np.asarray(Image.open(path), dtype=np.int64)
    if ids.ndim != 2:
        raise FormatError("label PNG must be single-channel")
    return LabelMap(
        instance_id=ids,
        semantic_class=np.zeros_like(ids),
        valid=np.ones(ids.shape, dtype=bool),
    )


def save_flo(flow: FlowField, path) -> None:
    """Write the Middlebury .flo layout (drops the occlusion mask)."""
    h, w = flow.du.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = flow.du
    data[..., 1] = flow.dv
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", _FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def load_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError("truncated .flo header")
    magic = struct.unpack_from("<f", blob)[0]
    if magic != _FLO_MAGIC:
        raise FormatError(f"bad magic {magic!r} in .flo file")
    w, h = struct.unpack_from("<ii", blob, 4)
    expected = h * w * 2 * 4
    payload = blob[12:]
    if len(payload) != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return FlowField(du=data[..., 0].astype(np.float64), dv=data[..., 1].astype(np.float64))


def save_gray_png(values, path) -> None:
    """Write a [0, 1] scalar field as an 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path, format="PNG")


def save_rgb_png(rgb_u8, path) -> None:
    Image.fromarray(np.asarray(rgb_u8, dtype=np.uint8), mode="RGB").save(path, format="PNG")
