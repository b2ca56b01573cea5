import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import embedseg as es
from embedseg.errors import FormatError
from embedseg.fileio import KIND_EMBEDDING, MAGIC, _HEADER

from helpers import make_labels


def f32(values):
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def test_embedding_round_trip(tmp_path):
    data = f32(np.arange(12).reshape(2, 2, 3) * 0.5 - 2.0)
    path = tmp_path / "a.emb"
    es.save_field(es.EmbeddingMap(data), path)
    loaded = es.load_field(path)
    assert isinstance(loaded, es.EmbeddingMap)
    assert np.array_equal(loaded.data, data)


def test_label_round_trip(tmp_path):
    inst = np.array([[0, 1], [7, 0]])
    labels = make_labels(inst, semantic=np.array([[0, 2], [5, 0]]),
                         valid=np.array([[True, False], [True, True]]))
    path = tmp_path / "a.lbl"
    es.save_field(labels, path)
    loaded = es.load_field(path)
    assert np.array_equal(loaded.instance_id, inst)
    assert np.array_equal(loaded.semantic_class, labels.semantic_class)
    assert np.array_equal(loaded.valid, labels.valid)


def test_flow_round_trip(tmp_path):
    du = f32([[0.5, -1.25], [3.0, 0.0]])
    dv = f32([[2.0, 0.0], [-0.5, 1.0]])
    occ = np.array([[False, True], [False, False]])
    path = tmp_path / "a.flow"
    es.save_field(es.FlowField(du, dv, occ), path)
    loaded = es.load_field(path)
    assert np.array_equal(loaded.du, du)
    assert np.array_equal(loaded.dv, dv)
    assert np.array_equal(loaded.occluded, occ)


def test_nan_embedding_rejected():
    data = np.zeros((2, 2, 1))
    data[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite value"):
        es.EmbeddingMap(data)


def test_float32_overflow_rejected(tmp_path):
    field = es.EmbeddingMap(np.full((1, 1, 1), 1e300))
    with pytest.raises(ValueError, match="non-finite value"):
        es.save_field(field, tmp_path / "x.emb")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.emb"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(FormatError, match="bad magic"):
        es.load_field(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "short.emb"
    es.save_field(es.EmbeddingMap(f32(np.ones((2, 2, 3)))), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-1])
    with pytest.raises(FormatError, match="truncated"):
        es.load_field(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "long.emb"
    es.save_field(es.EmbeddingMap(f32(np.ones((2, 2, 3)))), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="length mismatch"):
        es.load_field(path)


def test_header_payload_disagreement(tmp_path):
    # declared dims say 3x3x2 but payload holds one f32 less
    payload = b"\x00" * (3 * 3 * 2 * 4 - 4)
    path = tmp_path / "dis.emb"
    path.write_bytes(_HEADER.pack(MAGIC, KIND_EMBEDDING, 3, 3, 2) + payload)
    with pytest.raises(FormatError, match="truncated"):
        es.load_field(path)


def test_unknown_kind(tmp_path):
    path = tmp_path / "kind.emb"
    path.write_bytes(_HEADER.pack(MAGIC, 9, 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(FormatError, match="unknown kind"):
        es.load_field(path)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 16), w=st.integers(1, 16), c=st.integers(1, 5),
       kind=st.sampled_from(["emb", "lbl", "flow"]), seed=st.integers(0, 2**31))
def test_round_trip_property(tmp_path_factory, h, w, c, kind, seed):
    rng = np.random.default_rng(seed)
    path = tmp_path_factory.mktemp("rt") / "field.bin"
    if kind == "emb":
        field = es.EmbeddingMap(f32(rng.normal(size=(h, w, c))))
        es.save_field(field, path)
        assert np.array_equal(es.load_field(path).data, field.data)
    elif kind == "lbl":
        field = make_labels(rng.integers(0, 9, size=(h, w)),
                            semantic=rng.integers(0, 4, size=(h, w)),
                            valid=rng.random((h, w)) < 0.8)
        es.save_field(field, path)
        loaded = es.load_field(path)
        assert np.array_equal(loaded.instance_id, field.instance_id)
        assert np.array_equal(loaded.semantic_class, field.semantic_class)
        assert np.array_equal(loaded.valid, field.valid)
    else:
        field = es.FlowField(f32(rng.normal(size=(h, w))), f32(rng.normal(size=(h, w))),
                             rng.random((h, w)) < 0.5)
        es.save_field(field, path)
        loaded = es.load_field(path)
        assert np.array_equal(loaded.du, field.du)
        assert np.array_equal(loaded.dv, field.dv)
        assert np.array_equal(loaded.occluded, field.occluded)


def test_round_trip_at_dim_bound(tmp_path):
    # 4096 is the upper end of the supported dimension range
    data = f32(np.linspace(-1, 1, 4096 * 3 * 2).reshape(4096, 3, 2))
    path = tmp_path / "big.emb"
    es.save_field(es.EmbeddingMap(data), path)
    assert np.array_equal(es.load_field(path).data, data)


def test_label_png_round_trip(tmp_path):
    inst = np.array([[0, 1, 2], [40000, 7, 0]])
    path = tmp_path / "ids.png"
    es.save_label_png(make_labels(inst), path)
    loaded = es.load_label_png(path)
    assert np.array_equal(loaded.instance_id, inst)
    assert loaded.valid.all()


def test_label_png_id_overflow(tmp_path):
    labels = make_labels(np.array([[70000]]))
    with pytest.raises(ValueError, match="16-bit"):
        es.save_label_png(labels, tmp_path / "ids.png")


def test_flo_round_trip(tmp_path):
    du = f32([[1.5, -2.0]])
    dv = f32([[0.25, 4.0]])
    path = tmp_path / "f.flo"
    es.save_flo(es.FlowField(du, dv), path)
    loaded = es.load_flo(path)
    assert np.array_equal(loaded.du, du)
    assert np.array_equal(loaded.dv, dv)
    # magic is the PIEH float
    assert path.read_bytes()[:4] == struct.pack("<f", 202021.25)


def test_flo_bad_magic(tmp_path):
    path = tmp_path / "bad.flo"
    path.write_bytes(b"JUNK" + b"\x00" * 16)
    with pytest.raises(FormatError, match="bad magic"):
        es.load_flo(path)


def test_fields_are_immutable():
    emb = es.EmbeddingMap(np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        emb.data[0, 0, 0] = 1.0
    labels = make_labels(np.zeros((2, 2), dtype=int))
    with pytest.raises(ValueError):
        labels.instance_id[0, 0] = 3


def test_frame_group_channel_invariant():
    labels = make_labels(np.zeros((2, 2), dtype=int))
    f1 = es.Frame("camera", 0, es.EmbeddingMap(np.zeros((2, 2, 3))), labels)
    f2 = es.Frame("range", 0, es.EmbeddingMap(np.zeros((2, 2, 2))), labels)
    with pytest.raises(ValueError, match="channel count"):
        es.FrameGroup((f1, f2))


def test_frame_rejects_unknown_modality():
    labels = make_labels(np.zeros((2, 2), dtype=int))
    with pytest.raises(ValueError, match="modality"):
        es.Frame("lidar", 0, es.EmbeddingMap(np.zeros((2, 2, 1))), labels)


def test_frame_rejects_dim_mismatch():
    labels = make_labels(np.zeros((3, 2), dtype=int))
    with pytest.raises(ValueError, match="spatial"):
        es.Frame("camera", 0, es.EmbeddingMap(np.zeros((2, 2, 1))), labels)


def test_merge_and_select_frames():
    labels = make_labels(np.zeros((2, 2), dtype=int))
    emb = es.EmbeddingMap(np.zeros((2, 2, 2)))
    g0 = es.FrameGroup((es.Frame("camera", 0, emb, labels),
                        es.Frame("range", 0, emb, labels)))
    g1 = es.FrameGroup((es.Frame("camera", 1, emb, labels),
                        es.Frame("range", 1, emb, labels)))
    merged = es.merge_groups([g0, g1])
    assert len(merged) == 4
    cam = es.select_frames([g0, g1], modalities=("camera",))
    assert [f.time_index for f in cam.frames] == [0, 1]
    t0 = es.select_frames([g0, g1], times=(0,))
    assert {f.modality for f in t0.frames} == {"camera", "range"}
    with pytest.raises(ValueError, match="empty"):
        es.select_frames([g0], modalities=("camera",), times=(5,))
