import numpy as np
import pytest

import embedseg as es
from embedseg import scenes


def test_static_scene_is_constant():
    spec = es.SceneSpec(n_objects=1, frames=2, motion=((0, 0),), seed=4)
    groups, flows = es.generate(spec)
    lab0 = groups[0].frames[0].labels
    lab1 = groups[1].frames[0].labels
    assert np.array_equal(lab0.instance_id, lab1.instance_id)
    assert not flows[0].du.any() and not flows[0].dv.any()
    assert not flows[0].occluded.any()


def test_flow_matches_object_motion():
    spec = es.SceneSpec(n_objects=2, frames=2, motion=((2, 0), (0, 2)), seed=8)
    groups, flows = es.generate(spec)
    lab = groups[0].frames[0].labels
    flow = flows[0]
    assert (flow.du[lab.instance_id == 1] == 2).all()
    assert (flow.dv[lab.instance_id == 1] == 0).all()
    assert (flow.du[lab.instance_id == 2] == 0).all()
    assert (flow.dv[lab.instance_id == 2] == 2).all()
    assert (flow.du[lab.instance_id == 0] == 0).all()


def test_warp_reproduces_next_frame_exactly():
    for seed in range(10):
        spec = es.SceneSpec(seed=100 + seed)
        groups, flows = es.generate(spec)
        for t in range(spec.frames - 1):
            lab_t = groups[t].frames[0].labels
            lab_next = groups[t + 1].frames[0].labels
            res = es.warp_labels(lab_t, flows[t])
            both = res.warped_labels.valid & lab_next.valid
            assert both.any()
            assert np.array_equal(res.warped_labels.instance_id[both],
                                  lab_next.instance_id[both])
            assert np.array_equal(res.warped_labels.semantic_class[both],
                                  lab_next.semantic_class[both])


def test_same_seed_bit_identical():
    a_groups, a_flows = es.generate(es.SceneSpec(seed=77))
    b_groups, b_flows = es.generate(es.SceneSpec(seed=77))
    for ga, gb in zip(a_groups, b_groups):
        for fa, fb in zip(ga.frames, gb.frames):
            assert np.array_equal(fa.embedding.data, fb.embedding.data)
            assert np.array_equal(fa.labels.instance_id, fb.labels.instance_id)
    for fl_a, fl_b in zip(a_flows, b_flows):
        assert np.array_equal(fl_a.du, fl_b.du)
    c_groups, _ = es.generate(es.SceneSpec(seed=78))
    assert not np.array_equal(a_groups[0].frames[0].embedding.data,
                              c_groups[0].frames[0].embedding.data)


def test_modalities_share_instance_ids():
    groups, _ = es.generate(es.SceneSpec(seed=5))
    for g in groups:
        cam = [f for f in g.frames if f.modality == "camera"][0]
        rng_frame = [f for f in g.frames if f.modality == "range"][0]
        assert cam.labels.present_instances() == rng_frame.labels.present_instances()
        assert np.array_equal(cam.labels.instance_id, rng_frame.labels.instance_id)


def test_camera_and_range_channel_counts_match():
    groups, _ = es.generate(es.SceneSpec(seed=5, camera_channels=2))
    for g in groups:
        assert len({f.embedding.channels for f in g.frames}) == 1


def test_objects_keep_high_visibility():
    for seed in range(8):
        spec = es.SceneSpec(seed=300 + seed)
        groups, _ = es.generate(spec)
        for g in groups:
            lab = g.frames[0].labels
            for iid in range(1, spec.n_objects + 1):
                assert (lab.instance_id == iid).sum() > 200


def test_impossible_spec_raises():
    with pytest.raises(ValueError, match="impossible spec"):
        es.generate(es.SceneSpec(height=16, width=16, n_objects=1, seed=1))


def test_non_integral_motion_rejected():
    with pytest.raises(ValueError, match="integral"):
        es.SceneSpec(n_objects=1, motion=((0.5, 1),))


def test_one_hot_scores():
    groups, _ = es.generate(es.SceneSpec(seed=9))
    lab = groups[0].frames[0].labels
    spec_classes = es.SceneSpec(seed=9).total_classes
    scores = es.one_hot_scores(lab, spec_classes)
    assert scores.channels == spec_classes
    assert np.allclose(scores.data.sum(axis=2), 1.0)
    assert np.array_equal(scores.data.argmax(axis=2), lab.semantic_class)


def test_scene_dir_round_trip(tmp_path):
    spec = es.SceneSpec(seed=21, frames=2)
    groups, flows = es.generate(spec)
    scenes.write_scene_dir(tmp_path / "scene_0000", groups, flows)
    expected = {"frame_0_camera.emb", "frame_0_camera.lbl", "frame_0_camera.png",
                "frame_0_range.emb", "frame_0_range.lbl", "frame_0_range.png",
                "frame_1_camera.emb", "frame_1_camera.lbl", "frame_1_camera.png",
                "frame_1_range.emb", "frame_1_range.lbl", "frame_1_range.png",
                "flow_0.flo", "flow_0.emb"}
    assert {p.name for p in (tmp_path / "scene_0000").iterdir()} == expected
    loaded_groups, loaded_flows = scenes.load_scene_dir(
        tmp_path / "scene_0000", spec.frames, spec.modalities)
    for ga, gb in zip(groups, loaded_groups):
        for fa, fb in zip(ga.frames, gb.frames):
            assert np.array_equal(fa.labels.instance_id, fb.labels.instance_id)
            assert np.allclose(fa.embedding.data, fb.embedding.data, atol=1e-7)
    assert np.array_equal(loaded_flows[0].occluded, flows[0].occluded)
