import math

import numpy as np
import pytest

from bevfuse import tensor as T
from bevfuse.detector import (ENCODER_DEPTH, ENCODER_WIDTH, LOSS_WEIGHTS,
                              Detection, PredictionMap, build_targets,
                              concat_fuse, decode, detection_loss, encode,
                              head, init_concat_fusion_params,
                              init_detector_params, load_checkpoint,
                              save_checkpoint, targets_to_prediction,
                              TrainingDivergedError)
from bevfuse.fusion import BevGrid, Modality
from bevfuse.tensor import ParamStore, Tensor, grad_check
from bevfuse.world import GridConfig, ObjectBox, Scene

GC = GridConfig(h=8, w=8, c=6, cell_size_m=0.5)
rng = np.random.default_rng(0)


def scalar(t):
    return float(np.asarray(t.data).reshape(-1)[0])


def make_params(c=6, num_classes=3, seed=1):
    store = ParamStore()
    init_detector_params(store, np.random.default_rng(seed), c, num_classes)
    return store


def bev(data):
    return BevGrid(Tensor(data), Modality.FUSED, GC.cell_size_m)


# -- forward shapes


def test_encode_output_shape():
    params = make_params()
    out = encode(bev(rng.normal(size=(6, 8, 8))), params)
    assert out.shape == (ENCODER_WIDTH, 8, 8)


def test_encode_rejects_channel_mismatch():
    params = make_params()
    with pytest.raises(T.ShapeError):
        encode(bev(rng.normal(size=(5, 8, 8))), params)


def test_head_branch_shapes():
    params = make_params(num_classes=4)
    pred = head(encode(bev(rng.normal(size=(6, 8, 8))), params), params)
    assert pred.objectness.shape == (1, 8, 8)
    assert pred.offsets.shape == (2, 8, 8)
    assert pred.sizes.shape == (2, 8, 8)
    assert pred.yaw.shape == (2, 8, 8)
    assert pred.class_logits.shape == (4, 8, 8)


def test_encoder_weights_shared_across_inputs():
    # the same parameter objects serve every forward pass
    params = make_params()
    a = encode(bev(rng.normal(size=(6, 8, 8))), params)
    b = encode(bev(rng.normal(size=(6, 8, 8))), params)
    assert a.data.shape == b.data.shape
    assert len(params.names()) == 2 * ENCODER_DEPTH + 10


def test_concat_fusion_reduces_channels():
    store = ParamStore()
    init_concat_fusion_params(store, np.random.default_rng(2), 6)
    out = concat_fuse(Tensor(rng.normal(size=(6, 8, 8))),
                      Tensor(rng.normal(size=(6, 8, 8))), store)
    assert out.shape == (6, 8, 8)


def test_concat_fusion_zero_camera_is_linear_map_of_lidar():
    store = ParamStore()
    init_concat_fusion_params(store, np.random.default_rng(2), 4)
    lid = Tensor(rng.normal(size=(4, 5, 5)))
    zero = Tensor(np.zeros((4, 5, 5)))
    out1 = concat_fuse(lid, zero, store).data
    out2 = concat_fuse(T.scale(lid, 2.0), zero, store).data
    bias = concat_fuse(Tensor(np.zeros((4, 5, 5))), zero, store).data
    np.testing.assert_allclose(out2 - bias, 2 * (out1 - bias), atol=1e-4)


# -- target assignment


def test_build_targets_center_cell_and_offsets():
    # box center exactly at a cell center -> offsets (0.5, 0.5)
    box = ObjectBox((0.25, 0.25), (1.5, 1.0), 0.3, 2)
    target = build_targets(Scene([box], seed=0, extent_m=GC.extent_x), GC)
    r, c = GC.h // 2, GC.w // 2
    assert target.positive[r, c]
    assert target.positive.sum() == 1
    np.testing.assert_allclose(target.offsets[:, r, c], [0.5, 0.5])
    np.testing.assert_allclose(target.sizes[:, r, c],
                               [math.log(1.5), math.log(1.0)], rtol=1e-6)
    np.testing.assert_allclose(target.yaw[:, r, c],
                               [math.sin(0.3), math.cos(0.3)], rtol=1e-6)
    assert target.class_ids[r, c] == 2


def test_build_targets_offsets_in_unit_interval():
    scene = Scene([ObjectBox((-1.3, 0.7), (1.0, 1.0), 0.0, 0),
                   ObjectBox((1.01, -0.49), (1.0, 1.0), 1.0, 1)],
                  seed=0, extent_m=GC.extent_x)
    target = build_targets(scene, GC)
    for r, c in zip(*np.nonzero(target.positive)):
        assert 0.0 <= target.offsets[0, r, c] < 1.0
        assert 0.0 <= target.offsets[1, r, c] < 1.0


def test_build_targets_collision_keeps_larger():
    small = ObjectBox((0.1, 0.1), (0.8, 0.8), 0.0, 0)
    large = ObjectBox((0.15, 0.12), (2.0, 1.5), 0.0, 1)
    for order in ([small, large], [large, small]):
        target = build_targets(Scene(order, seed=0, extent_m=GC.extent_x), GC)
        r, c = np.nonzero(target.positive)
        assert len(r) == 1
        assert target.class_ids[r[0], c[0]] == 1


def test_build_targets_out_of_grid_skipped():
    scene = Scene([ObjectBox((50.0, 0.0), (1.0, 1.0), 0.0, 0)],
                  seed=0, extent_m=GC.extent_x)
    assert build_targets(scene, GC).positive.sum() == 0


# -- target -> prediction -> decode round trip


def test_decode_recovers_targets_exactly():
    scene = Scene([ObjectBox((0.6, -1.1), (1.4, 0.9), 0.4, 1),
                   ObjectBox((-1.4, 1.7), (2.0, 1.2), -0.8, 0)],
                  seed=0, extent_m=GC.extent_x)
    target = build_targets(scene, GC)
    pred = targets_to_prediction(target, num_classes=3)
    dets = decode(pred, GC, score_threshold=0.5, nms_radius_m=0.1)
    assert len(dets) == 2
    by_class = {d.box.class_id: d.box for d in dets}
    for box in scene.boxes:
        got = by_class[box.class_id]
        np.testing.assert_allclose(got.center_xy, box.center_xy, atol=1e-5)
        np.testing.assert_allclose(got.size_lw, box.size_lw, rtol=1e-5)
        assert abs(got.yaw - box.yaw) < 1e-5


def test_decode_empty_prediction():
    target = build_targets(Scene([], seed=0, extent_m=GC.extent_x), GC)
    pred = targets_to_prediction(target, num_classes=3)
    assert decode(pred, GC, 0.5, 0.1) == []


def test_decode_rejects_bad_threshold():
    target = build_targets(Scene([], seed=0, extent_m=GC.extent_x), GC)
    pred = targets_to_prediction(target, num_classes=3)
    for thr in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            decode(pred, GC, thr, 0.1)


def test_decode_nms_suppresses_nearby_lower_score():
    obj = np.full((1, 8, 8), -20.0, np.float32)
    obj[0, 4, 4] = 5.0
    obj[0, 4, 5] = 3.0
    obj[0, 1, 1] = 4.0
    pred = PredictionMap(objectness=Tensor(obj),
                         offsets=Tensor(np.full((2, 8, 8), 0.5, np.float32)),
                         sizes=Tensor(np.zeros((2, 8, 8), np.float32)),
                         yaw=Tensor(np.tile(np.array([0.0, 1.0], np.float32)
                                            .reshape(2, 1, 1), (1, 8, 8))),
                         class_logits=Tensor(np.zeros((3, 8, 8), np.float32)))
    dets = decode(pred, GC, 0.5, nms_radius_m=1.0)
    cells = {(round((d.box.center_xy[1] + GC.extent_y) / GC.cell_size_m - 0.5),
              round((d.box.center_xy[0] + GC.extent_x) / GC.cell_size_m - 0.5))
             for d in dets}
    assert cells == {(4, 4), (1, 1)}


def test_decode_deterministic_tiebreak():
    obj = np.full((1, 8, 8), -20.0, np.float32)
    obj[0, 2, 6] = 2.0
    obj[0, 5, 1] = 2.0
    pred = PredictionMap(objectness=Tensor(obj),
                         offsets=Tensor(np.full((2, 8, 8), 0.5, np.float32)),
                         sizes=Tensor(np.zeros((2, 8, 8), np.float32)),
                         yaw=Tensor(np.tile(np.array([0.0, 1.0], np.float32)
                                            .reshape(2, 1, 1), (1, 8, 8))),
                         class_logits=Tensor(np.zeros((3, 8, 8), np.float32)))
    dets = decode(pred, GC, 0.5, 0.1)
    # equal scores: row-major order breaks the tie
    assert dets[0].box.center_xy[1] < dets[1].box.center_xy[1]


# -- loss


def test_loss_near_zero_for_perfect_prediction():
    scene = Scene([ObjectBox((0.6, -1.1), (1.4, 0.9), 0.4, 1)],
                  seed=0, extent_m=GC.extent_x)
    target = build_targets(scene, GC)
    pred = targets_to_prediction(target, num_classes=3)
    loss = scalar(detection_loss(pred, target))
    # BCE floor for saturated +-20 logits is ~2e-9 per cell
    assert loss < 1e-6 * GC.h * GC.w


def test_loss_positive_for_wrong_prediction():
    scene = Scene([ObjectBox((0.6, -1.1), (1.4, 0.9), 0.4, 1)],
                  seed=0, extent_m=GC.extent_x)
    target = build_targets(scene, GC)
    flipped = targets_to_prediction(
        build_targets(Scene([], seed=0, extent_m=GC.extent_x), GC),
        num_classes=3)
    loss = scalar(detection_loss(flipped, target))
    assert loss > 10.0


def test_loss_component_weighting():
    # a pure regression error is weighted 2x against the same L1 magnitude
    scene = Scene([ObjectBox((0.25, 0.25), (1.0, 1.0), 0.0, 0)],
                  seed=0, extent_m=GC.extent_x)
    target = build_targets(scene, GC)
    pred = targets_to_prediction(target, num_classes=3)
    base = scalar(detection_loss(pred, target))
    r, c = GC.h // 2, GC.w // 2
    shifted = pred.offsets.data.copy()
    shifted[0, r, c] += 0.25
    pred_shift = PredictionMap(pred.objectness, Tensor(shifted), pred.sizes,
                               pred.yaw, pred.class_logits)
    delta = scalar(detection_loss(pred_shift, target)) - base
    np.testing.assert_allclose(delta, LOSS_WEIGHTS["regression"] * 0.25,
                               atol=1e-6)


def test_loss_raises_on_nonfinite():
    target = build_targets(Scene([], seed=0, extent_m=GC.extent_x), GC)
    pred = targets_to_prediction(target, num_classes=3)
    bad = pred.objectness.data.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        detection_loss(PredictionMap(Tensor(bad), pred.offsets, pred.sizes,
                                     pred.yaw, pred.class_logits), target)


def test_loss_gradient_matches_finite_differences():
    scene = Scene([ObjectBox((0.6, -1.1), (1.4, 0.9), 0.4, 1)],
                  seed=0, extent_m=GC.extent_x)
    target = build_targets(scene, GC)

    def fn(obj, off, size, yaw, cls):
        return detection_loss(PredictionMap(obj, off, size, yaw, cls), target)

    r = np.random.default_rng(5)
    err = grad_check(fn, [r.normal(size=(1, 8, 8)), r.normal(size=(2, 8, 8)),
                          r.normal(size=(2, 8, 8)), r.normal(size=(2, 8, 8)),
                          r.normal(size=(3, 8, 8))], epsilon=1e-3)
    assert err < 1e-3


def test_end_to_end_gradient_via_suite():
    from bevfuse.gradcheck import suite
    res = suite(channels=4, hw=6, heads=2)
    assert res["end_to_end"] < 1e-3


# -- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    params = make_params()
    manifest = {"config_hash": "ab12", "step_count": 17,
                "fusion_kind": "avg", "baseline": False}
    path = tmp_path / "model.bfl"
    save_checkpoint(path, params, manifest)
    loaded, m2 = load_checkpoint(path)
    assert m2 == manifest
    assert loaded.step_count == 17
    for name in params.names():
        np.testing.assert_array_equal(loaded[name].data, params[name].data)


def test_checkpoint_bytes_deterministic(tmp_path):
    p1, p2 = tmp_path / "a.bfl", tmp_path / "b.bfl"
    save_checkpoint(p1, make_params(seed=3), {"step_count": 0})
    save_checkpoint(p2, make_params(seed=3), {"step_count": 0})
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a.bfl.manifest.json").read_text() == \
        (tmp_path / "b.bfl.manifest.json").read_text()
