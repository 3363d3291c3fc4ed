import numpy as np
import pytest

from pointclick.decoder import StageOutput
from pointclick.model import ModelConfig, init_model
from pointclick.pipeline import finalize, segment, snap_clicks
from pointclick.sampling import ClickSet
from tests.conftest import TINY_MODEL_CONFIG


def _stage(mask_logits, class_logits, k):
    return StageOutput(
        mask_logits=np.asarray(mask_logits, dtype=float),
        class_logits=np.asarray(class_logits, dtype=float),
        q_t=np.zeros((k, 4)),
        q_a=np.zeros((k, 4)),
    )


def _clicks(k, groups):
    return ClickSet(clicks=np.zeros((k, 3)), instance_group=groups)


def test_finalize_hand_argmax():
    stage = _stage([[2.0, 0.1], [0.3, 4.0]], [[1.0, 0.0], [0.0, 1.0]], 2)
    res = finalize(stage, _clicks(2, [0, 1]))
    assert res.point_instance.tolist() == [0, 1]


def test_finalize_all_background():
    stage = _stage(np.full((4, 2), -5.0), np.zeros((3, 2)), 2)
    res = finalize(stage, _clicks(2, [0, 1]))
    assert res.point_instance.tolist() == [-1, -1, -1, -1]
    assert res.point_class.tolist() == [-1, -1, -1, -1]


def test_finalize_group_union():
    # two clicks in one group claim disjoint point sets; union is one instance
    mask = np.array([
        [5.0, -5.0],
        [5.0, -5.0],
        [-5.0, 5.0],
        [-5.0, -5.0],
    ])
    stage = _stage(mask, np.zeros((3, 2)), 2)
    res = finalize(stage, _clicks(2, [7, 7]))
    assert res.point_instance.tolist() == [7, 7, 7, -1]
    assert res.groups.tolist() == [7]


def test_finalize_tie_breaks_to_smaller_query():
    stage = _stage([[1.5, 1.5]], np.zeros((3, 2)), 2)
    res = finalize(stage, _clicks(2, [3, 9]))
    assert res.point_instance.tolist() == [3]


def test_finalize_point_class_from_winning_query():
    mask = np.array([[4.0, -4.0], [-4.0, 4.0]])
    z = np.array([[3.0, -1.0], [0.0, 2.0], [-2.0, 0.5]])
    res = finalize(_stage(mask, z, 2), _clicks(2, [0, 1]))
    assert res.point_class.tolist() == [0, 1]


def test_finalize_merged_group_class_highest_confidence():
    mask = np.array([[4.0, -4.0], [-4.0, 4.0]])
    # query 1 is much more confident; the group reports its class
    z = np.array([[0.5, -8.0], [0.1, 8.0], [0.0, -8.0]])
    res = finalize(_stage(mask, z, 2), _clicks(2, [0, 0]))
    assert res.group_class[0] == 1
    assert res.group_confidence[0] == pytest.approx(1.0, abs=1e-4)


def test_segment_rejects_empty_clicks(tiny_model, tiny_scene):
    cloud, _, _ = tiny_scene
    with pytest.raises(ValueError, match="at least one click"):
        segment(cloud, None, tiny_model)


def test_segment_partition_invariants(tiny_model, tiny_scene):
    cloud, inst, _ = tiny_scene
    rng = np.random.default_rng(0)
    picks = rng.choice(cloud.n_points, size=3, replace=False)
    clicks = ClickSet(clicks=cloud.positions[picks], instance_group=[0, 1, 2])
    res = segment(cloud, clicks, tiny_model)
    # mutual exclusivity + coverage: every point gets exactly one label
    assert res.point_instance.shape == (cloud.n_points,)
    assert set(np.unique(res.point_instance)) <= {-1, 0, 1, 2}
    bg = res.point_instance == -1
    assert np.all(res.point_class[bg] == -1)
    assert np.all(res.point_class[~bg] >= 0)


def test_segment_duplicate_click_grouping_idempotent(tiny_model, tiny_scene):
    cloud, _, _ = tiny_scene
    p = cloud.positions[5]
    one = segment(cloud, ClickSet(clicks=p[None, :], instance_group=[0]), tiny_model)
    two = segment(
        cloud, ClickSet(clicks=np.stack([p, p]), instance_group=[0, 0]), tiny_model
    )
    assert np.array_equal(one.point_instance, two.point_instance)


def test_segment_click_order_permutation_relabels(tiny_model, tiny_scene):
    cloud, _, _ = tiny_scene
    rng = np.random.default_rng(1)
    picks = rng.choice(cloud.n_points, size=3, replace=False)
    a = segment(cloud, ClickSet(clicks=cloud.positions[picks], instance_group=[0, 1, 2]), tiny_model)
    perm = [2, 0, 1]
    b = segment(
        cloud,
        ClickSet(clicks=cloud.positions[picks[perm]], instance_group=np.array([0, 1, 2])[perm]),
        tiny_model,
    )
    assert np.array_equal(a.point_instance, b.point_instance)


def test_segment_deterministic(tiny_model, tiny_scene):
    cloud, _, _ = tiny_scene
    clicks = ClickSet(clicks=cloud.positions[[4, 40]], instance_group=[0, 1])
    a = segment(cloud, clicks, tiny_model)
    b = segment(cloud, clicks, tiny_model)
    assert np.array_equal(a.point_instance, b.point_instance)
    assert np.array_equal(a.point_class, b.point_class)


def test_snap_clicks_to_nearest_point():
    from pointclick.geometry import PointCloud

    cloud = PointCloud(positions=[[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    clicks = ClickSet(clicks=[[0.9, 0.05, 0.0]], instance_group=[0])
    snapped, idx = snap_clicks(cloud, clicks)
    assert idx.tolist() == [1]
    assert np.array_equal(snapped.clicks[0], [1, 0, 0])


def test_segment_translation_invariance(tiny_scene):
    cloud, _, _ = tiny_scene
    model = init_model(ModelConfig(**TINY_MODEL_CONFIG), seed=2)
    from pointclick.geometry import PointCloud

    picks = [3, 30]
    clicks = ClickSet(clicks=cloud.positions[picks], instance_group=[0, 1])
    a = segment(cloud, clicks, model, keep_stages=True)
    shift = np.array([55.0, -3.0, 12.0])
    moved = PointCloud(positions=cloud.positions + shift, id=cloud.id)
    b = segment(
        moved,
        ClickSet(clicks=cloud.positions[picks] + shift, instance_group=[0, 1]),
        model,
        keep_stages=True,
    )
    assert np.array_equal(a.point_instance, b.point_instance)
    assert np.allclose(
        a.stage_outputs[-1].mask_logits, b.stage_outputs[-1].mask_logits, atol=1e-6
    )
