import numpy as np
import pytest

from pointclick.encoder import (
    EncoderConfig,
    encode_queries,
    encode_scene,
    init_encoder_params,
    scatter_mean,
    scatter_sum,
)
from pointclick.geometry import PointCloud, build_index, knn, normalize_cloud
from pointclick.sampling import ClickSet

CFG = EncoderConfig(level_dims=(12, 18), voxel_sizes=(0.12, 0.3), out_dim=24, pe_bands=3)


@pytest.fixture(scope="module")
def enc_params():
    return init_encoder_params(CFG, np.random.default_rng(0), dtype=np.float64)


def _norm_cloud(seed=0, n=90):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(positions=rng.uniform(-3, 3, size=(n, 3)))
    return normalize_cloud(cloud)[0]


def test_scatter_helpers_match_loops():
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(40, 5))
    inv = rng.integers(0, 7, size=40)
    sums = scatter_sum(vals, inv, 7)
    means, counts = scatter_mean(vals, inv, 7)
    for c in range(7):
        members = vals[inv == c]
        if members.size:
            assert np.allclose(sums[c], members.sum(axis=0))
            assert np.allclose(means[c], members.mean(axis=0))


def test_encode_shapes(enc_params):
    cloud = _norm_cloud()
    feats = encode_scene(cloud, enc_params, CFG)
    assert feats.full_res.shape == (90, 24)
    assert len(feats.features) == 3        # raw + two levels
    assert feats.features[1].shape[1] == 12
    assert feats.features[2].shape[1] == 18
    n_sizes = [f.shape[0] for f in feats.features]
    assert n_sizes[0] == 90
    assert n_sizes[1] >= n_sizes[2]        # coarser scales never grow
    for f in feats.features:
        assert np.all(np.isfinite(f))


def test_encode_single_point_cloud(enc_params):
    cloud = PointCloud(positions=[[0.0, 0.0, 0.0]])
    feats = encode_scene(cloud, enc_params, CFG)
    assert all(f.shape[0] == 1 for f in feats.features)
    assert feats.full_res.shape == (1, 24)


def test_encode_translation_invariance_pre_normalization(enc_params):
    rng = np.random.default_rng(2)
    pos = rng.uniform(0, 4, size=(120, 3))
    a = encode_scene(normalize_cloud(PointCloud(positions=pos))[0], enc_params, CFG)
    b = encode_scene(
        normalize_cloud(PointCloud(positions=pos + [100.0, -40.0, 7.0]))[0],
        enc_params, CFG,
    )
    assert np.allclose(a.full_res, b.full_res, atol=1e-6)


def test_degenerate_hierarchy_error(enc_params):
    # two nearly coincident points collapse every voxel level to one cell
    cloud = PointCloud(positions=[[0.0, 0.0, 0.0], [1e-4, 0.0, 0.0]])
    with pytest.raises(ValueError, match="degenerate hierarchy"):
        encode_scene(cloud, enc_params, CFG)


def test_query_exact_row_copy(enc_params):
    cloud = _norm_cloud(seed=3)
    feats = encode_scene(cloud, enc_params, CFG)
    j = 17
    clicks = ClickSet(clicks=cloud.positions[j][None, :], instance_group=[0])
    qf = encode_queries(clicks, cloud, feats, k=1)
    assert np.array_equal(qf.q[0], feats.full_res[j])


def test_query_full_average(enc_params):
    cloud = _norm_cloud(seed=4, n=40)
    feats = encode_scene(cloud, enc_params, CFG)
    clicks = ClickSet(clicks=cloud.positions[5][None, :], instance_group=[0])
    qf = encode_queries(clicks, cloud, feats, k=40)
    assert np.allclose(qf.q[0], feats.full_res.mean(axis=0), atol=1e-12)


def test_duplicate_clicks_identical_rows(enc_params):
    cloud = _norm_cloud(seed=5)
    feats = encode_scene(cloud, enc_params, CFG)
    p = cloud.positions[8]
    clicks = ClickSet(clicks=np.stack([p, p]), instance_group=[0, 1])
    qf = encode_queries(clicks, cloud, feats, k=1)
    assert np.array_equal(qf.q[0], qf.q[1])


def test_query_k_exceeds_points(enc_params):
    cloud = _norm_cloud(seed=6, n=10)
    feats = encode_scene(cloud, enc_params, CFG)
    clicks = ClickSet(clicks=cloud.positions[0][None, :], instance_group=[0])
    with pytest.raises(ValueError, match="insufficient"):
        encode_queries(clicks, cloud, feats, k=11)


def test_query_lookup_matches_knn(enc_params):
    cloud = _norm_cloud(seed=7)
    feats = encode_scene(cloud, enc_params, CFG)
    index = build_index(cloud)
    q = cloud.positions[33] + 1e-3
    clicks = ClickSet(clicks=q[None, :], instance_group=[0])
    qf = encode_queries(clicks, cloud, feats, k=1)
    expect = feats.full_res[knn(index, q, 1)[0]]
    assert np.array_equal(qf.q[0], expect)


def test_permutation_equivariant_lookup(enc_params):
    # the same physical click yields the same query row under input permutation
    cloud = _norm_cloud(seed=8)
    feats_a = encode_scene(cloud, enc_params, CFG)
    rng = np.random.default_rng(9)
    perm = rng.permutation(cloud.n_points)
    cloud_p = PointCloud(positions=cloud.positions[perm])
    feats_b = encode_scene(cloud_p, enc_params, CFG)
    j = 21
    clicks = ClickSet(clicks=cloud.positions[j][None, :], instance_group=[0])
    qa = encode_queries(clicks, cloud, feats_a, k=1)
    qb = encode_queries(clicks, cloud_p, feats_b, k=1)
    assert np.allclose(qa.q, qb.q, atol=1e-8)


def test_attr_dim_mismatch_rejected():
    cfg = EncoderConfig(level_dims=(12,), voxel_sizes=(0.3,), out_dim=12, pe_bands=2, attr_dim=3)
    params = init_encoder_params(cfg, np.random.default_rng(0))
    cloud = _norm_cloud(seed=10, n=30)
    with pytest.raises(ValueError, match="attr_dim"):
        encode_scene(cloud, params, cfg)
