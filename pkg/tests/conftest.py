import numpy as np
import pytest

from pointclick.evaluation import initial_clicks
from pointclick.geometry import PointCloud, build_index, normalize_cloud
from pointclick.losses import build_targets
from pointclick.model import ModelConfig, init_model
from pointclick.pipeline import snap_clicks
from pointclick.sampling import ClickSet
from pointclick.synthdata import SceneSpec, generate_scene


TINY_MODEL_CONFIG = dict(
    level_dims=(12, 18),
    voxel_sizes=(0.12, 0.3),
    d_model=24,
    ffn_hidden=32,
    pe_bands=3,
    n_classes=8,
    n_prototypes=8,
    stages=2,
    dtype="float64",
)


@pytest.fixture(scope="session")
def tiny_scene():
    """~80-point scene with 3 instances; small enough for finite differences."""
    spec = SceneSpec(
        n_instances_min=2, n_instances_max=3,
        points_per_instance_min=16, points_per_instance_max=24,
        floor_points=12, seed=3,
    )
    return generate_scene(spec)


@pytest.fixture(scope="session")
def tiny_model():
    return init_model(ModelConfig(**TINY_MODEL_CONFIG), seed=0)


@pytest.fixture(scope="session")
def tiny_setup(tiny_scene, tiny_model):
    """Normalized cloud, snapped clicks, and targets ready for the model."""
    cloud, inst, cls = tiny_scene
    clicks, inst_to_group = initial_clicks(cloud, inst, 2, seed=0)
    cloud_norm, tf = normalize_cloud(cloud)
    index = build_index(cloud_norm)
    clicks_norm, _ = snap_clicks(
        cloud_norm,
        ClickSet(tf.apply(clicks.clicks), clicks.instance_group, clicks.source_instance),
        index=index,
    )
    targets = build_targets(clicks_norm, inst, cls)
    return {
        "cloud": cloud,
        "cloud_norm": cloud_norm,
        "index": index,
        "clicks_norm": clicks_norm,
        "targets": targets,
        "instance_ids": inst,
        "class_ids": cls,
        "instance_to_group": inst_to_group,
    }


@pytest.fixture(scope="session")
def medium_scene():
    """Default-sized synthetic scene for pipeline-level tests."""
    return generate_scene(SceneSpec(n_instances_min=4, n_instances_max=5, seed=11))


def random_cloud(rng, n, scale=1.0):
    return PointCloud(positions=rng.uniform(-scale, scale, size=(n, 3)))
