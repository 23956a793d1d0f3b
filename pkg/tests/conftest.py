"""Shared fixtures: tiny synthetic scenes reused across test modules."""

import numpy as np
import pytest
import torch

from control4d.data import (
    BlobSpec,
    SyntheticSceneSpec,
    default_scene_spec,
    make_synthetic_scene,
)


def pytest_configure(config):
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_spec():
    """16^2, 2 cameras, 3 frames: smallest scene the full pipeline runs on."""
    base = default_scene_spec(image_size=16, frame_count=3)
    return SyntheticSceneSpec.from_json({**base.to_json(), "camera_count": 2})


@pytest.fixture(scope="session")
def tiny_scene(tiny_spec, tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_scene")
    records, cams, oracle = make_synthetic_scene(tiny_spec, root, quad_samples=64)
    return {"spec": tiny_spec, "root": root, "records": records, "cams": cams,
            "oracle": oracle}


@pytest.fixture(scope="session")
def single_blob_spec():
    """One static blob at the origin, one camera on the ring."""
    blob = BlobSpec(
        coeffs=((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
        radius=0.3,
        peak=14.0,
        albedo=(0.8, 0.3, 0.2),
    )
    return SyntheticSceneSpec(
        blobs=(blob,),
        camera_count=1,
        camera_elevation=0.0,
        image_size=17,
        frame_count=2,
        focal_px=24.0,
    )


def make_field(bounds, **overrides):
    """A small SceneField sized for unit tests."""
    from control4d.field import SceneField

    kwargs = dict(
        canonical_hr_res=32,
        canonical_lr_res=16,
        flow_spatial_res=8,
        flow_t_res=4,
        latent_channels=4,
        hidden=32,
        seed=0,
    )
    kwargs.update(overrides)
    return SceneField(bounds, **kwargs)


@pytest.fixture()
def small_field():
    bounds = {"x": (-1.0, 1.0), "y": (-1.0, 1.0), "z": (-1.0, 1.0)}
    return make_field(bounds)
