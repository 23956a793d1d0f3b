"""Dataset ingestion, the analytic synthetic scene, and evaluation metrics."""

from control4d.data.loader import (
    FrameRecord,
    load_dataset,
    load_image,
    load_mask,
    save_image,
)
from control4d.data.metrics import laplacian_variance, psnr, temporal_flicker, video_sharpness
from control4d.data.synthetic import (
    BlobSpec,
    SceneOracle,
    SyntheticSceneSpec,
    default_scene_spec,
    make_synthetic_scene,
)

__all__ = [
    "FrameRecord",
    "load_dataset",
    "load_image",
    "load_mask",
    "save_image",
    "psnr",
    "temporal_flicker",
    "laplacian_variance",
    "video_sharpness",
    "BlobSpec",
    "SyntheticSceneSpec",
    "SceneOracle",
    "default_scene_spec",
    "make_synthetic_scene",
]
