"""revox: sparse-view voxel radiance fields with iterative synthetic-view
augmentation, uncertainty masking, and scheduled retraining."""

__version__ = "0.1.0"

from .field import SceneSpec, VoxelGrid, build_scene, init_grid, load_grid, sample_field, save_grid
from .geometry import (
    Camera,
    Pose,
    Quaternion,
    Ray,
    generate_rays,
    interpolate_pose,
    interpolation_factors,
    order_poses_by_proximity,
    preset_factors,
    slerp,
)
from .metrics import psnr, ssim
from .optim import TrainConfig, TrainingView, backward, photometric_loss, sample_ray_batch, train
from .render import RenderOutput, RaySamples, composite, render_image, sample_ray
from .uncertainty import (
    DeformationField,
    MaskRule,
    UncertaintyField,
    accumulate_hessian,
    make_mask,
    render_uncertainty,
    sigma_field,
)

__all__ = [
    "Camera",
    "DeformationField",
    "MaskRule",
    "Pose",
    "Quaternion",
    "Ray",
    "RaySamples",
    "RenderOutput",
    "SceneSpec",
    "TrainConfig",
    "TrainingView",
    "UncertaintyField",
    "VoxelGrid",
    "accumulate_hessian",
    "backward",
    "build_scene",
    "composite",
    "generate_rays",
    "init_grid",
    "interpolate_pose",
    "interpolation_factors",
    "load_grid",
    "make_mask",
    "order_poses_by_proximity",
    "photometric_loss",
    "preset_factors",
    "psnr",
    "render_image",
    "render_uncertainty",
    "sample_field",
    "sample_ray",
    "sample_ray_batch",
    "save_grid",
    "sigma_field",
    "slerp",
    "ssim",
    "train",
]
