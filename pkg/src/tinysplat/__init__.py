"""tinysplat: a from-scratch differentiable 3D Gaussian splatting engine.

Core pieces:
- gaussians: primitive math (covariances, cameras, projection, SH color).
- rasterizer: tile-based forward renderer with front-to-back compositing.
- gradients: analytic reverse-mode differentiation of the full render.
- oracle: slow trusted reference renderers (quadrature ray marching and
  brute-force splatting) used by tests and evaluation.
- trainer: photometric optimization with Adam and adaptive density control.
- scene_io: datasets, checkpoints, PPM/PLY formats, viewer export, synthetic
  scene generation.
- cli: batch command-line interface.
"""

from .gaussians import (
    Camera,
    Gaussian3D,
    SceneModel,
    Splat2D,
    build_covariance,
    eval_gaussian2,
    eval_gaussian3,
    eval_sh,
    project_point,
    projection_jacobian,
    splat_gaussian,
    world_to_camera,
)
from .rasterizer import RenderConfig, RenderOutput, TileGrid, bin_and_sort, composite_pixel, cull_frustum, render
from .gradients import GradientBuffer, backward_render, check_gradients
from .oracle import QuadratureConfig, mixture_density_emission, render_bruteforce, render_quadrature
from .trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    densify_and_prune,
    init_from_point_cloud,
    photometric_loss,
    psnr,
    train,
)

__all__ = [
    "Camera",
    "Gaussian3D",
    "SceneModel",
    "Splat2D",
    "build_covariance",
    "eval_gaussian2",
    "eval_gaussian3",
    "eval_sh",
    "project_point",
    "projection_jacobian",
    "splat_gaussian",
    "world_to_camera",
    "RenderConfig",
    "RenderOutput",
    "TileGrid",
    "bin_and_sort",
    "composite_pixel",
    "cull_frustum",
    "render",
    "GradientBuffer",
    "backward_render",
    "check_gradients",
    "QuadratureConfig",
    "mixture_density_emission",
    "render_bruteforce",
    "render_quadrature",
    "AdamState",
    "TrainConfig",
    "adam_step",
    "densify_and_prune",
    "init_from_point_cloud",
    "photometric_loss",
    "psnr",
    "train",
]

__version__ = "0.1.0"
