"""Project a single 3D Gaussian into a camera and inspect its 2D footprint.

Walks through the core math one step at a time: covariance from
(log_scale, quaternion), world-to-camera transform, perspective projection,
the projection Jacobian, and the resulting screen-space ellipse.
"""

import numpy as np

from tinysplat import Camera, Gaussian3D, build_covariance, projection_jacobian, splat_gaussian, world_to_camera
from tinysplat.scene_io import save_ppm
from tinysplat.rasterizer import RenderConfig, render
from tinysplat import gaussians as gm

cam = Camera.look_at(
    eye=(0.0, 0.0, -4.0), target=(0.0, 0.0, 0.0),
    fx=96.0, fy=96.0, cx=32.0, cy=32.0, width=64, height=64,
)

g = Gaussian3D(
    mean=np.array([0.2, -0.1, 0.0]),
    log_scale=np.log([0.35, 0.15, 0.08]),
    quat=np.array([0.9, 0.1, 0.3, 0.2]),  # renormalized internally
    opacity_logit=1.2,
    sh=np.array([[0.8], [0.1], [-0.4]]) / 0.2820948,  # roughly orange
)

cov3 = build_covariance(g.log_scale, g.quat)
print("3D covariance eigenvalues:", np.linalg.eigvalsh(cov3))
print("(equal to exp(log_scale)^2 =", np.sort(np.exp(g.log_scale) ** 2), ")")

mean_cam = world_to_camera(cam, g.mean)
print("camera-space mean:", mean_cam, "-> depth", mean_cam[2])
print("projection Jacobian at the mean:\n", projection_jacobian(cam, mean_cam))

splat = splat_gaussian(g, cam, sh_degree=0, dilation=0.3)
print("2D mean (px):", splat.mean2d)
print("2D covariance (px^2, dilation included):\n", splat.cov2d)
print("opacity:", splat.opacity, " view-evaluated rgb:", splat.rgb)

scene = gm.SceneModel.from_gaussians([g])
out = render(scene, cam, RenderConfig())
save_ppm("single_splat.ppm", out.color)
print("wrote single_splat.ppm;", int(out.per_pixel_count.sum()), "pixel contributions")
