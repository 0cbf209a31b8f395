"""Slow, trusted reference renderers.

Two oracles cross-check the fast tiled rasterizer:

- render_quadrature: numerical-quadrature volume rendering of the Gaussian
  mixture along per-pixel rays, treating each Gaussian's opacity as a density
  amplitude. The per-bin opacity term (1 - exp(-sigma * delta)) is implemented
  literally.
- render_bruteforce: per-pixel splatting with no tiling, no frustum culling,
  and no bounding-box test; every valid splat is evaluated at every pixel in
  globally sorted order with the same compositing kernel the tiled path uses.

Both are used only by tests and the evaluation CLI.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import gaussians as gm
from .rasterizer import RenderConfig, RenderOutput, _composite_forward, project_scene

EPS_DIV = 1e-12  # guard for emission / sigma


@dataclass(frozen=True)
class QuadratureConfig:
    """Ray-marching interval and sampling for the quadrature oracle."""

    t_near: float
    t_far: float
    samples: int
    stratified: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (self.t_near < self.t_far):
            raise ValueError("quadrature interval needs t_near < t_far")
        if self.samples < 1:
            raise ValueError("quadrature needs samples >= 1")

    @classmethod
    def for_scene(cls, scene: gm.SceneModel, cam: gm.Camera, samples: int = 512) -> "QuadratureConfig":
        """Interval bracketing the scene's bounding sphere along the view axis."""
        if scene.count == 0:
            return cls(t_near=cam.near, t_far=cam.near + 1.0, samples=samples)
        center = scene.means.mean(axis=0)
        spread = np.linalg.norm(scene.means - center, axis=1)
        sigma_max = float(np.exp(scene.log_scales).max()) if scene.count else 0.0
        radius = float(spread.max()) + 8.0 * sigma_max
        dist = float(np.linalg.norm(np.asarray(center, dtype=np.float64) - cam.center))
        t_near = max(cam.near, dist - radius)
        t_far = min(cam.far, dist + radius)
        if t_far <= t_near:
            t_far = t_near + max(radius, 1e-3)
        return cls(t_near=t_near, t_far=t_far, samples=samples)


def _scene_density_terms(scene: gm.SceneModel):
    """Precompute per-Gaussian inverse covariances and opacities (float64)."""
    cov3 = gm.build_covariances(
        scene.log_scales.astype(np.float64), scene.quats.astype(np.float64)
    )
    inv_cov3 = np.linalg.inv(cov3)
    opacity = gm.sigmoid(scene.opacity_logits.astype(np.float64))
    means = scene.means.astype(np.float64)
    return means, inv_cov3, opacity


def _mixture_colors(scene: gm.SceneModel, view_dir) -> np.ndarray:
    """(N, 3) per-Gaussian colors; degree 0 only when view_dir is None."""
    sh = scene.sh.astype(np.float64)
    if view_dir is None:
        basis = gm.sh_basis(np.zeros(3), 0)
        rgb = sh[:, :, :1] @ basis + 0.5
    else:
        d = np.asarray(view_dir, dtype=np.float64)
        d = d / np.linalg.norm(d)
        basis = gm.sh_basis(d, scene.sh_degree)
        rgb = sh @ basis + 0.5
    return np.maximum(rgb, 0.0)


def mixture_density_emission(scene: gm.SceneModel, x, view_dir=None):
    """Density and emission of the Gaussian mixture at point(s) x.

    sigma(x) = sum_i opacity_i * G_i(x); emission(x) = sum_i c_i * opacity_i * G_i(x)
    with c_i evaluated at SH degree 0 plus view-dependent bands when view_dir
    is given.

    x may be (3,) or (..., 3); returns (sigma, emission) with matching shapes.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    sigma = np.zeros(pts.shape[0])
    emission = np.zeros((pts.shape[0], 3))
    if scene.count:
        means, inv_cov3, opacity = _scene_density_terms(scene)
        colors = _mixture_colors(scene, view_dir)
        for i in range(scene.count):
            d = pts - means[i]
            q = np.einsum("pj,jk,pk->p", d, inv_cov3[i], d)
            dens = opacity[i] * np.exp(-0.5 * q)
            sigma += dens
            emission += dens[:, None] * colors[i]
    if single:
        return float(sigma[0]), emission[0]
    return sigma.reshape(x.shape[:-1]), emission.reshape(x.shape[:-1] + (3,))


def render_quadrature(
    scene: gm.SceneModel,
    cam: gm.Camera,
    qcfg: QuadratureConfig,
    field=None,
    threads: int = 1,
    with_transmittance: bool = False,
):
    """March per-pixel rays with uniform bins and composite per the quadrature rule.

    Per bin: weight = (1 - exp(-sigma*delta)) * prod_earlier exp(-sigma*delta),
    color = emission / max(sigma, EPS_DIV) at the bin point. Background is
    added weighted by the final transmittance.

    `field(points, view_dir) -> (sigma, emission)` overrides the scene mixture
    (test hook for closed-form density fields).
    """
    h, w = cam.height, cam.width
    n = qcfg.samples
    delta = (qcfg.t_far - qcfg.t_near) / n
    if qcfg.stratified:
        rng = np.random.default_rng(qcfg.seed)
        offsets = rng.uniform(0.0, 1.0, size=n)
    else:
        offsets = np.full(n, 0.5)
    ts = qcfg.t_near + (np.arange(n) + offsets) * delta

    origin = cam.center
    rot_t = cam.rotation.T
    cols = (np.arange(w) + 0.5 - cam.cx) / cam.fx
    rows = (np.arange(h) + 0.5 - cam.cy) / cam.fy

    image = np.empty((h, w, 3), dtype=np.float64)
    trans_out = np.empty((h, w), dtype=np.float64)
    background = np.asarray(scene.background, dtype=np.float64)

    if field is None and scene.count:
        means, inv_cov3, opacity = _scene_density_terms(scene)
    else:
        means = inv_cov3 = opacity = None

    def march_row(i):
        dirs_cam = np.stack(
            [cols, np.full(w, rows[i]), np.ones(w)], axis=-1
        )
        dirs = dirs_cam @ rot_t.T
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        # (w, n, 3) sample points along each pixel's ray
        pts = origin + ts[None, :, None] * dirs[:, None, :]
        sigma = np.zeros((w, n))
        emission = np.zeros((w, n, 3))
        if field is not None:
            for j in range(w):
                s, e = field(pts[j], dirs[j])
                sigma[j] = s
                emission[j] = e
        elif scene.count:
            flat = pts.reshape(-1, 3)
            basis = gm.sh_basis(dirs, scene.sh_degree)  # (w, K)
            sh_all = scene.sh.astype(np.float64)
            colors = np.maximum(np.einsum("gck,wk->gwc", sh_all, basis) + 0.5, 0.0)
            for g in range(scene.count):
                d = flat - means[g]
                q = np.einsum("pj,jk,pk->p", d, inv_cov3[g], d)
                dens = (opacity[g] * np.exp(-0.5 * q)).reshape(w, n)
                sigma += dens
                emission += dens[:, :, None] * colors[g][:, None, :]
        absorb = np.exp(-sigma * delta)
        trans = np.cumprod(absorb, axis=1)
        t_before = np.concatenate([np.ones((w, 1)), trans[:, :-1]], axis=1)
        color = emission / np.maximum(sigma, EPS_DIV)[:, :, None]
        weights = (1.0 - absorb) * t_before
        image[i] = np.einsum("wn,wnc->wc", weights, color) + trans[:, -1:] * background
        trans_out[i] = trans[:, -1]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(march_row, range(h)))
    else:
        for i in range(h):
            march_row(i)

    if with_transmittance:
        return image, trans_out
    return image


def render_bruteforce(
    scene: gm.SceneModel, cam: gm.Camera, config: RenderConfig | None = None
) -> RenderOutput:
    """Composite every valid splat at every pixel, in globally sorted order."""
    config = config or RenderConfig()
    h, w = cam.height, cam.width
    dtype = scene.dtype.type if scene.count else np.float32
    background = np.asarray(scene.background, dtype=dtype)

    if scene.count == 0:
        color = np.empty((h, w, 3), dtype=dtype)
        color[:] = background
        return RenderOutput(color, np.ones((h, w), dtype=dtype), np.zeros((h, w), dtype=np.int32), 0)

    proj = project_scene(scene, cam, config)
    order = np.lexsort((proj.source, proj.sort_key))

    px = (np.tile(np.arange(w), h) + 0.5).astype(dtype)
    py = (np.repeat(np.arange(h), w) + 0.5).astype(dtype)
    out, trans, count = _composite_forward(
        px, py, order, proj.mean2d, proj.conic, proj.rgb, proj.opacity, background, config, dtype
    )
    return RenderOutput(
        out.reshape(h, w, 3),
        trans.reshape(h, w),
        count.reshape(h, w),
        proj.degenerate_count,
    )
