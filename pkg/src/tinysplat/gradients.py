"""Analytic reverse-mode differentiation of the full render.

backward_render turns an image-space cotangent dL/d(rendered) into exact
gradients on every raw Gaussian parameter (mean, log_scale, quat,
opacity_logit, SH coefficients). The depth ordering, the culling set, and the
alpha_min/alpha_max gates are treated as locally constant, matching the
forward renderer's semantics.

The backward pass recomputes the forward per tile and runs the compositing
recurrence back-to-front with a suffix color accumulator, so nothing from the
forward call needs to be stored. Per-tile partial gradients are merged in
fixed tile order, which makes the result bitwise independent of thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gaussians as gm
from .rasterizer import RenderConfig, _tile_pixel_grid, _bin_indices, project_scene, render


@dataclass
class GradientBuffer:
    """Per-Gaussian gradient accumulators plus densification statistics."""

    d_means: np.ndarray  # (N, 3)
    d_log_scales: np.ndarray  # (N, 3)
    d_quats: np.ndarray  # (N, 4)
    d_opacity_logits: np.ndarray  # (N,)
    d_sh: np.ndarray  # (N, 3, K)
    grad2d_norm_accum: np.ndarray  # (N,) running sum of ||dL/dmean2d|| over views
    grad2d_count: np.ndarray  # (N,) int, views in which the Gaussian was visible

    @classmethod
    def zeros(cls, scene: gm.SceneModel, dtype=None) -> "GradientBuffer":
        dtype = dtype or scene.dtype
        n, _, k = scene.sh.shape
        return cls(
            d_means=np.zeros((n, 3), dtype=dtype),
            d_log_scales=np.zeros((n, 3), dtype=dtype),
            d_quats=np.zeros((n, 4), dtype=dtype),
            d_opacity_logits=np.zeros(n, dtype=dtype),
            d_sh=np.zeros((n, 3, k), dtype=dtype),
            grad2d_norm_accum=np.zeros(n, dtype=np.float64),
            grad2d_count=np.zeros(n, dtype=np.int64),
        )

    @property
    def count(self) -> int:
        return self.d_means.shape[0]

    def add(self, other: "GradientBuffer") -> None:
        """Accumulate another buffer (e.g. a further view) in place."""
        self.d_means += other.d_means
        self.d_log_scales += other.d_log_scales
        self.d_quats += other.d_quats
        self.d_opacity_logits += other.d_opacity_logits
        self.d_sh += other.d_sh
        self.grad2d_norm_accum += other.grad2d_norm_accum
        self.grad2d_count += other.grad2d_count

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.d_means, self.d_log_scales, self.d_quats, self.d_opacity_logits, self.d_sh)
        )


def _tile_backward(px, py, d_pix, idxs, mean2d, conic, rgb, opacity, background, config, dtype):
    """Backward compositing for one tile.

    Recomputes the forward front-to-back pass, then walks the contributing
    splats back-to-front with the suffix color S_i = sum_{j>i} w_j c_j + T_f*bg.
    Returns per-splat partials aligned with `idxs`.
    """
    n = len(idxs)
    p = px.size
    alpha_min = dtype(config.alpha_min)
    alpha_max = dtype(config.alpha_max)
    t_stop = dtype(config.t_stop)

    g_all = np.empty((n, p), dtype=dtype)
    alpha_all = np.empty((n, p), dtype=dtype)
    contrib_all = np.zeros((n, p), dtype=bool)
    t_entry = np.empty((n, p), dtype=dtype)
    trans = np.ones(p, dtype=dtype)
    for i, k in enumerate(idxs):
        alive = trans >= t_stop
        if not alive.any():
            g_all = g_all[:i]
            alpha_all = alpha_all[:i]
            contrib_all = contrib_all[:i]
            t_entry = t_entry[:i]
            idxs = idxs[:i]
            n = i
            break
        dx = px - mean2d[k, 0]
        dy = py - mean2d[k, 1]
        a, b, c = conic[k, 0], conic[k, 1], conic[k, 2]
        e = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
        g = np.exp(np.minimum(e, 0.0))
        alpha = np.minimum(opacity[k] * g, alpha_max)
        contrib = alive & (alpha >= alpha_min)
        g_all[i] = g
        alpha_all[i] = alpha
        contrib_all[i] = contrib
        t_entry[i] = trans
        trans = np.where(contrib, trans * (1.0 - alpha), trans)

    d_mean2d = np.zeros((n, 2), dtype=dtype)
    d_lam = np.zeros((n, 2, 2), dtype=dtype)
    d_opacity = np.zeros(n, dtype=dtype)
    d_rgb = np.zeros((n, 3), dtype=dtype)

    suffix = trans[:, None] * np.asarray(background, dtype=dtype)
    for i in range(n - 1, -1, -1):
        contrib = contrib_all[i]
        if not contrib.any():
            continue
        k = idxs[i]
        g = g_all[i]
        alpha = alpha_all[i]
        te = t_entry[i]
        w = np.where(contrib, te * alpha, dtype(0.0))

        d_rgb[i] = (w[:, None] * d_pix).sum(axis=0)

        d_alpha = (d_pix * (te[:, None] * rgb[k] - suffix / (1.0 - alpha)[:, None])).sum(axis=1)
        # The alpha_max clamp is piecewise constant: no gradient where it binds.
        live = contrib & (opacity[k] * g < alpha_max)
        d_alpha = np.where(live, d_alpha, dtype(0.0))
        d_opacity[i] = (d_alpha * g).sum()

        dx = px - mean2d[k, 0]
        dy = py - mean2d[k, 1]
        a, b, c = conic[k, 0], conic[k, 1], conic[k, 2]
        e = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
        d_e = np.where(e < 0.0, d_alpha * opacity[k] * g, dtype(0.0))

        d_mean2d[i, 0] = (d_e * (a * dx + b * dy)).sum()
        d_mean2d[i, 1] = (d_e * (b * dx + c * dy)).sum()
        half = dtype(-0.5)
        d_lam[i, 0, 0] = (half * d_e * dx * dx).sum()
        d_lam[i, 0, 1] = (half * d_e * dx * dy).sum()
        d_lam[i, 1, 1] = (half * d_e * dy * dy).sum()

        suffix = suffix + w[:, None] * rgb[k]

    d_lam[:, 1, 0] = d_lam[:, 0, 1]
    return idxs, d_mean2d, d_lam, d_opacity, d_rgb


def backward_render(
    scene: gm.SceneModel,
    cam: gm.Camera,
    config: RenderConfig | None,
    d_image: np.ndarray,
) -> GradientBuffer:
    """Gradients of sum_pixels <d_image, rendered> w.r.t. every raw parameter.

    d_image must be (height, width, 3). Returns a zero-filled buffer row for
    every Gaussian with no forward influence (culled or invisible).
    """
    config = config or RenderConfig()
    d_image = np.asarray(d_image)
    if d_image.shape != (cam.height, cam.width, 3):
        raise ValueError(
            f"d_image shape {d_image.shape} does not match camera "
            f"({cam.height}, {cam.width}, 3)"
        )
    buf = GradientBuffer.zeros(scene)
    if scene.count == 0:
        return buf
    dtype = scene.dtype.type
    d_image = d_image.astype(dtype, copy=False)

    proj = project_scene(scene, cam, config, with_context=True)
    keep = np.flatnonzero(proj.in_frustum)
    m = keep.size
    if m == 0:
        return buf
    order = keep[np.lexsort((proj.source[keep], proj.sort_key[keep]))]
    # Per-splat arrays indexed by position in `order`.
    mean2d = proj.mean2d[order]
    conic = proj.conic[order]
    rgb = proj.rgb[order]
    opacity = proj.opacity[order]
    radius = proj.radius[order]

    h, w = cam.height, cam.width
    tiles = _bin_indices(mean2d, radius, np.arange(m), w, h, config.tile_size)
    background = np.asarray(scene.background, dtype=dtype)

    d_mean2d = np.zeros((m, 2), dtype=dtype)
    d_lam = np.zeros((m, 2, 2), dtype=dtype)
    d_opacity = np.zeros(m, dtype=dtype)
    d_rgb = np.zeros((m, 3), dtype=dtype)

    def run_tile(job):
        ti, tj = job
        idxs = tiles[ti][tj]
        if idxs.size == 0:
            return None
        x0, x1, y0, y1, px, py = _tile_pixel_grid(ti, tj, config.tile_size, w, h, dtype)
        d_pix = d_image[y0:y1, x0:x1].reshape(-1, 3)
        return _tile_backward(
            px, py, d_pix, idxs, mean2d, conic, rgb, opacity, background, config, dtype
        )

    jobs = [(ti, tj) for ti in range(len(tiles)) for tj in range(len(tiles[0]))]
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run_tile, jobs))
    else:
        results = [run_tile(job) for job in jobs]
    for res in results:  # merged in fixed tile order
        if res is None:
            continue
        idxs, t_mean2d, t_lam, t_opacity, t_rgb = res
        np.add.at(d_mean2d, idxs, t_mean2d)
        np.add.at(d_lam, idxs, t_lam)
        np.add.at(d_opacity, idxs, t_opacity)
        np.add.at(d_rgb, idxs, t_rgb)

    # ---- chain from 2D splat-space to raw parameters (vectorized over M) ----
    ctx_sel = order  # positions into proj arrays
    lam = np.empty((m, 2, 2), dtype=dtype)
    lam[:, 0, 0] = conic[:, 0]
    lam[:, 0, 1] = conic[:, 1]
    lam[:, 1, 0] = conic[:, 1]
    lam[:, 1, 1] = conic[:, 2]

    d_cov2d = -lam @ d_lam @ lam  # dL/d(cov2d) as a symmetric full matrix
    jw = proj.jw[ctx_sel]
    cov3 = proj.cov3[ctx_sel]
    d_jw = 2.0 * d_cov2d @ jw @ cov3
    d_cov3 = np.swapaxes(jw, -1, -2) @ d_cov2d @ jw

    rot_w = cam.rotation.astype(dtype)
    d_jac = d_jw @ rot_w.T

    mean_cam = proj.mean_cam[ctx_sel]
    x, y, z = mean_cam[:, 0], mean_cam[:, 1], mean_cam[:, 2]
    fx, fy = dtype(cam.fx), dtype(cam.fy)
    inv_z2 = 1.0 / (z * z)
    inv_z3 = inv_z2 / z
    d_mean_cam = np.empty((m, 3), dtype=dtype)
    d_mean_cam[:, 0] = d_jac[:, 0, 2] * (-fx * inv_z2)
    d_mean_cam[:, 1] = d_jac[:, 1, 2] * (-fy * inv_z2)
    d_mean_cam[:, 2] = (
        d_jac[:, 0, 0] * (-fx * inv_z2)
        + d_jac[:, 1, 1] * (-fy * inv_z2)
        + d_jac[:, 0, 2] * (2.0 * fx * x * inv_z3)
        + d_jac[:, 1, 2] * (2.0 * fy * y * inv_z3)
    )
    jac = proj.jac[ctx_sel]
    d_mean_cam += np.einsum("mij,mi->mj", jac, d_mean2d)
    d_mean_world = d_mean_cam @ rot_w  # R^T applied to each row

    # Scale/rotation chain through cov3 = M3 M3^T, M3 = R_q diag(exp(log_scale)).
    m3 = proj.m3[ctx_sel]
    rot_q = proj.rot_q[ctx_sel]
    scales = proj.scales[ctx_sel]
    d_m3 = 2.0 * d_cov3 @ m3
    d_scales = np.einsum("mji,mji->mi", d_m3, rot_q)
    d_log_scales = d_scales * scales
    d_rot = d_m3 * scales[:, None, :]

    q = proj.quat_unit[ctx_sel]
    qw, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g00, g01, g02 = d_rot[:, 0, 0], d_rot[:, 0, 1], d_rot[:, 0, 2]
    g10, g11, g12 = d_rot[:, 1, 0], d_rot[:, 1, 1], d_rot[:, 1, 2]
    g20, g21, g22 = d_rot[:, 2, 0], d_rot[:, 2, 1], d_rot[:, 2, 2]
    d_qunit = np.empty((m, 4), dtype=dtype)
    d_qunit[:, 0] = 2.0 * (-g01 * qz + g02 * qy + g10 * qz - g12 * qx - g20 * qy + g21 * qx)
    d_qunit[:, 1] = 2.0 * (
        g01 * qy + g02 * qz + g10 * qy - 2.0 * g11 * qx - g12 * qw + g20 * qz + g21 * qw - 2.0 * g22 * qx
    )
    d_qunit[:, 2] = 2.0 * (
        -2.0 * g00 * qy + g01 * qx + g02 * qw + g10 * qx + g12 * qz - g20 * qw + g21 * qz - 2.0 * g22 * qy
    )
    d_qunit[:, 3] = 2.0 * (
        -2.0 * g00 * qz - g01 * qw + g02 * qx + g10 * qw - 2.0 * g11 * qz + g12 * qy + g20 * qx + g21 * qy
    )
    qnorm = proj.quat_norm[ctx_sel]
    radial = np.einsum("mi,mi->m", d_qunit, q)
    d_quat = (d_qunit - q * radial[:, None]) / qnorm[:, None]

    # SH chain: color = clamp(coeffs . basis + 0.5, 0), with the view direction
    # itself a function of the mean.
    rgb_pre = proj.rgb_pre[ctx_sel]
    basis = proj.sh_basis[ctx_sel]
    k_used = basis.shape[1]
    d_rgb_pre = d_rgb * (rgb_pre > 0.0)
    d_sh_used = np.einsum("mc,mk->mck", d_rgb_pre, basis)
    view_dir = proj.view_dir[ctx_sel]
    basis_grad = gm.sh_basis_gradient(view_dir, proj.sh_degree)
    coeffs_used = scene.sh[proj.source[order], :, :k_used]
    d_dir = np.einsum("mc,mck,mkd->md", d_rgb_pre, coeffs_used, basis_grad)
    vdist = proj.view_dist[ctx_sel]
    d_vec = (d_dir - view_dir * np.einsum("mi,mi->m", d_dir, view_dir)[:, None]) / vdist[:, None]
    d_mean_world += d_vec

    d_opacity_logit = d_opacity * opacity * (1.0 - opacity)

    src = proj.source[order]
    buf.d_means[src] = d_mean_world
    buf.d_log_scales[src] = d_log_scales
    buf.d_quats[src] = d_quat
    buf.d_opacity_logits[src] = d_opacity_logit
    buf.d_sh[src, :, :k_used] = d_sh_used
    buf.grad2d_norm_accum[src] = np.linalg.norm(d_mean2d.astype(np.float64), axis=1)
    buf.grad2d_count[src] = 1
    return buf


# ---------------------------------------------------------------------------
# Finite-difference verification harness
# ---------------------------------------------------------------------------

PARAM_CLASSES = ("mean", "log_scale", "quat", "opacity_logit", "sh")

_SCENE_FIELDS = {
    "mean": "means",
    "log_scale": "log_scales",
    "quat": "quats",
    "opacity_logit": "opacity_logits",
    "sh": "sh",
}
_BUFFER_FIELDS = {
    "mean": "d_means",
    "log_scale": "d_log_scales",
    "quat": "d_quats",
    "opacity_logit": "d_opacity_logits",
    "sh": "d_sh",
}


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    step: float
    tolerance: float
    max_rel_err: dict  # class name -> worst relative error
    worst_coord: dict  # class name -> (flat index, analytic, finite difference)
    passed: bool
    diagnostics: list = field(default_factory=list)

    def lines(self):
        out = []
        for name in PARAM_CLASSES:
            err = self.max_rel_err.get(name, float("nan"))
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{name},{err:.6e},{status}")
        for msg in self.diagnostics:
            out.append(f"# {msg}")
        out.append(f"result,{'pass' if self.passed else 'fail'}")
        return out


# Finite differences sit on kinks whenever a pixel's alpha crosses the
# alpha_min skip or a ray's transmittance crosses t_stop, so the verification
# configuration disables both gates (their contributions at the default
# thresholds are piecewise-constant by contract anyway). The alpha_max clamp
# and the color clamp are kept away from their boundaries by the scene audit.
GRADCHECK_CONFIG = RenderConfig(alpha_min=0.0, t_stop=0.0)


def _boundary_distance_audit(scene, cam, config, alpha_margin, rgb_margin, depth_margin):
    """True when neither remaining clamp (alpha_max, color floor) is close to
    flipping anywhere and depths are well separated (stable sort order)."""
    proj = project_scene(scene, cam, config, with_context=True)
    m = proj.source.size
    if m == 0:
        return False
    if np.any(proj.rgb_pre < rgb_margin):
        return False
    depths = np.sort(proj.sort_key)
    if m > 1 and np.min(np.diff(depths)) < depth_margin:
        return False
    # Opacity bounds the per-pixel alpha, so one check covers every pixel.
    return not np.any(proj.opacity > config.alpha_max - alpha_margin)


def well_conditioned_scene(
    seed: int,
    count: int = 5,
    width: int = 16,
    height: int = 16,
    sh_degree: int = 0,
    config: RenderConfig | None = None,
    alpha_margin: float = 2e-3,
):
    """Seeded random (scene, camera) pair safe for finite-difference checks.

    Draws candidate scenes deterministically until the audit passes; intended
    to be rendered with GRADCHECK_CONFIG. Scenes come out in float64.
    """
    config = config or GRADCHECK_CONFIG
    cam = gm.Camera.look_at(
        eye=(0.3, -0.2, -3.5),
        target=(0.0, 0.0, 0.0),
        fx=1.5 * width,
        fy=1.5 * width,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )
    k = gm.num_sh_coeffs(sh_degree)
    for attempt in range(256):
        rng = np.random.default_rng(np.uint64(seed) * np.uint64(100003) + np.uint64(attempt))
        sh = np.zeros((count, 3, k))
        sh[:, :, 0] = (rng.uniform(0.25, 0.75, (count, 3)) - 0.5) / gm.SH_C0
        if k > 1:
            sh[:, :, 1:] = rng.uniform(-0.1, 0.1, (count, 3, k - 1))
        scene = gm.SceneModel(
            means=rng.uniform(-0.6, 0.6, (count, 3)),
            log_scales=rng.uniform(np.log(0.12), np.log(0.3), (count, 3)),
            quats=rng.normal(size=(count, 4)),
            opacity_logits=rng.uniform(gm.logit(0.25), gm.logit(0.8), count),
            sh=sh,
            background=np.array([0.1, 0.2, 0.3]),
        ).astype(np.float64)
        if _boundary_distance_audit(
            scene, cam, config, alpha_margin=alpha_margin,
            rgb_margin=0.02, depth_margin=1e-3,
        ):
            return scene, cam
    raise RuntimeError(f"no well-conditioned scene found for seed {seed}")


def check_gradients(
    scene: gm.SceneModel,
    cam: gm.Camera,
    config: RenderConfig | None = None,
    step: float = 1e-4,
    tolerance: float = 1e-3,
    abs_floor: float = 1e-8,
    target_seed: int = 0,
    gradient_transform=None,
) -> GradCheckReport:
    """Compare backward_render against central finite differences in float64.

    The loss is the mean squared pixel error against a fixed random target.
    `gradient_transform` is a test hook applied to the analytic buffer before
    comparison (used to verify the checker notices corrupted gradients).
    """
    if scene.count > 64:
        raise ValueError("gradient check limited to scenes of <= 64 Gaussians")
    config = config or RenderConfig()
    work = scene.astype(np.float64)
    rng = np.random.default_rng(target_seed)
    target = rng.uniform(0.0, 1.0, size=(cam.height, cam.width, 3))

    def loss_of(s: gm.SceneModel) -> float:
        img = render(s, cam, config).color
        return float(np.mean((img - target) ** 2))

    base = render(work, cam, config).color
    d_image = 2.0 * (base - target) / base.size
    analytic = backward_render(work, cam, config, d_image)
    if gradient_transform is not None:
        analytic = gradient_transform(analytic)

    diagnostics = []
    if step < 1e-9:
        diagnostics.append(
            f"step underflow: step {step:g} is below 1e-9; finite differences are unreliable"
        )

    max_rel_err = {}
    worst_coord = {}
    for name in PARAM_CLASSES:
        arr = getattr(work, _SCENE_FIELDS[name])
        grad = np.asarray(getattr(analytic, _BUFFER_FIELDS[name]), dtype=np.float64)
        flat = arr.reshape(-1)
        worst = 0.0
        worst_info = (-1, 0.0, 0.0)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp = loss_of(work)
            flat[idx] = orig - step
            lm = loss_of(work)
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * step)
            an = grad.reshape(-1)[idx]
            rel = abs(an - fd) / max(abs(an), abs(fd), abs_floor)
            if rel > worst:
                worst = rel
                worst_info = (idx, float(an), float(fd))
        max_rel_err[name] = worst
        worst_coord[name] = worst_info
    passed = all(err < tolerance for err in max_rel_err.values())
    return GradCheckReport(
        step=step,
        tolerance=tolerance,
        max_rel_err=max_rel_err,
        worst_coord=worst_coord,
        passed=passed,
        diagnostics=diagnostics,
    )
