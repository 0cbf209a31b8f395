"""Tile-based forward renderer.

Pipeline per view: project every Gaussian to a 2D splat, cull against the
frustum, sort globally by depth, bin splats into screen tiles, then composite
each tile's pixels front-to-back. Tiles are independent work units; running
them in parallel never changes any output bit because each pixel's
accumulation order is fixed by the sorted splat list.

The compositing kernel is shared by composite_pixel, the tiled path, and the
brute-force oracle, so the three agree exactly wherever they see the same
splat sequence.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import gaussians as gm


@dataclass(frozen=True)
class RenderConfig:
    """Knobs for the forward renderer (all have conventional defaults)."""

    tile_size: int = 16
    dilation: float = 0.3  # px^2 added to both diagonal entries of cov2d
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    t_stop: float = 1e-4
    det_floor: float = 1e-12
    bbox_sigma: float = 3.0  # minimum bounding-radius multiplier
    sort_depth: str = "z"  # "z" or "euclidean" (sort key only)
    per_tile_sort: bool = False  # sort tile lists independently instead of globally
    sh_degree: int | None = None  # None = use the scene's stored degree
    threads: int = 1


@dataclass
class TileGrid:
    """Per-tile lists of splat indices, each list sorted by ascending depth."""

    tile_size: int
    width: int
    height: int
    tiles: list  # tiles[ti][tj] is an int array of splat indices

    @property
    def shape(self):
        return (len(self.tiles), len(self.tiles[0]) if self.tiles else 0)


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) linear RGB, each channel >= 0
    final_transmittance: np.ndarray  # (H, W) in [0, 1]
    per_pixel_count: np.ndarray  # (H, W) splats composited before termination
    degenerate_splats: int = 0  # diagnostics: splats rejected by the det floor


def support_radius(cov2d, opacity, config: RenderConfig):
    """Screen-space bounding radius (px) outside which alpha < alpha_min.

    Uses max(bbox_sigma, sqrt(2 ln(opacity/alpha_min))) times sqrt(lambda_max)
    so that tile binning can never drop a contribution the per-pixel skip rule
    would have kept.
    """
    cov2d = np.asarray(cov2d)
    if cov2d.shape[-1] == 3:  # packed (..., 3) = (A, B, C)
        a, b, c = cov2d[..., 0], cov2d[..., 1], cov2d[..., 2]
    elif cov2d.shape[-2:] == (2, 2):
        a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    else:
        raise ValueError("cov2d must be (..., 2, 2) or packed (..., 3)")
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    if config.alpha_min > 0.0:
        ratio = np.maximum(np.asarray(opacity, dtype=np.float64) / config.alpha_min, 1.0)
        k = np.maximum(config.bbox_sigma, np.sqrt(2.0 * np.log(ratio)))
    else:
        k = np.full(np.shape(lam_max), 16.0)  # exp(-128): beyond any visible tail
    k = np.minimum(k, 16.0)
    return k * np.sqrt(lam_max)


# ---------------------------------------------------------------------------
# Projection of a whole scene (vectorized)
# ---------------------------------------------------------------------------


@dataclass
class ProjectedScene:
    """Struct-of-arrays view of every valid splat for one camera.

    All per-splat arrays share a leading axis M. `source` maps back into the
    SceneModel. Backward-pass context arrays are populated only when the
    projection is built with `with_context=True`.
    """

    source: np.ndarray  # (M,)
    depth: np.ndarray  # (M,) camera-space z
    sort_key: np.ndarray  # (M,) z or euclidean distance
    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 3) packed (A, B, C), dilation included
    conic: np.ndarray  # (M, 3) packed inverse (a, b, c)
    rgb: np.ndarray  # (M, 3) clamped >= 0
    opacity: np.ndarray  # (M,)
    radius: np.ndarray  # (M,) support radius in px
    in_frustum: np.ndarray  # (M,) bool, support box meets expanded image rect
    degenerate_count: int
    sh_degree: int
    # Backward context (None unless requested):
    mean_cam: np.ndarray | None = None  # (M, 3)
    jac: np.ndarray | None = None  # (M, 2, 3)
    jw: np.ndarray | None = None  # (M, 2, 3) = J @ R_world2cam
    cov3: np.ndarray | None = None  # (M, 3, 3)
    m3: np.ndarray | None = None  # (M, 3, 3) = R_q diag(exp(log_scale))
    rot_q: np.ndarray | None = None  # (M, 3, 3)
    quat_unit: np.ndarray | None = None  # (M, 4)
    quat_norm: np.ndarray | None = None  # (M,)
    scales: np.ndarray | None = None  # (M, 3) exp(log_scale)
    view_dir: np.ndarray | None = None  # (M, 3) unit, camera center -> mean
    view_dist: np.ndarray | None = None  # (M,)
    sh_basis: np.ndarray | None = None  # (M, K)
    rgb_pre: np.ndarray | None = None  # (M, 3) before the >= 0 clamp


def project_scene(
    scene: gm.SceneModel,
    cam: gm.Camera,
    config: RenderConfig,
    with_context: bool = False,
) -> ProjectedScene:
    """Project all Gaussians; keeps those in depth range with a valid conic."""
    dtype = scene.dtype
    fx, fy = dtype.type(cam.fx), dtype.type(cam.fy)
    cx, cy = dtype.type(cam.cx), dtype.type(cam.cy)
    rot_w = cam.rotation.astype(dtype)
    t_w = cam.translation.astype(dtype)

    mean_cam = scene.means @ rot_w.T + t_w
    z = mean_cam[:, 2]
    in_depth = (z > cam.near) & (z < cam.far)
    source = np.flatnonzero(in_depth)

    mean_cam = mean_cam[source]
    x, y, z = mean_cam[:, 0], mean_cam[:, 1], mean_cam[:, 2]
    u = x / z * fx + cx
    v = y / z * fy + cy
    mean2d = np.stack([u, v], axis=-1)

    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    m = source.size
    jac = np.zeros((m, 2, 3), dtype=dtype)
    jac[:, 0, 0] = fx * inv_z
    jac[:, 0, 2] = -fx * x * inv_z2
    jac[:, 1, 1] = fy * inv_z
    jac[:, 1, 2] = -fy * y * inv_z2

    quats = scene.quats[source]
    qnorm = np.linalg.norm(quats, axis=-1)
    if np.any(qnorm <= gm.QUAT_NORM_EPS):
        raise ValueError("degenerate quaternion in scene: norm <= 1e-12")
    quat_unit = quats / qnorm[:, None]
    rot_q = gm.quaternions_to_rotations(quat_unit)
    scales = np.exp(scene.log_scales[source])
    m3 = rot_q * scales[:, None, :]
    cov3 = m3 @ np.swapaxes(m3, -1, -2)

    jw = jac @ rot_w
    cov2_full = jw @ cov3 @ np.swapaxes(jw, -1, -2)
    dil = dtype.type(config.dilation)
    cov_a = cov2_full[:, 0, 0] + dil
    cov_b = cov2_full[:, 0, 1]
    cov_c = cov2_full[:, 1, 1] + dil

    det = cov_a * cov_c - cov_b * cov_b
    valid = det >= config.det_floor
    degenerate = int(np.count_nonzero(~valid))

    opacity = gm.sigmoid(scene.opacity_logits[source])
    # Splats whose opacity can never reach alpha_min contribute nowhere.
    keep = valid & (opacity >= config.alpha_min)

    def _take(a):
        return a[keep]

    source = source[keep]
    mean_cam, mean2d, jac, jw = map(_take, (mean_cam, mean2d, jac, jw))
    cov3, m3, rot_q, quat_unit = map(_take, (cov3, m3, rot_q, quat_unit))
    qnorm, scales, opacity = qnorm[keep], scales[keep], opacity[keep]
    cov_a, cov_b, cov_c, det = cov_a[keep], cov_b[keep], cov_c[keep], det[keep]
    cov2d = np.stack([cov_a, cov_b, cov_c], axis=-1)
    conic = np.stack([cov_c / det, -cov_b / det, cov_a / det], axis=-1)

    degree = scene.sh_degree if config.sh_degree is None else min(config.sh_degree, scene.sh_degree)
    vec = scene.means[source] - cam.center.astype(dtype)
    vdist = np.linalg.norm(vec, axis=-1)
    view_dir = vec / vdist[:, None]
    basis = gm.sh_basis(view_dir, degree)
    rgb_pre = np.einsum("mck,mk->mc", scene.sh[source, :, : basis.shape[1]], basis) + dtype.type(0.5)
    rgb = np.maximum(rgb_pre, 0.0)

    radius = support_radius(cov2d, opacity, config).astype(dtype)
    depth = mean_cam[:, 2]
    sort_key = vdist if config.sort_depth == "euclidean" else depth

    ts = config.tile_size
    uu, vv = mean2d[:, 0], mean2d[:, 1]
    in_frustum = (
        (uu + radius >= -ts)
        & (uu - radius <= cam.width + ts)
        & (vv + radius >= -ts)
        & (vv - radius <= cam.height + ts)
    )

    proj = ProjectedScene(
        source=source,
        depth=depth,
        sort_key=sort_key,
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        rgb=rgb.astype(dtype, copy=False),
        opacity=opacity.astype(dtype, copy=False),
        radius=radius,
        in_frustum=in_frustum,
        degenerate_count=degenerate,
        sh_degree=degree,
    )
    if with_context:
        proj.mean_cam = mean_cam
        proj.jac = jac
        proj.jw = jw
        proj.cov3 = cov3
        proj.m3 = m3
        proj.rot_q = rot_q
        proj.quat_unit = quat_unit.astype(dtype, copy=False)
        proj.quat_norm = qnorm.astype(dtype, copy=False)
        proj.scales = scales
        proj.view_dir = view_dir
        proj.view_dist = vdist
        proj.sh_basis = basis
        proj.rgb_pre = rgb_pre
    return proj


def cull_frustum(scene: gm.SceneModel, cam: gm.Camera, config: RenderConfig | None = None) -> np.ndarray:
    """Indices of Gaussians whose depth is in (near, far) and whose projected
    support box intersects the image rectangle expanded by one tile."""
    config = config or RenderConfig()
    proj = project_scene(scene, cam, config)
    return proj.source[proj.in_frustum]


# ---------------------------------------------------------------------------
# Binning and sorting
# ---------------------------------------------------------------------------


def _tile_ranges(mean2d, radius, width, height, tile_size):
    """Inclusive tile index ranges (tj0, tj1, ti0, ti1) per splat; -1 if offscreen."""
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    u, v = mean2d[:, 0], mean2d[:, 1]
    tj0 = np.clip(np.floor((u - radius) / tile_size), 0, ntx - 1).astype(np.int64)
    tj1 = np.clip(np.floor((u + radius) / tile_size), 0, ntx - 1).astype(np.int64)
    ti0 = np.clip(np.floor((v - radius) / tile_size), 0, nty - 1).astype(np.int64)
    ti1 = np.clip(np.floor((v + radius) / tile_size), 0, nty - 1).astype(np.int64)
    offscreen = (u + radius < 0) | (u - radius > width) | (v + radius < 0) | (v - radius > height)
    tj0[offscreen] = -1
    return tj0, tj1, ti0, ti1, ntx, nty


def _bin_indices(mean2d, radius, order, width, height, tile_size):
    """tiles[ti][tj] lists of indices (taken from `order`, preserving order)."""
    tj0, tj1, ti0, ti1, ntx, nty = _tile_ranges(mean2d, radius, width, height, tile_size)
    tiles = [[[] for _ in range(ntx)] for _ in range(nty)]
    for k in order:
        j0 = tj0[k]
        if j0 < 0:
            continue
        for ti in range(ti0[k], ti1[k] + 1):
            row = tiles[ti]
            for tj in range(j0, tj1[k] + 1):
                row[tj].append(k)
    return [[np.asarray(lst, dtype=np.int64) for lst in row] for row in tiles]


def bin_and_sort(
    splats,
    width: int,
    height: int,
    tile_size: int,
    config: RenderConfig | None = None,
    per_tile_sort: bool | None = None,
) -> TileGrid:
    """Bin Splat2D objects into a TileGrid with depth-sorted per-tile lists.

    Sorting is stable on (depth, source_index). With per_tile_sort=True the
    global sort is skipped and each tile list is sorted independently (same
    output, different strategy).
    """
    config = config or RenderConfig(tile_size=tile_size)
    if per_tile_sort is None:
        per_tile_sort = config.per_tile_sort
    n = len(splats)
    mean2d = np.array([s.mean2d for s in splats], dtype=np.float64).reshape(n, 2)
    depth = np.array([s.depth for s in splats], dtype=np.float64)
    src = np.array([s.source_index for s in splats], dtype=np.int64)
    cov = np.array([(s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]) for s in splats], dtype=np.float64).reshape(n, 3)
    opacity = np.array([s.opacity for s in splats], dtype=np.float64)
    radius = support_radius(cov, opacity, config)

    if per_tile_sort:
        order = np.arange(n)
    else:
        order = np.lexsort((src, depth))
    tiles = _bin_indices(mean2d, radius, order, width, height, tile_size)
    if per_tile_sort:
        tiles = [
            [lst[np.lexsort((src[lst], depth[lst]))] if lst.size else lst for lst in row]
            for row in tiles
        ]
    return TileGrid(tile_size=tile_size, width=width, height=height, tiles=tiles)


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------


def _composite_forward(px, py, idxs, mean2d, conic, rgb, opacity, background, config, dtype):
    """Front-to-back alpha compositing of the splats `idxs` over pixels (px, py).

    Returns (rgb (P,3), transmittance (P,), count (P,)).
    """
    p = px.size
    out = np.zeros((p, 3), dtype=dtype)
    trans = np.ones(p, dtype=dtype)
    count = np.zeros(p, dtype=np.int32)
    alpha_min = dtype(config.alpha_min)
    alpha_max = dtype(config.alpha_max)
    t_stop = dtype(config.t_stop)
    for k in idxs:
        alive = trans >= t_stop
        if not alive.any():
            break
        dx = px - mean2d[k, 0]
        dy = py - mean2d[k, 1]
        a, b, c = conic[k, 0], conic[k, 1], conic[k, 2]
        e = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
        g = np.exp(np.minimum(e, 0.0))
        alpha = np.minimum(opacity[k] * g, alpha_max)
        contrib = alive & (alpha >= alpha_min)
        if not contrib.any():
            continue
        w = np.where(contrib, trans * alpha, dtype(0.0))
        out += w[:, None] * rgb[k]
        count += contrib
        trans = np.where(contrib, trans * (1.0 - alpha), trans)
    out += trans[:, None] * np.asarray(background, dtype=dtype)
    return out, trans, count


def composite_pixel(splats, p, background, config: RenderConfig | None = None):
    """Composite an ordered (front-to-back) splat sequence at one pixel position.

    Returns (rgb 3-vector, final transmittance, accepted splat count).
    """
    config = config or RenderConfig()
    n = len(splats)
    mean2d = np.array([s.mean2d for s in splats], dtype=np.float64).reshape(n, 2)
    conic = np.array(
        [(s.inv_cov2d[0, 0], s.inv_cov2d[0, 1], s.inv_cov2d[1, 1]) for s in splats],
        dtype=np.float64,
    ).reshape(n, 3)
    rgb = np.array([s.rgb for s in splats], dtype=np.float64).reshape(n, 3)
    opacity = np.array([s.opacity for s in splats], dtype=np.float64)
    px = np.array([p[0]], dtype=np.float64)
    py = np.array([p[1]], dtype=np.float64)
    out, trans, count = _composite_forward(
        px, py, range(n), mean2d, conic, rgb, opacity, background, config, np.float64
    )
    return out[0], float(trans[0]), int(count[0])


def _tile_pixel_grid(ti, tj, tile_size, width, height, dtype):
    x0 = tj * tile_size
    y0 = ti * tile_size
    x1 = min(x0 + tile_size, width)
    y1 = min(y0 + tile_size, height)
    cols = (np.arange(x0, x1) + 0.5).astype(dtype)
    rows = (np.arange(y0, y1) + 0.5).astype(dtype)
    px = np.tile(cols, y1 - y0)
    py = np.repeat(rows, x1 - x0)
    return x0, x1, y0, y1, px, py


def render(scene: gm.SceneModel, cam: gm.Camera, config: RenderConfig | None = None) -> RenderOutput:
    """Render a scene with frustum culling, tile binning, and a global sort.

    Deterministic for fixed inputs regardless of config.threads.
    """
    config = config or RenderConfig()
    h, w = cam.height, cam.width
    dtype = scene.dtype.type if scene.count else np.float32
    background = np.asarray(scene.background, dtype=dtype)

    color = np.empty((h, w, 3), dtype=dtype)
    trans = np.ones((h, w), dtype=dtype)
    count = np.zeros((h, w), dtype=np.int32)

    if scene.count == 0:
        color[:] = background
        return RenderOutput(color, trans, count, 0)

    proj = project_scene(scene, cam, config)
    keep = proj.in_frustum
    mean2d = proj.mean2d[keep]
    conic = proj.conic[keep]
    rgb = proj.rgb[keep]
    opacity = proj.opacity[keep]
    radius = proj.radius[keep]
    sort_key = proj.sort_key[keep]
    source = proj.source[keep]

    order = np.lexsort((source, sort_key))
    tiles = _bin_indices(mean2d, radius, order, w, h, config.tile_size)

    def run_tile(job):
        ti, tj = job
        x0, x1, y0, y1, px, py = _tile_pixel_grid(ti, tj, config.tile_size, w, h, dtype)
        idxs = tiles[ti][tj]
        if idxs.size == 0:
            color[y0:y1, x0:x1] = background
            return
        out, t_out, c_out = _composite_forward(
            px, py, idxs, mean2d, conic, rgb, opacity, background, config, dtype
        )
        color[y0:y1, x0:x1] = out.reshape(y1 - y0, x1 - x0, 3)
        trans[y0:y1, x0:x1] = t_out.reshape(y1 - y0, x1 - x0)
        count[y0:y1, x0:x1] = c_out.reshape(y1 - y0, x1 - x0)

    jobs = [(ti, tj) for ti in range(len(tiles)) for tj in range(len(tiles[0]))]
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(run_tile, jobs))
    else:
        for job in jobs:
            run_tile(job)

    return RenderOutput(color, trans, count, proj.degenerate_count)
