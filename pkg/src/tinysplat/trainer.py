"""Optimization loop: photometric loss, Adam, point-cloud init, and adaptive
density control (clone / split / prune).

The loop is single-threaded orchestration; render and backward parallelize
internally per their own contracts. Everything is reproducible from the seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import gaussians as gm
from .gradients import GradientBuffer, backward_render
from .rasterizer import RenderConfig, render


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_mean: float = 1.6e-4  # scaled by scene extent at train start
    lr_log_scale: float = 5e-3
    lr_quat: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    densify_start: int = 500
    densify_end: int = 1800
    densify_interval: int = 100
    grad_threshold: float | None = None  # px; None -> 1e-3 / image diagonal
    scale_threshold: float | None = None  # world units; None -> 1% of scene extent
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    sh_degree_schedule: tuple = ()  # ((iteration, degree), ...)
    max_sh_degree: int = 0
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    eval_interval: int = 100
    stochastic_split: bool = False
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in (0, 1)")
        for name in ("lr_mean", "lr_log_scale", "lr_quat", "lr_opacity", "lr_sh"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")
        if not (self.densify_start <= self.densify_end <= self.iterations):
            raise ValueError("need densify_start <= densify_end <= iterations")


@dataclass
class AdamState:
    """First/second moment estimates for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params), t=0)


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8, clamp=None):
    """One bias-corrected Adam update, in place; returns the updated params.

    `clamp=(lo, hi)` bounds the result elementwise (used for log-scales).
    """
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    b1, b2 = betas
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * np.square(grads)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    params -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.dtype, copy=False)
    if clamp is not None:
        np.clip(params, clamp[0], clamp[1], out=params)
    return params


def photometric_loss(rendered: np.ndarray, target: np.ndarray):
    """Mean squared error over all pixel-channels and its image cotangent."""
    if rendered.shape != target.shape:
        raise ValueError(f"image shape mismatch: {rendered.shape} vs {target.shape}")
    diff = rendered.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    d_image = (2.0 / diff.size) * diff
    return loss, d_image.astype(rendered.dtype, copy=False)


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 99."""
    if rendered.shape != target.shape:
        raise ValueError(f"image shape mismatch: {rendered.shape} vs {target.shape}")
    mse = float(np.mean((rendered.astype(np.float64) - target.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return 99.0
    return min(10.0 * np.log10(1.0 / mse), 99.0)


def scene_extent(means: np.ndarray) -> float:
    """Bounding-box diagonal of a point set (0 for a single point)."""
    if means.shape[0] == 0:
        return 0.0
    span = means.max(axis=0) - means.min(axis=0)
    return float(np.linalg.norm(span))


def init_from_point_cloud(
    xyz: np.ndarray,
    rgb: np.ndarray,
    scene_unit: float = 1.0,
    max_sh_degree: int = 0,
    init_opacity: float = 0.1,
    background=(0.0, 0.0, 0.0),
    dtype=np.float32,
) -> gm.SceneModel:
    """One Gaussian per point: isotropic scale from the 3 nearest neighbors.

    The degree-0 SH coefficient inverts the +0.5 color offset; quats start at
    identity and opacity at `init_opacity`. A single point (no neighbors) falls
    back to log(0.01 * scene_unit).
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    n = xyz.shape[0]
    if n == 0:
        raise ValueError("point cloud is empty")
    if n == 1:
        mean_dist = np.full(1, 0.01 * scene_unit)
    else:
        d2 = np.sum((xyz[:, None, :] - xyz[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        k = min(3, n - 1)
        nearest = np.sqrt(np.sort(d2, axis=1)[:, :k])
        mean_dist = np.maximum(nearest.mean(axis=1), 1e-7 * max(scene_unit, 1e-30))
    log_scale = np.log(mean_dist)

    k_sh = gm.num_sh_coeffs(max_sh_degree)
    sh = np.zeros((n, 3, k_sh))
    sh[:, :, 0] = (rgb - 0.5) / gm.SH_C0
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return gm.SceneModel(
        means=xyz.astype(dtype),
        log_scales=np.repeat(log_scale[:, None], 3, axis=1).astype(dtype),
        quats=quats.astype(dtype),
        opacity_logits=np.full(n, gm.logit(init_opacity), dtype=dtype),
        sh=sh.astype(dtype),
        background=np.asarray(background, dtype=np.float32),
    )


# ---------------------------------------------------------------------------
# Adaptive density control
# ---------------------------------------------------------------------------


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    warning: str | None = None


def _principal_axis_offsets(scene: gm.SceneModel, idx: np.ndarray):
    """(S, 3) offsets u*sqrt(lambda_max) along each covariance's principal axis."""
    cov = gm.build_covariances(
        scene.log_scales[idx].astype(np.float64), scene.quats[idx].astype(np.float64)
    )
    eigval, eigvec = np.linalg.eigh(cov)
    lam_max = eigval[:, -1]
    axis = eigvec[:, :, -1]
    # Fix the eigenvector sign so splits are reproducible under row permutation.
    lead = np.argmax(np.abs(axis), axis=1)
    sign = np.sign(axis[np.arange(axis.shape[0]), lead])
    sign[sign == 0] = 1.0
    return axis * (sign * np.sqrt(lam_max))[:, None]


def densify_and_prune(
    scene: gm.SceneModel,
    gradbuf: GradientBuffer,
    adam_states: dict,
    config: TrainConfig,
    iteration: int,
    rng: np.random.Generator | None = None,
) -> DensifyReport:
    """Clone small / split large high-gradient Gaussians, then prune by opacity.

    Mutates scene, gradbuf (reset to zeros at the new size), and every
    AdamState in `adam_states` consistently: surviving rows keep their
    moments, new rows start at zero.
    """
    in_window = config.densify_start <= iteration <= config.densify_end
    if not (in_window and iteration % config.densify_interval == 0):
        return DensifyReport(
            warning=f"iteration {iteration} outside densification schedule; no-op"
        )
    if config.grad_threshold is None or config.scale_threshold is None:
        raise ValueError("resolve grad_threshold and scale_threshold before densifying")

    avg_grad = gradbuf.grad2d_norm_accum / np.maximum(gradbuf.grad2d_count, 1)
    hot = avg_grad > config.grad_threshold
    max_scale = np.exp(scene.log_scales.astype(np.float64)).max(axis=1)
    clone_mask = hot & (max_scale <= config.scale_threshold)
    split_mask = hot & (max_scale > config.scale_threshold)

    n = scene.count
    keep_idx = np.flatnonzero(~split_mask)  # originals that survive (clone parents stay)
    clone_idx = np.flatnonzero(clone_mask)
    split_idx = np.flatnonzero(split_mask)

    pieces_idx = [keep_idx, clone_idx]  # rows copied verbatim from the old scene
    new_rows = {name: [] for name in ("means", "log_scales", "quats", "opacity_logits", "sh")}
    if split_idx.size:
        if config.stochastic_split:
            if rng is None:
                raise ValueError("stochastic_split requires an rng")
            cov = gm.build_covariances(
                scene.log_scales[split_idx].astype(np.float64),
                scene.quats[split_idx].astype(np.float64),
            )
            chol = np.linalg.cholesky(cov)
            offsets = np.einsum("sij,sj->si", chol, rng.standard_normal((split_idx.size, 3)))
        else:
            offsets = _principal_axis_offsets(scene, split_idx)
        child_scale = scene.log_scales[split_idx] - np.log(config.split_factor).astype(
            scene.dtype
        )
        for sign in (-1.0, 1.0):
            new_rows["means"].append(
                (scene.means[split_idx].astype(np.float64) + sign * offsets).astype(scene.dtype)
            )
            new_rows["log_scales"].append(child_scale.copy())
            new_rows["quats"].append(scene.quats[split_idx].copy())
            new_rows["opacity_logits"].append(scene.opacity_logits[split_idx].copy())
            new_rows["sh"].append(scene.sh[split_idx].copy())

    old_rows = np.concatenate(pieces_idx) if pieces_idx else np.zeros(0, dtype=np.int64)
    n_children = 2 * split_idx.size

    def rebuild(arr, extra):
        parts = [arr[old_rows]]
        parts.extend(extra)
        return np.concatenate(parts, axis=0)

    scene.means = rebuild(scene.means, new_rows["means"])
    scene.log_scales = rebuild(scene.log_scales, new_rows["log_scales"])
    scene.quats = rebuild(scene.quats, new_rows["quats"])
    scene.opacity_logits = rebuild(scene.opacity_logits, new_rows["opacity_logits"])
    scene.sh = rebuild(scene.sh, new_rows["sh"])

    # Row map: >=0 keeps an old row's optimizer state; -1 marks a fresh row.
    # Clones copy parameters but start with zeroed Adam moments like children.
    row_map = np.concatenate(
        [keep_idx, np.full(clone_idx.size + n_children, -1, dtype=np.int64)]
    )

    # Prune on the post-clone/split population.
    opacity = gm.sigmoid(scene.opacity_logits.astype(np.float64))
    keep_after_prune = opacity >= config.prune_opacity
    pruned = int(np.count_nonzero(~keep_after_prune))
    survivors = np.flatnonzero(keep_after_prune)
    scene.means = scene.means[survivors]
    scene.log_scales = scene.log_scales[survivors]
    scene.quats = scene.quats[survivors]
    scene.opacity_logits = scene.opacity_logits[survivors]
    scene.sh = scene.sh[survivors]
    row_map = row_map[survivors]

    for name, state in adam_states.items():
        old_m, old_v = state.m, state.v
        shape = (row_map.size,) + old_m.shape[1:]
        m = np.zeros(shape, dtype=old_m.dtype)
        v = np.zeros(shape, dtype=old_v.dtype)
        from_old = row_map >= 0
        m[from_old] = old_m[row_map[from_old]]
        v[from_old] = old_v[row_map[from_old]]
        state.m, state.v = m, v

    fresh = GradientBuffer.zeros(scene)
    for name in vars(fresh):
        setattr(gradbuf, name, getattr(fresh, name))

    return DensifyReport(cloned=int(clone_idx.size), split=int(split_idx.size), pruned=pruned)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    psnr: float
    gaussian_count: int
    wall_ms: float


def resolve_thresholds(config: TrainConfig, extent: float, width: int, height: int) -> TrainConfig:
    """Fill in extent/image dependent defaults for the densification thresholds.

    The gradient statistic carries the mean-normalized loss cotangent, which
    scales like 1/(image diagonal); the default threshold follows suit.
    """
    grad_t = config.grad_threshold
    if grad_t is None:
        grad_t = 1e-3 / float(np.hypot(width, height))
    scale_t = config.scale_threshold
    if scale_t is None:
        scale_t = 0.01 * extent if extent > 0 else 0.01
    return replace(config, grad_threshold=grad_t, scale_threshold=scale_t)


def train(dataset, config: TrainConfig, init_scene: gm.SceneModel | None = None, on_record=None):
    """Optimize a scene against a dataset of posed images.

    dataset must expose .images (list of HxWx3 float arrays), .camera(i), and,
    unless init_scene is given, .points = (xyz, rgb) for initialization.
    Returns (scene, [TrainRecord...]); fully reproducible from config.seed.
    """
    n_views = len(dataset.images)
    if n_views < 1:
        raise ValueError("dataset has no posed images")
    if init_scene is None:
        xyz, rgb = dataset.points
        scene = init_from_point_cloud(
            xyz,
            rgb,
            scene_unit=getattr(dataset, "scene_unit", 1.0),
            max_sh_degree=config.max_sh_degree,
            background=config.background,
        )
    else:
        scene = init_scene.copy()
        scene.background = np.asarray(config.background, dtype=np.float32)

    extent = scene_extent(scene.means.astype(np.float64))
    cam0 = dataset.camera(0)
    config = resolve_thresholds(config, extent, cam0.width, cam0.height)
    lr_mean = config.lr_mean * (extent if extent > 0 else 1.0)

    rng = np.random.default_rng(config.seed)
    view_order = rng.permutation(n_views)

    adam_states = {
        "mean": AdamState.zeros_like(scene.means),
        "log_scale": AdamState.zeros_like(scene.log_scales),
        "quat": AdamState.zeros_like(scene.quats),
        "opacity_logit": AdamState.zeros_like(scene.opacity_logits),
        "sh": AdamState.zeros_like(scene.sh),
    }
    accum = GradientBuffer.zeros(scene)
    schedule = sorted(config.sh_degree_schedule)
    active_degree = 0
    records = []
    betas = (config.adam_beta1, config.adam_beta2)
    start = time.perf_counter()

    for it in range(config.iterations):
        for sched_it, sched_deg in schedule:
            if it >= sched_it:
                active_degree = min(sched_deg, scene.sh_degree)
        rcfg = replace(config.render, sh_degree=active_degree)

        view = int(view_order[it % n_views])
        cam = dataset.camera(view)
        target = dataset.images[view]
        out = render(scene, cam, rcfg)
        loss, d_image = photometric_loss(out.color, target)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at iteration {it} (view {view}, "
                f"{scene.count} gaussians); aborting"
            )
        gbuf = backward_render(scene, cam, rcfg, d_image)

        if it % config.eval_interval == 0:
            quality = psnr(np.clip(out.color, 0.0, 1.0), target)
            rec = TrainRecord(
                iteration=it,
                loss=loss,
                psnr=quality,
                gaussian_count=scene.count,
                wall_ms=(time.perf_counter() - start) * 1e3,
            )
            records.append(rec)
            if on_record is not None:
                on_record(rec)

        adam_step(scene.means, gbuf.d_means, adam_states["mean"], lr_mean, betas, config.adam_eps)
        adam_step(
            scene.log_scales,
            gbuf.d_log_scales,
            adam_states["log_scale"],
            config.lr_log_scale,
            betas,
            config.adam_eps,
            clamp=(gm.LOG_SCALE_MIN, gm.LOG_SCALE_MAX),
        )
        adam_step(scene.quats, gbuf.d_quats, adam_states["quat"], config.lr_quat, betas, config.adam_eps)
        adam_step(
            scene.opacity_logits,
            gbuf.d_opacity_logits,
            adam_states["opacity_logit"],
            config.lr_opacity,
            betas,
            config.adam_eps,
        )
        adam_step(scene.sh, gbuf.d_sh, adam_states["sh"], config.lr_sh, betas, config.adam_eps)
        accum.add(gbuf)

        step_index = it + 1  # densification acts after the update at this step
        if (
            config.densify_start <= step_index <= config.densify_end
            and step_index % config.densify_interval == 0
        ):
            densify_and_prune(scene, accum, adam_states, config, step_index, rng=rng)

    return scene, records
