import numpy as np
import pytest

from tinysplat import gaussians as gm
from tinysplat.gradients import GradientBuffer
from tinysplat.rasterizer import RenderConfig, render
from tinysplat.scene_io import generate_synthetic, load_dataset
from tinysplat.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    densify_and_prune,
    init_from_point_cloud,
    photometric_loss,
    psnr,
    resolve_thresholds,
    scene_extent,
    train,
)

from conftest import SubsetDataset, front_camera, random_scene


# ---------------------------------------------------------------------------
# photometric_loss / psnr
# ---------------------------------------------------------------------------


def test_loss_identical_images_zero():
    img = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    loss, d = photometric_loss(img, img)
    assert loss == 0.0
    assert np.all(d == 0.0)


def test_loss_constant_residual():
    a = np.full((4, 4, 3), 0.75)
    b = np.full((4, 4, 3), 0.25)
    loss, _ = photometric_loss(a, b)
    assert np.isclose(loss, 0.25)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    rendered = rng.uniform(0, 1, (4, 5, 3))
    target = rng.uniform(0, 1, (4, 5, 3))
    loss, d = photometric_loss(rendered, target)
    step = 1e-6
    for idx in [(0, 0, 0), (1, 2, 1), (3, 4, 2)]:
        bumped = rendered.copy()
        bumped[idx] += step
        lp, _ = photometric_loss(bumped, target)
        bumped[idx] -= 2 * step
        lm, _ = photometric_loss(bumped, target)
        fd = (lp - lm) / (2 * step)
        assert abs(d[idx] - fd) / max(abs(fd), 1e-12) < 1e-6


def test_loss_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        photometric_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_psnr_examples():
    img = np.random.default_rng(2).uniform(0, 1, (8, 8, 3))
    assert psnr(img, img) == 99.0
    target = np.zeros((10, 10, 3))
    rendered = np.full((10, 10, 3), 0.1)  # mse = 0.01
    assert np.isclose(psnr(rendered, target), 20.0)
    assert np.isclose(psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))), 0.0)


# ---------------------------------------------------------------------------
# adam_step
# ---------------------------------------------------------------------------


def test_adam_first_step_magnitude_is_lr():
    params = np.array([1.0, -2.0, 3.0])
    grads = np.array([0.3, -4.0, 1e3])
    state = AdamState.zeros_like(params)
    before = params.copy()
    adam_step(params, grads, state, lr=0.01)
    delta = params - before
    assert np.all(np.sign(delta) == -np.sign(grads))
    assert np.abs(np.abs(delta) - 0.01).max() < 1e-6 * 0.01


def test_adam_zero_gradient_no_change():
    params = np.array([1.0, 2.0])
    state = AdamState.zeros_like(params)
    adam_step(params, np.zeros(2), state, lr=0.1)
    assert np.array_equal(params, [1.0, 2.0])
    assert np.all(state.v == 0.0)


def test_adam_two_steps_match_scalar_reference():
    # 5-line scalar Adam oracle
    def reference(g_seq, lr=0.05, b1=0.9, b2=0.999, eps=1e-8):
        theta, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(g_seq, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        return theta, m, v

    params = np.array([1.0])
    state = AdamState.zeros_like(params)
    for g in (0.7, -0.7):
        adam_step(params, np.array([g]), state, lr=0.05)
    ref_theta, ref_m, ref_v = reference([0.7, -0.7])
    assert np.isclose(params[0], ref_theta, rtol=1e-12)
    assert np.isclose(state.m[0], ref_m, rtol=1e-12)
    assert np.isclose(state.v[0], ref_v, rtol=1e-12)
    assert np.isclose(state.m[0], 0.9 * (0.1 * 0.7) + 0.1 * (-0.7))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step(np.zeros(3), np.zeros(4), AdamState.zeros_like(np.zeros(3)), lr=0.1)


def test_adam_clamp_applies():
    params = np.array([0.0])
    state = AdamState.zeros_like(params)
    adam_step(params, np.array([1.0]), state, lr=10.0, clamp=(-1.0, 1.0))
    assert params[0] == -1.0


# ---------------------------------------------------------------------------
# init_from_point_cloud
# ---------------------------------------------------------------------------


def test_init_single_point_fallback():
    scene = init_from_point_cloud(np.zeros((1, 3)), np.full((1, 3), 0.5), scene_unit=2.0)
    assert np.allclose(scene.log_scales[0], np.log(0.02))
    assert np.allclose(scene.sh[0, :, 0], 0.0)
    assert np.allclose(gm.sigmoid(scene.opacity_logits[0]), 0.1, atol=1e-6)
    assert np.allclose(scene.quats[0], [1, 0, 0, 0])


def test_init_gray_gives_zero_dc():
    scene = init_from_point_cloud(np.random.default_rng(0).normal(size=(5, 3)),
                                  np.full((5, 3), 0.5))
    assert np.allclose(scene.sh[:, :, 0], 0.0, atol=1e-7)


def test_init_knn_scale_line_oracle():
    # 4 points at unit spacing on a line; middle points see {1, 1, 2}.
    xyz = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    rgb = np.full((4, 3), 0.5)
    scene = init_from_point_cloud(xyz, rgb)

    def brute_knn_mean(i):
        d = np.array([np.linalg.norm(xyz[i] - xyz[j]) for j in range(4) if j != i])
        return np.sort(d)[:3].mean()

    for i in range(4):
        assert np.isclose(np.exp(scene.log_scales[i, 0]), brute_knn_mean(i), rtol=1e-6)
    assert np.isclose(np.exp(scene.log_scales[1, 0]), (1 + 1 + 2) / 3, rtol=1e-6)


def test_init_empty_cloud_rejected():
    with pytest.raises(ValueError, match="empty"):
        init_from_point_cloud(np.zeros((0, 3)), np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# densify_and_prune
# ---------------------------------------------------------------------------


def _adam_states(scene):
    return {
        "mean": AdamState.zeros_like(scene.means),
        "log_scale": AdamState.zeros_like(scene.log_scales),
        "quat": AdamState.zeros_like(scene.quats),
        "opacity_logit": AdamState.zeros_like(scene.opacity_logits),
        "sh": AdamState.zeros_like(scene.sh),
    }


def _config(**kw):
    base = dict(
        iterations=1000, densify_start=0, densify_end=1000, densify_interval=100,
        grad_threshold=1.0, scale_threshold=0.5, prune_opacity=0.005, split_factor=1.6,
    )
    base.update(kw)
    return TrainConfig(**base)


def _stats(scene, norms):
    buf = GradientBuffer.zeros(scene)
    buf.grad2d_norm_accum[:] = norms
    buf.grad2d_count[:] = 1
    return buf


def test_densify_prunes_low_opacity():
    scene = random_scene(0, 4, dtype=np.float64)
    scene.opacity_logits[1] = gm.logit(0.001)
    states = _adam_states(scene)
    buf = _stats(scene, np.zeros(4))
    report = densify_and_prune(scene, buf, states, _config(), iteration=100)
    assert report.pruned == 1
    assert scene.count == 3
    assert np.all(gm.sigmoid(scene.opacity_logits) >= 0.005)


def test_densify_never_prunes_at_or_above_threshold():
    scene = random_scene(1, 3, dtype=np.float64)
    scene.opacity_logits[:] = gm.logit(0.005)  # exactly at epsilon: kept
    states = _adam_states(scene)
    report = densify_and_prune(scene, _stats(scene, np.zeros(3)), states, _config(), 100)
    assert report.pruned == 0
    assert scene.count == 3


def test_densify_clone_branch():
    scene = random_scene(2, 3, dtype=np.float64)
    cfg = _config(grad_threshold=0.1, scale_threshold=0.5)
    scene.log_scales[0] = np.log(0.25)  # max scale 0.25 <= 0.5 -> clone
    states = _adam_states(scene)
    states["mean"].m[:] = 7.0  # surviving rows must keep adam moments
    before = scene.gaussian(0)
    buf = _stats(scene, [0.2, 0.0, 0.0])
    report = densify_and_prune(scene, buf, states, cfg, 100)
    assert (report.cloned, report.split, report.pruned) == (1, 0, 0)
    assert scene.count == 4
    clone = scene.gaussian(3)  # appended after the originals
    assert np.allclose(clone.mean, before.mean)
    assert np.allclose(clone.sh, before.sh)
    assert np.all(states["mean"].m[:3] == 7.0)
    assert np.all(states["mean"].m[3] == 0.0)  # fresh row starts at zero


def test_densify_split_branch_shrinks_principal_eigenvalue():
    scene = random_scene(3, 3, dtype=np.float64)
    cfg = _config(grad_threshold=0.1, scale_threshold=0.05, split_factor=1.6)
    scene.log_scales[1] = np.array([np.log(0.3), np.log(0.1), np.log(0.05)])
    parent_cov = gm.build_covariance(scene.log_scales[1], scene.quats[1])
    parent_lam = np.linalg.eigvalsh(parent_cov)[-1]
    states = _adam_states(scene)
    buf = _stats(scene, [0.0, 0.2, 0.0])
    report = densify_and_prune(scene, buf, states, cfg, 100)
    assert (report.cloned, report.split, report.pruned) == (0, 1, 0)
    assert scene.count == 4  # parent removed, two children added
    children = [scene.gaussian(2), scene.gaussian(3)]
    for child in children:
        lam = np.linalg.eigvalsh(gm.build_covariance(child.log_scale, child.quat))[-1]
        assert abs(lam - parent_lam / 1.6**2) < 1e-9
    # children placed at mean +- u*sqrt(lambda_max)
    offsets = [c.mean - scene.gaussian(2).mean * 0 for c in children]
    sep = np.linalg.norm(children[0].mean - children[1].mean)
    assert np.isclose(sep, 2 * np.sqrt(parent_lam), rtol=1e-9)


def test_densify_split_requires_gradient():
    scene = random_scene(4, 2, dtype=np.float64)
    scene.log_scales[:] = np.log(0.4)  # large, would split if hot
    cfg = _config(grad_threshold=0.5, scale_threshold=0.05)
    states = _adam_states(scene)
    report = densify_and_prune(scene, _stats(scene, [0.4, 0.4]), states, cfg, 100)
    assert report.split == 0 and report.cloned == 0


def test_densify_bookkeeping_row_counts():
    scene = random_scene(5, 6, dtype=np.float64)
    scene.opacity_logits[4] = gm.logit(0.001)
    cfg = _config(grad_threshold=0.1, scale_threshold=0.05)
    states = _adam_states(scene)
    buf = _stats(scene, [0.2, 0.0, 0.2, 0.0, 0.0, 0.0])
    densify_and_prune(scene, buf, states, cfg, 100)
    for st in states.values():
        assert st.m.shape[0] == scene.count
        assert st.v.shape[0] == scene.count
    assert buf.d_means.shape[0] == scene.count
    assert np.all(buf.grad2d_norm_accum == 0.0)  # stats consumed and reset


def test_densify_outside_schedule_is_noop_with_warning():
    scene = random_scene(6, 3, dtype=np.float64)
    states = _adam_states(scene)
    report = densify_and_prune(scene, _stats(scene, np.zeros(3)), states, _config(), 151)
    assert report.warning is not None
    assert scene.count == 3


def test_densify_stochastic_split_seeded():
    cfg = _config(grad_threshold=0.1, scale_threshold=0.05, stochastic_split=True)
    results = []
    for _ in range(2):
        scene = random_scene(7, 2, dtype=np.float64)
        states = _adam_states(scene)
        buf = _stats(scene, [0.3, 0.0])
        densify_and_prune(scene, buf, states, cfg, 100, rng=np.random.default_rng(5))
        results.append(scene.means.copy())
    assert np.array_equal(results[0], results[1])


# ---------------------------------------------------------------------------
# train loop
# ---------------------------------------------------------------------------


def _tiny_dataset(tmp_path, seed=11, count=8, cameras=10, size=32):
    out = tmp_path / f"ds{seed}"
    generate_synthetic(seed, count, cameras, size, size, out_dir=str(out))
    return load_dataset(str(out), require_points=True)


def test_train_zero_iterations_returns_init(tmp_path):
    ds = _tiny_dataset(tmp_path)
    cfg = TrainConfig(iterations=0, densify_start=0, densify_end=0)
    scene, records = train(ds, cfg)
    init = init_from_point_cloud(*ds.points, scene_unit=ds.scene_unit)
    assert np.array_equal(scene.means, init.means)
    assert np.array_equal(scene.opacity_logits, init.opacity_logits)
    assert records == []


def test_train_deterministic_same_seed(tmp_path):
    ds = _tiny_dataset(tmp_path)
    cfg = TrainConfig(iterations=40, densify_start=10, densify_end=30, seed=3)
    s1, r1 = train(ds, cfg)
    s2, r2 = train(ds, cfg)
    assert np.array_equal(s1.means, s2.means)
    assert np.array_equal(s1.log_scales, s2.log_scales)
    assert np.array_equal(s1.quats, s2.quats)
    assert np.array_equal(s1.opacity_logits, s2.opacity_logits)
    assert np.array_equal(s1.sh, s2.sh)
    assert [r.loss for r in r1] == [r.loss for r in r2]


def test_train_loss_halves_by_iteration_500(tmp_path):
    ds = _tiny_dataset(tmp_path, seed=21, count=10, cameras=12, size=32)
    cfg = TrainConfig(iterations=501, densify_start=200, densify_end=400, seed=0)
    scene, records = train(ds, cfg)
    by_iter = {r.iteration: r.loss for r in records}
    assert by_iter[500] < 0.5 * by_iter[0]


def test_train_permutation_invariance(tmp_path):
    ds = _tiny_dataset(tmp_path, seed=31, count=6, cameras=6, size=24)
    init = init_from_point_cloud(*ds.points, scene_unit=ds.scene_unit)
    # unique depths from every camera: generic random means suffice
    cfg = TrainConfig(iterations=30, densify_start=10, densify_end=20, seed=9)
    s1, _ = train(ds, cfg, init_scene=init)
    perm = np.random.default_rng(0).permutation(init.count)
    s2, _ = train(ds, cfg, init_scene=init.take(perm))
    for i in range(len(ds.images)):
        a = render(s1, ds.camera(i)).color
        b = render(s2, ds.camera(i)).color
        assert np.abs(a - b).max() < 1e-6


def test_train_sh_schedule_gates_band_updates(tmp_path):
    ds = _tiny_dataset(tmp_path, seed=51, count=5, cameras=4, size=24)
    base = dict(densify_start=5, densify_end=5, seed=2, max_sh_degree=1)
    # without the schedule the degree-1 band stays inactive (zero gradients)
    cfg0 = TrainConfig(iterations=20, sh_degree_schedule=(), **base)
    s0, _ = train(ds, cfg0)
    assert np.all(s0.sh[:, :, 1:] == 0.0)
    # raising the degree at iteration 8 lets the band move
    cfg1 = TrainConfig(iterations=20, sh_degree_schedule=((8, 1),), **base)
    s1, _ = train(ds, cfg1)
    assert np.any(s1.sh[:, :, 1:] != 0.0)


def test_train_aborts_on_non_finite_loss(tmp_path):
    ds = _tiny_dataset(tmp_path, seed=41, count=4, cameras=3, size=16)
    ds.images[0][0, 0, 0] = np.nan
    ds.images[1][0, 0, 0] = np.nan
    ds.images[2][0, 0, 0] = np.nan
    cfg = TrainConfig(iterations=5, densify_start=0, densify_end=0)
    with pytest.raises(RuntimeError, match="non-finite"):
        train(ds, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError, match="betas"):
        TrainConfig(adam_beta1=1.5)
    with pytest.raises(ValueError, match="lr_mean"):
        TrainConfig(lr_mean=0.0)
    with pytest.raises(ValueError, match="densify"):
        TrainConfig(iterations=100, densify_start=500, densify_end=600)


def test_resolve_thresholds_defaults():
    cfg = resolve_thresholds(TrainConfig(), extent=3.0, width=64, height=64)
    assert np.isclose(cfg.grad_threshold, 1e-3 / np.hypot(64, 64))
    assert np.isclose(cfg.scale_threshold, 0.03)


def test_scene_extent():
    assert scene_extent(np.zeros((1, 3))) == 0.0
    pts = np.array([[0.0, 0, 0], [1.0, 2.0, 2.0]])
    assert np.isclose(scene_extent(pts), 3.0)
