import numpy as np
import pytest

from tinysplat import gaussians as gm
from tinysplat.gradients import (
    GRADCHECK_CONFIG,
    GradientBuffer,
    backward_render,
    check_gradients,
    well_conditioned_scene,
)
from tinysplat.rasterizer import RenderConfig, render

from conftest import front_camera, random_scene


def test_zero_cotangent_gives_zero_gradients():
    scene, cam = well_conditioned_scene(0, count=4)
    buf = backward_render(scene, cam, GRADCHECK_CONFIG, np.zeros((cam.height, cam.width, 3)))
    assert np.all(buf.d_means == 0)
    assert np.all(buf.d_log_scales == 0)
    assert np.all(buf.d_quats == 0)
    assert np.all(buf.d_opacity_logits == 0)
    assert np.all(buf.d_sh == 0)


def test_dimension_mismatch_rejected():
    scene, cam = well_conditioned_scene(0, count=3)
    with pytest.raises(ValueError, match="shape"):
        backward_render(scene, cam, GRADCHECK_CONFIG, np.zeros((4, 4, 3)))


@pytest.mark.parametrize("seed,degree", [(0, 0), (1, 1), (2, 2), (3, 3)])
def test_finite_difference_all_parameter_classes(seed, degree):
    scene, cam = well_conditioned_scene(seed, count=5, sh_degree=degree)
    report = check_gradients(scene, cam, GRADCHECK_CONFIG, step=1e-4, tolerance=1e-3)
    assert report.passed, report.max_rel_err


def test_opacity_gradient_sign_for_bright_gaussian():
    # A single white gaussian on black background: more opacity, more light.
    sh = np.zeros((1, 3, 1))
    sh[0, :, 0] = 0.5 / gm.SH_C0  # white
    scene = gm.SceneModel(
        means=np.array([[0.0, 0.0, 0.0]]),
        log_scales=np.full((1, 3), np.log(0.3)),
        quats=np.array([[1.0, 0.0, 0.0, 0.0]]),
        opacity_logits=np.array([0.0]),
        sh=sh,
    ).astype(np.float64)
    cam = front_camera(16, 16)
    d_image = np.ones((16, 16, 3))
    buf = backward_render(scene, cam, RenderConfig(), d_image)
    assert buf.d_opacity_logits[0] > 0


def test_culled_gaussian_gradient_exactly_zero():
    scene, cam = well_conditioned_scene(1, count=4)
    behind = scene.copy()
    behind.means = np.vstack([behind.means, [[0.0, 0.0, -20.0]]])  # behind camera
    behind.log_scales = np.vstack([behind.log_scales, behind.log_scales[:1]])
    behind.quats = np.vstack([behind.quats, behind.quats[:1]])
    behind.opacity_logits = np.append(behind.opacity_logits, 0.0)
    behind.sh = np.concatenate([behind.sh, behind.sh[:1]], axis=0)
    rng = np.random.default_rng(0)
    d_image = rng.normal(size=(cam.height, cam.width, 3))
    buf = backward_render(behind, cam, GRADCHECK_CONFIG, d_image)
    assert np.all(buf.d_means[-1] == 0)
    assert np.all(buf.d_quats[-1] == 0)
    assert buf.d_opacity_logits[-1] == 0
    assert buf.grad2d_count[-1] == 0


def test_permutation_equivariance():
    scene, cam = well_conditioned_scene(2, count=6, sh_degree=1)
    rng = np.random.default_rng(9)
    d_image = rng.normal(size=(cam.height, cam.width, 3))
    buf = backward_render(scene, cam, GRADCHECK_CONFIG, d_image)
    perm = rng.permutation(scene.count)
    shuffled = scene.take(perm)
    buf_p = backward_render(shuffled, cam, GRADCHECK_CONFIG, d_image)
    assert np.array_equal(buf_p.d_means, buf.d_means[perm])
    assert np.array_equal(buf_p.d_quats, buf.d_quats[perm])
    assert np.array_equal(buf_p.d_sh, buf.d_sh[perm])
    assert np.array_equal(buf_p.d_opacity_logits, buf.d_opacity_logits[perm])


def test_quat_gradient_radial_component_annihilated():
    scene, cam = well_conditioned_scene(3, count=5)
    rng = np.random.default_rng(1)
    d_image = rng.normal(size=(cam.height, cam.width, 3))
    buf = backward_render(scene, cam, GRADCHECK_CONFIG, d_image)
    qhat = scene.quats / np.linalg.norm(scene.quats, axis=1, keepdims=True)
    radial = np.abs(np.einsum("ij,ij->i", buf.d_quats, qhat))
    assert radial.max() < 1e-9


def test_backward_thread_invariance():
    scene, cam = well_conditioned_scene(4, count=6)
    rng = np.random.default_rng(2)
    d_image = rng.normal(size=(cam.height, cam.width, 3))
    one = backward_render(scene, cam, GRADCHECK_CONFIG, d_image)
    cfg8 = RenderConfig(alpha_min=0.0, t_stop=0.0, threads=8)
    eight = backward_render(scene, cam, cfg8, d_image)
    for name in ("d_means", "d_log_scales", "d_quats", "d_opacity_logits", "d_sh"):
        assert np.array_equal(getattr(one, name), getattr(eight, name))


def test_accumulation_order_independent():
    scene, cam = well_conditioned_scene(5, count=5)
    rng = np.random.default_rng(3)
    images = [rng.normal(size=(cam.height, cam.width, 3)) for _ in range(3)]
    bufs = [backward_render(scene, cam, GRADCHECK_CONFIG, d) for d in images]
    fwd = GradientBuffer.zeros(scene)
    for b in bufs:
        fwd.add(b)
    rev = GradientBuffer.zeros(scene)
    for b in reversed(bufs):
        rev.add(b)
    assert np.abs(fwd.d_means - rev.d_means).max() < 1e-6
    assert np.abs(fwd.d_sh - rev.d_sh).max() < 1e-6
    assert np.array_equal(fwd.grad2d_count, rev.grad2d_count)


def test_buffer_finite_after_backward():
    scene, cam = well_conditioned_scene(6, count=6, sh_degree=2)
    rng = np.random.default_rng(4)
    d_image = rng.normal(size=(cam.height, cam.width, 3))
    buf = backward_render(scene, cam, GRADCHECK_CONFIG, d_image)
    assert buf.is_finite()


def test_check_gradients_flags_corrupted_gradient():
    scene, cam = well_conditioned_scene(7, count=4)

    def corrupt(buf):
        buf.d_means *= 2.0
        return buf

    report = check_gradients(
        scene, cam, GRADCHECK_CONFIG, step=1e-4, tolerance=1e-3, gradient_transform=corrupt
    )
    assert not report.passed
    assert report.max_rel_err["mean"] > 1e-3
    assert report.max_rel_err["quat"] < 1e-3  # untouched classes still pass


def test_check_gradients_step_underflow_diagnostic():
    scene, cam = well_conditioned_scene(8, count=2)
    report = check_gradients(scene, cam, GRADCHECK_CONFIG, step=1e-12, tolerance=1e-3)
    assert any("underflow" in msg for msg in report.diagnostics)


def test_check_gradients_scene_size_guard():
    scene = random_scene(0, 65).astype(np.float64)
    cam = front_camera(8, 8)
    with pytest.raises(ValueError, match="64"):
        check_gradients(scene, cam)


def test_well_conditioned_scene_passes_at_tolerance():
    scene, cam = well_conditioned_scene(9, count=4, sh_degree=1)
    report = check_gradients(scene, cam, GRADCHECK_CONFIG, step=1e-4, tolerance=1e-3)
    assert report.passed
    lines = report.lines()
    assert lines[-1] == "result,pass"
