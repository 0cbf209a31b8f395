import numpy as np
import pytest

from tinysplat import gaussians as gm


def random_scene(seed, count, sh_degree=0, dtype=np.float32, opacity_range=(0.3, 0.9),
                 background=(0.0, 0.0, 0.0)):
    """Seeded random scene inside [-1, 1]^3 (mirrors the synthetic generator)."""
    rng = np.random.default_rng(seed)
    k = gm.num_sh_coeffs(sh_degree)
    sh = np.zeros((count, 3, k))
    sh[:, :, 0] = (rng.uniform(0.1, 0.9, (count, 3)) - 0.5) / gm.SH_C0
    if k > 1:
        sh[:, :, 1:] = rng.uniform(-0.1, 0.1, (count, 3, k - 1))
    quats = rng.normal(size=(count, 4))
    return gm.SceneModel(
        means=rng.uniform(-1.0, 1.0, (count, 3)).astype(dtype),
        log_scales=rng.uniform(np.log(0.05), np.log(0.2), (count, 3)).astype(dtype),
        quats=quats.astype(dtype),
        opacity_logits=rng.uniform(
            gm.logit(opacity_range[0]), gm.logit(opacity_range[1]), count
        ).astype(dtype),
        sh=sh.astype(dtype),
        background=np.asarray(background, dtype=np.float32),
    )


def front_camera(width=64, height=64, dist=4.0, f_scale=1.2):
    return gm.Camera.look_at(
        eye=(0.0, 0.0, -dist),
        target=(0.0, 0.0, 0.0),
        fx=f_scale * width,
        fy=f_scale * width,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


class SubsetDataset:
    """Dataset view over selected frame indices (same ducks as cli._SplitDataset)."""

    def __init__(self, base, indices):
        self.base = base
        self.indices = list(indices)
        self.images = [base.images[i] for i in self.indices]
        self.points = base.points
        self.scene_unit = base.scene_unit

    def camera(self, i):
        return self.base.camera(self.indices[i])


@pytest.fixture
def rng():
    return np.random.default_rng(123)
