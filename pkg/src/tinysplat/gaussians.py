"""Pure math for 3D/2D Gaussians, pinhole cameras, and spherical-harmonics color.

Everything in this module is deterministic and side-effect-free. Scalars and
small fixed-size vectors go in, values come out; no state is shared. The
vectorized helpers (suffix ``s``) operate on stacked arrays and are what the
renderer uses; the single-primitive functions are the reference surface that
tests exercise directly.

Conventions:
- Camera space is right-handed with +x right, +y down, +z forward; a point is
  visible only if near < z < far.
- Quaternions are (w, x, y, z) and may be stored un-normalized; they are
  renormalized at the point of use.
- Pixel (i, j) has its center at (j + 0.5, i + 0.5) in image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Real spherical-harmonics normalization constants, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.4453057213202769,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3

# exp(log_scale) is clamped into this range after every optimizer step.
LOG_SCALE_MIN = np.log(1e-8)
LOG_SCALE_MAX = np.log(1e8)

QUAT_NORM_EPS = 1e-12


def num_sh_coeffs(degree: int) -> int:
    """Number of SH basis functions per channel for a maximum degree."""
    return (degree + 1) ** 2


def sh_degree_from_coeffs(count: int) -> int:
    """Inverse of num_sh_coeffs; raises if count is not a perfect square."""
    degree = int(round(np.sqrt(count))) - 1
    if num_sh_coeffs(degree) != count:
        raise ValueError(f"coefficient count {count} is not (L+1)^2 for any L")
    return degree


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------


def sh_basis(directions: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit directions.

    Args:
        directions: (..., 3) unit vectors.
        degree: maximum band, 0..3.

    Returns:
        (..., (degree+1)^2) basis values.
    """
    if degree > MAX_SH_DEGREE:
        raise ValueError(f"unsupported SH degree {degree} (max {MAX_SH_DEGREE})")
    d = np.asarray(directions)
    out = np.empty(d.shape[:-1] + (num_sh_coeffs(degree),), dtype=d.dtype)
    out[..., 0] = SH_C0
    if degree < 1:
        return out
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[..., 4] = SH_C2[0] * xy
    out[..., 5] = SH_C2[1] * yz
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * xz
    out[..., 8] = SH_C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = SH_C3[1] * xy * z
    out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_gradient(directions: np.ndarray, degree: int) -> np.ndarray:
    """Gradient of each SH basis function w.r.t. the (unit) direction.

    Returns (..., (degree+1)^2, 3); row k is dY_k/d(direction).
    """
    if degree > MAX_SH_DEGREE:
        raise ValueError(f"unsupported SH degree {degree} (max {MAX_SH_DEGREE})")
    d = np.asarray(directions)
    out = np.zeros(d.shape[:-1] + (num_sh_coeffs(degree), 3), dtype=d.dtype)
    if degree < 1:
        return out
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out[..., 1, 1] = -SH_C1
    out[..., 2, 2] = SH_C1
    out[..., 3, 0] = -SH_C1
    if degree < 2:
        return out
    out[..., 4, 0] = SH_C2[0] * y
    out[..., 4, 1] = SH_C2[0] * x
    out[..., 5, 1] = SH_C2[1] * z
    out[..., 5, 2] = SH_C2[1] * y
    out[..., 6, 0] = SH_C2[2] * -2.0 * x
    out[..., 6, 1] = SH_C2[2] * -2.0 * y
    out[..., 6, 2] = SH_C2[2] * 4.0 * z
    out[..., 7, 0] = SH_C2[3] * z
    out[..., 7, 2] = SH_C2[3] * x
    out[..., 8, 0] = SH_C2[4] * 2.0 * x
    out[..., 8, 1] = SH_C2[4] * -2.0 * y
    if degree < 3:
        return out
    xx, yy, zz = x * x, y * y, z * z
    out[..., 9, 0] = SH_C3[0] * 6.0 * x * y
    out[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    out[..., 10, 0] = SH_C3[1] * y * z
    out[..., 10, 1] = SH_C3[1] * x * z
    out[..., 10, 2] = SH_C3[1] * x * y
    out[..., 11, 0] = SH_C3[2] * -2.0 * x * y
    out[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    out[..., 11, 2] = SH_C3[2] * 8.0 * y * z
    out[..., 12, 0] = SH_C3[3] * -6.0 * x * z
    out[..., 12, 1] = SH_C3[3] * -6.0 * y * z
    out[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    out[..., 13, 1] = SH_C3[4] * -2.0 * x * y
    out[..., 13, 2] = SH_C3[4] * 8.0 * x * z
    out[..., 14, 0] = SH_C3[5] * 2.0 * x * z
    out[..., 14, 1] = SH_C3[5] * -2.0 * y * z
    out[..., 14, 2] = SH_C3[5] * (xx - yy)
    out[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    out[..., 15, 1] = SH_C3[6] * -6.0 * x * y
    return out


def eval_sh(coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """View-dependent RGB from SH coefficients.

    Args:
        coeffs: (3, (L+1)^2) per-channel coefficients, L in 0..3.
        direction: unit 3-vector (||direction|| = 1 within 1e-6).

    Returns:
        (3,) color: sum_k coeffs[:, k] * Y_k(direction) + 0.5, clamped to >= 0.
    """
    coeffs = np.asarray(coeffs)
    degree = sh_degree_from_coeffs(coeffs.shape[-1])
    basis = sh_basis(np.asarray(direction, dtype=coeffs.dtype), degree)
    return np.maximum(coeffs @ basis + coeffs.dtype.type(0.5), 0.0)


# ---------------------------------------------------------------------------
# Quaternions and covariances
# ---------------------------------------------------------------------------


def normalize_quaternions(quats: np.ndarray) -> np.ndarray:
    """Normalize (..., 4) quaternions; raises on near-zero norm."""
    q = np.asarray(quats, dtype=np.result_type(quats, np.float32))
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= QUAT_NORM_EPS):
        raise ValueError("degenerate quaternion: norm <= 1e-12")
    return q / norm


def quaternions_to_rotations(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z), normalizing first."""
    q = normalize_quaternions(quats)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    rot[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[..., 0, 1] = 2.0 * (x * y - w * z)
    rot[..., 0, 2] = 2.0 * (x * z + w * y)
    rot[..., 1, 0] = 2.0 * (x * y + w * z)
    rot[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[..., 1, 2] = 2.0 * (y * z - w * x)
    rot[..., 2, 0] = 2.0 * (x * z - w * y)
    rot[..., 2, 1] = 2.0 * (y * z + w * x)
    rot[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot


def build_covariance(log_scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """3x3 covariance R diag(exp(log_scale))^2 R^T for one Gaussian.

    The result is symmetric positive definite for any finite log_scale and any
    quaternion with norm > 1e-12.
    """
    return build_covariances(np.asarray(log_scale)[None], np.asarray(quat)[None])[0]


def build_covariances(log_scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Batch form of build_covariance: (N, 3), (N, 4) -> (N, 3, 3)."""
    rot = quaternions_to_rotations(quats)
    scale = np.exp(np.asarray(log_scales, dtype=rot.dtype))
    m = rot * scale[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def eval_gaussian3(mean: np.ndarray, cov: np.ndarray, x: np.ndarray) -> float:
    """Unnormalized Gaussian density exp(-0.5 (x-mean)^T cov^-1 (x-mean)).

    Raises on a non-positive-definite covariance (det <= 0).
    """
    cov = np.asarray(cov, dtype=np.float64)
    if np.linalg.det(cov) <= 0.0:
        raise ValueError("singular covariance: det <= 0")
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.inv(cov) @ d))


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera: world-to-camera pose [R|t] plus intrinsics in pixels."""

    world_to_cam: np.ndarray  # (3, 4), rows of R orthonormal, det(R) = 1
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        if self.world_to_cam.shape != (3, 4):
            raise ValueError("world_to_cam must be 3x4")
        r = self.rotation
        if abs(np.linalg.det(r) - 1.0) >= 1e-6:
            raise ValueError("camera rotation determinant differs from 1")
        if np.max(np.abs(r @ r.T - np.eye(3))) >= 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if not (0.0 < self.near < self.far):
            raise ValueError("camera clip planes must satisfy 0 < near < far")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(
        cls,
        eye,
        target,
        up=(0.0, 1.0, 0.0),
        *,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        width: int,
        height: int,
        near: float = 0.01,
        far: float = 1000.0,
    ) -> "Camera":
        """Camera at `eye` looking toward `target` (+z forward, +y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("look_at eye and target coincide")
        forward = forward / norm
        right = np.cross(np.asarray(up, dtype=np.float64), forward)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            raise ValueError("look_at direction is parallel to up")
        right = right / rnorm
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        pose = np.concatenate([rot, (-rot @ eye)[:, None]], axis=1)
        return cls(pose, fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                   near=near, far=far)


def world_to_camera(cam: Camera, x_world: np.ndarray) -> np.ndarray:
    """R x + t; accepts a single point or an (..., 3) stack."""
    x = np.asarray(x_world)
    return x @ cam.rotation.T.astype(x.dtype, copy=False) + cam.translation.astype(
        x.dtype, copy=False
    )


def project_point(cam: Camera, x_cam: np.ndarray) -> np.ndarray:
    """Perspective projection to pixels: (fx x/z + cx, fy y/z + cy).

    Raises if z <= 0 (point behind the camera).
    """
    x = np.asarray(x_cam)
    z = x[..., 2]
    if np.any(z <= 0.0):
        raise ValueError("cannot project point with z <= 0 (behind camera)")
    u = x[..., 0] / z * x.dtype.type(cam.fx) + x.dtype.type(cam.cx)
    v = x[..., 1] / z * x.dtype.type(cam.fy) + x.dtype.type(cam.cy)
    return np.stack([u, v], axis=-1)


def projection_jacobian(cam: Camera, x_cam: np.ndarray) -> np.ndarray:
    """2x3 Jacobian of project_point at a camera-space point (z > 0)."""
    x, y, z = np.asarray(x_cam, dtype=np.float64)
    if z <= 0.0:
        raise ValueError("cannot project point with z <= 0 (behind camera)")
    return np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )


# ---------------------------------------------------------------------------
# Scene primitives
# ---------------------------------------------------------------------------


@dataclass
class Gaussian3D:
    """One scene primitive.

    Fields:
        mean: (3,) world position.
        log_scale: (3,) log standard deviation per principal axis.
        quat: (4,) rotation (w, x, y, z), not necessarily unit.
        opacity_logit: scalar; opacity = sigmoid(opacity_logit).
        sh: (3, (L+1)^2) RGB spherical-harmonics coefficients.
    """

    mean: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    opacity_logit: float
    sh: np.ndarray


@dataclass
class Splat2D:
    """A Gaussian projected into one camera's image plane."""

    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2), includes dilation
    inv_cov2d: np.ndarray  # (2, 2)
    depth: float  # camera-space z of the 3D mean
    rgb: np.ndarray  # (3,) view-evaluated color, >= 0
    opacity: float  # sigmoid(opacity_logit), in (0, 1)
    source_index: int = -1


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def splat_gaussian(
    g: Gaussian3D,
    cam: Camera,
    sh_degree: int,
    dilation: float = 0.3,
    det_floor: float = 1e-12,
) -> Splat2D:
    """Project one Gaussian into a camera, producing a 2D splat.

    The 2D covariance is J R cov R^T J^T + dilation*I where J is the projection
    Jacobian at the mean and R the rotation part of the pose (the translation
    cancels in the covariance congruence). Color is the SH evaluation along the
    direction from the camera center to the mean, clamped to >= 0.

    Raises if the mean depth is outside (near, far) or the dilated 2D covariance
    falls below the determinant floor (such a splat is treated as culled).
    """
    mean_cam = world_to_camera(cam, np.asarray(g.mean, dtype=np.float64))
    depth = float(mean_cam[2])
    if not (cam.near < depth < cam.far):
        raise ValueError(f"mean depth {depth:.6g} outside ({cam.near}, {cam.far})")
    mean2d = project_point(cam, mean_cam)
    jac = projection_jacobian(cam, mean_cam)
    cov3 = build_covariance(np.asarray(g.log_scale, dtype=np.float64), g.quat)
    rot = cam.rotation
    cov2 = jac @ (rot @ cov3 @ rot.T) @ jac.T + dilation * np.eye(2)
    det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] * cov2[1, 0]
    if det < det_floor:
        raise ValueError("projected covariance below determinant floor")
    inv = np.array([[cov2[1, 1], -cov2[0, 1]], [-cov2[1, 0], cov2[0, 0]]]) / det
    view_dir = np.asarray(g.mean, dtype=np.float64) - cam.center
    view_dir = view_dir / np.linalg.norm(view_dir)
    coeffs = np.asarray(g.sh, dtype=np.float64)[:, : num_sh_coeffs(sh_degree)]
    rgb = eval_sh(coeffs, view_dir)
    return Splat2D(
        mean2d=mean2d,
        cov2d=cov2,
        inv_cov2d=inv,
        depth=depth,
        rgb=rgb,
        opacity=float(sigmoid(np.float64(g.opacity_logit))),
        source_index=-1,
    )


def eval_gaussian2(s: Splat2D, p: np.ndarray):
    """2D Gaussian falloff exp(-0.5 d^T inv_cov2d d) at pixel position(s) p."""
    d = np.asarray(p) - s.mean2d
    a, b, c = s.inv_cov2d[0, 0], s.inv_cov2d[0, 1], s.inv_cov2d[1, 1]
    dx, dy = d[..., 0], d[..., 1]
    e = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
    return np.exp(np.minimum(e, 0.0))


# ---------------------------------------------------------------------------
# Scene container
# ---------------------------------------------------------------------------


@dataclass
class SceneModel:
    """The optimizable parameter set: a growable array of Gaussians.

    Arrays share a leading axis of length count; `sh` is (N, 3, (L+1)^2).
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float32)

    @classmethod
    def empty(cls, sh_degree: int = 0, dtype=np.float32) -> "SceneModel":
        k = num_sh_coeffs(sh_degree)
        return cls(
            means=np.zeros((0, 3), dtype=dtype),
            log_scales=np.zeros((0, 3), dtype=dtype),
            quats=np.zeros((0, 4), dtype=dtype),
            opacity_logits=np.zeros(0, dtype=dtype),
            sh=np.zeros((0, 3, k), dtype=dtype),
        )

    @classmethod
    def from_gaussians(cls, gaussians, background=(0.0, 0.0, 0.0), dtype=np.float32) -> "SceneModel":
        if not gaussians:
            raise ValueError("from_gaussians needs at least one Gaussian")
        return cls(
            means=np.array([g.mean for g in gaussians], dtype=dtype),
            log_scales=np.array([g.log_scale for g in gaussians], dtype=dtype),
            quats=np.array([g.quat for g in gaussians], dtype=dtype),
            opacity_logits=np.array([g.opacity_logit for g in gaussians], dtype=dtype),
            sh=np.array([g.sh for g in gaussians], dtype=dtype),
            background=np.asarray(background, dtype=np.float32),
        )

    @property
    def count(self) -> int:
        return self.means.shape[0]

    def __len__(self) -> int:
        return self.count

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_coeffs(self.sh.shape[2])

    @property
    def dtype(self):
        return self.means.dtype

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i].copy(),
            log_scale=self.log_scales[i].copy(),
            quat=self.quats[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].copy(),
        )

    def astype(self, dtype) -> "SceneModel":
        return SceneModel(
            means=self.means.astype(dtype),
            log_scales=self.log_scales.astype(dtype),
            quats=self.quats.astype(dtype),
            opacity_logits=self.opacity_logits.astype(dtype),
            sh=self.sh.astype(dtype),
            background=self.background.copy(),
        )

    def copy(self) -> "SceneModel":
        return self.astype(self.dtype)

    def take(self, indices) -> "SceneModel":
        """Sub-scene with the given Gaussian rows (copying)."""
        idx = np.asarray(indices)
        return SceneModel(
            means=self.means[idx].copy(),
            log_scales=self.log_scales[idx].copy(),
            quats=self.quats[idx].copy(),
            opacity_logits=self.opacity_logits[idx].copy(),
            sh=self.sh[idx].copy(),
            background=self.background.copy(),
        )
