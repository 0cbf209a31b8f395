"""Dataset ingestion, checkpoint persistence, viewer export, and synthetic
scene generation.

All file formats are bit-exact and host-independent: JSON manifests, binary
P6 PPM images, a PLY subset for point clouds, the "GSPLAT01" checkpoint, and
32-byte splat records for the web viewer. Writers never emit timestamps or
unordered maps, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import gaussians as gm
from .rasterizer import RenderConfig, render

DEFAULT_NEAR = 0.01
DEFAULT_FAR = 1000.0

CHECKPOINT_MAGIC = b"GSPLAT01"
SPLAT_RECORD_BYTES = 32

MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# sRGB transfer
# ---------------------------------------------------------------------------


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


# ---------------------------------------------------------------------------
# PPM (binary P6, maxval 255)
# ---------------------------------------------------------------------------


def save_ppm(path, image: np.ndarray) -> None:
    """Write a linear-float RGB image as binary P6 with a canonical header."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("save_ppm expects an (H, W, 3) image")
    srgb = linear_to_srgb(np.clip(img, 0.0, 1.0))
    data = np.rint(srgb * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read binary P6 into linear-float RGB in [0, 1] (sRGB decoded)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P6":
        raise ValueError(f"{path}: bad magic, expected P6")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":  # comment to end of line
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(v) for v in fields)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric header field") from exc
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval} (need 255)")
    need = w * h * 3
    payload = raw[pos : pos + need]
    if len(payload) != need:
        raise ValueError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return srgb_to_linear(data / 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# PLY subset (ascii / binary_little_endian; x,y,z + red,green,blue)
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def load_ply_points(path):
    """Read vertex positions and colors from a PLY file.

    Requires x, y, z (float/double) and red, green, blue (integer types are
    mapped to [0, 1]); unknown scalar properties are skipped. Only ascii and
    binary_little_endian formats are accepted.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"ply"):
        raise ValueError(f"{path}: not a PLY file")
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ValueError(f"{path}: missing end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n") :]

    fmt = None
    elements = []  # (name, count, [(prop_name, type_str)])
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise ValueError(f"{path}: unsupported format '{fmt}' (big-endian rejected)")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ValueError(f"{path}: property before element")
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            elements[-1][2].append((parts[2], parts[1]))
    if fmt is None:
        raise ValueError(f"{path}: missing format line")

    vertex = None
    offset = 0
    ascii_rows_skipped = 0
    for name, count, props in elements:
        np_fields = [(pname, "<" + _PLY_TYPES[ptype]) for pname, ptype in props]
        for pname, ptype in props:
            if ptype not in _PLY_TYPES:
                raise ValueError(f"{path}: unknown property type '{ptype}'")
        if name == "vertex":
            vertex = (count, props, offset, ascii_rows_skipped)
            break
        if fmt == "binary_little_endian":
            offset += count * sum(np.dtype(t).itemsize for _, t in np_fields)
        else:
            ascii_rows_skipped += count
    if vertex is None:
        raise ValueError(f"{path}: no vertex element")
    count, props, offset, rows_skipped = vertex
    names = [p for p, _ in props]
    for required in ("x", "y", "z", "red", "green", "blue"):
        if required not in names:
            raise ValueError(f"{path}: vertex element is missing property '{required}'")

    if fmt == "binary_little_endian":
        dt = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props])
        need = count * dt.itemsize
        chunk = body[offset : offset + need]
        if len(chunk) != need:
            raise ValueError(f"{path}: truncated vertex data")
        table = np.frombuffer(chunk, dtype=dt)
        col = {p: table[p] for p in ("x", "y", "z", "red", "green", "blue")}
    else:
        lines = body.decode("ascii").split("\n")
        rows = [ln.split() for ln in lines[rows_skipped : rows_skipped + count]]
        if len(rows) < count or any(len(r) < len(props) for r in rows):
            raise ValueError(f"{path}: truncated vertex data")
        arr = np.array([[float(v) for v in r[: len(props)]] for r in rows])
        col = {p: arr[:, i] for i, (p, _) in enumerate(props)}

    xyz = np.stack([col["x"], col["y"], col["z"]], axis=-1).astype(np.float64)
    rgb = np.stack([col["red"], col["green"], col["blue"]], axis=-1).astype(np.float64)
    color_types = {t for p, t in props if p in ("red", "green", "blue")}
    if color_types & {"uchar", "uint8", "char", "int8"}:
        rgb = rgb / 255.0
    return xyz, np.clip(rgb, 0.0, 1.0)


def save_ply_points(path, xyz: np.ndarray, rgb: np.ndarray, binary: bool = True) -> None:
    """Write a point cloud in the same PLY subset load_ply_points reads."""
    xyz = np.asarray(xyz, dtype=np.float64)
    rgb255 = np.rint(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    n = xyz.shape[0]
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                           ("red", "u1"), ("green", "u1"), ("blue", "u1")])
            table = np.empty(n, dtype=dt)
            table["x"], table["y"], table["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
            table["red"], table["green"], table["blue"] = rgb255[:, 0], rgb255[:, 1], rgb255[:, 2]
            f.write(table.tobytes())
        else:
            lines = []
            for i in range(n):
                x, y, z = (float(np.float32(v)) for v in xyz[i])
                lines.append(f"{x!r} {y!r} {z!r} {rgb255[i,0]} {rgb255[i,1]} {rgb255[i,2]}")
            f.write(("\n".join(lines) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


@dataclass
class FrameRecord:
    image_path: str
    world_to_cam: np.ndarray  # (4, 4), last row (0, 0, 0, 1)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass
class DatasetManifest:
    version: int
    scene_unit: float
    frames: list


@dataclass
class Dataset:
    """A loaded manifest: decoded images plus camera accessors."""

    manifest: DatasetManifest
    images: list
    points: tuple | None = None  # (xyz, rgb) when a point cloud accompanies it
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    @property
    def scene_unit(self) -> float:
        return self.manifest.scene_unit

    def camera(self, i: int) -> gm.Camera:
        return camera_from_frame(self.manifest.frames[i], near=self.near, far=self.far)


def _require(frame: dict, key: str, path, index: int):
    if key not in frame:
        raise ValueError(f"{path}: frames[{index}] is missing field '{key}'")
    return frame[key]


def camera_from_frame(frame: FrameRecord, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> gm.Camera:
    rot = frame.world_to_cam[:3, :3]
    # Snap nearly-orthonormal rotations (within the manifest's 1e-4 gate) onto
    # the rotation manifold so Camera's stricter invariant always holds.
    err = max(
        abs(np.linalg.det(rot) - 1.0),
        float(np.max(np.abs(rot @ rot.T - np.eye(3)))),
    )
    if err > 1e-9:
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        if np.linalg.det(rot) < 0:
            u[:, -1] = -u[:, -1]
            rot = u @ vt
    pose = np.concatenate([rot, frame.world_to_cam[:3, 3:4]], axis=1)
    return gm.Camera(
        pose, fx=frame.fx, fy=frame.fy, cx=frame.cx, cy=frame.cy,
        width=frame.width, height=frame.height, near=near, far=far,
    )


def _frame_from_dict(raw: dict, path, index: int) -> FrameRecord:
    mat = _require(raw, "world_to_cam", path, index)
    if len(mat) != 16:
        raise ValueError(f"{path}: frames[{index}].world_to_cam needs 16 values")
    m = np.asarray(mat, dtype=np.float64).reshape(4, 4)
    if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0), atol=1e-12):
        raise ValueError(f"{path}: frames[{index}].world_to_cam last row must be 0,0,0,1")
    rot = m[:3, :3]
    err = max(
        abs(np.linalg.det(rot) - 1.0),
        float(np.max(np.abs(rot @ rot.T - np.eye(3)))),
    )
    if err > 1e-4:
        raise ValueError(
            f"{path}: frames[{index}].world_to_cam rotation is not orthonormal "
            f"(error {err:.3g} > 1e-4)"
        )
    return FrameRecord(
        image_path=str(_require(raw, "image_path", path, index)),
        world_to_cam=m,
        fx=float(_require(raw, "fx", path, index)),
        fy=float(_require(raw, "fy", path, index)),
        cx=float(_require(raw, "cx", path, index)),
        cy=float(_require(raw, "cy", path, index)),
        width=int(_require(raw, "width", path, index)),
        height=int(_require(raw, "height", path, index)),
    )


def load_manifest(path, load_images: bool = True):
    """Parse and validate a manifest; returns (DatasetManifest, images).

    Image paths are resolved relative to the manifest's directory; every image
    must decode and match the frame's (width, height).
    """
    if not os.path.exists(path):
        raise ValueError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    for key in ("version", "scene_unit", "frames"):
        if key not in raw:
            raise ValueError(f"{path}: missing field '{key}'")
    frames = [_frame_from_dict(fr, path, i) for i, fr in enumerate(raw["frames"])]
    manifest = DatasetManifest(
        version=int(raw["version"]), scene_unit=float(raw["scene_unit"]), frames=frames
    )
    images = []
    if load_images:
        base = os.path.dirname(os.path.abspath(path))
        for i, fr in enumerate(frames):
            img_path = os.path.join(base, fr.image_path)
            if not os.path.exists(img_path):
                raise ValueError(f"{path}: frames[{i}] image does not exist: {fr.image_path}")
            img = load_ppm(img_path)
            if img.shape[:2] != (fr.height, fr.width):
                raise ValueError(
                    f"{path}: frames[{i}] image size {img.shape[1]}x{img.shape[0]} "
                    f"does not match manifest {fr.width}x{fr.height}"
                )
            images.append(img)
    return manifest, images


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "version": manifest.version,
        "scene_unit": manifest.scene_unit,
        "frames": [
            {
                "image_path": fr.image_path,
                "world_to_cam": [float(v) for v in fr.world_to_cam.reshape(-1)],
                "fx": fr.fx,
                "fy": fr.fy,
                "cx": fr.cx,
                "cy": fr.cy,
                "width": fr.width,
                "height": fr.height,
            }
            for fr in manifest.frames
        ],
    }


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest_to_dict(manifest), f, indent=2)
        f.write("\n")


def load_dataset(data_dir, require_points: bool = False) -> Dataset:
    """Load manifest.json (+ points.ply when present) from a dataset directory."""
    manifest, images = load_manifest(os.path.join(data_dir, "manifest.json"))
    points = None
    ply = os.path.join(data_dir, "points.ply")
    if os.path.exists(ply):
        points = load_ply_points(ply)
    elif require_points:
        raise ValueError(f"{data_dir}: points.ply required for initialization")
    return Dataset(manifest=manifest, images=images, points=points)


# ---------------------------------------------------------------------------
# Pose files (one manifest frame, no image_path; viewer interop)
# ---------------------------------------------------------------------------


def load_pose_file(path) -> FrameRecord:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    raw.setdefault("image_path", "")
    return _frame_from_dict(raw, path, 0)


def write_pose_file(frame: FrameRecord, path) -> None:
    record = {
        "world_to_cam": [float(v) for v in frame.world_to_cam.reshape(-1)],
        "fx": frame.fx,
        "fy": frame.fy,
        "cx": frame.cx,
        "cy": frame.cy,
        "width": frame.width,
        "height": frame.height,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# GSPLAT01 checkpoint
# ---------------------------------------------------------------------------


def save_checkpoint(scene: gm.SceneModel, path) -> None:
    """Write the scene as little-endian float32 records (atomic replace)."""
    count = scene.count
    degree = scene.sh_degree
    k = gm.num_sh_coeffs(degree)
    rec = np.empty((count, 11 + 3 * k), dtype="<f4")
    rec[:, 0:3] = scene.means
    rec[:, 3:6] = scene.log_scales
    rec[:, 6:10] = scene.quats
    rec[:, 10] = scene.opacity_logits
    rec[:, 11:] = scene.sh.reshape(count, 3 * k)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IB3x", count, degree))
        f.write(rec.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> gm.SceneModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    count, degree = struct.unpack("<IB", raw[8:13])
    if raw[13:16] != b"\x00\x00\x00":
        raise ValueError(f"{path}: reserved checkpoint bytes must be zero")
    k = gm.num_sh_coeffs(degree)
    floats_per = 11 + 3 * k
    need = 16 + count * floats_per * 4
    if len(raw) != need:
        raise ValueError(f"{path}: checkpoint size {len(raw)} != expected {need}")
    rec = np.frombuffer(raw[16:], dtype="<f4").reshape(count, floats_per)
    return gm.SceneModel(
        means=rec[:, 0:3].copy(),
        log_scales=rec[:, 3:6].copy(),
        quats=rec[:, 6:10].copy(),
        opacity_logits=rec[:, 10].copy(),
        sh=rec[:, 11:].reshape(count, 3, k).copy(),
    )


# ---------------------------------------------------------------------------
# Viewer export (32-byte records)
# ---------------------------------------------------------------------------


def export_splat(scene: gm.SceneModel, path) -> None:
    """Write quantized 32-byte splat records sorted by descending opacity.

    Layout per record, little-endian: position 3xf32, scale 3xf32
    (exp(log_scale)), color 4xu8 (degree-0 color and alpha), rotation 4xu8
    (normalized quaternion quantized as min(255, round(c*128 + 128))).
    """
    opacity = gm.sigmoid(scene.opacity_logits.astype(np.float64))
    order = np.lexsort((np.arange(scene.count), -opacity))
    means = scene.means.astype("<f4")[order]
    scales = np.exp(scene.log_scales.astype(np.float64)).astype("<f4")[order]
    dc = scene.sh[order, :, 0].astype(np.float64)
    color = np.clip(gm.SH_C0 * dc + 0.5, 0.0, 1.0)
    color_b = np.rint(color * 255.0).astype(np.uint8)
    alpha_b = np.rint(opacity[order] * 255.0).astype(np.uint8)
    quats = scene.quats.astype(np.float64)[order]
    quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    rot_b = np.minimum(np.rint(quats * 128.0 + 128.0), 255.0)
    rot_b = np.maximum(rot_b, 0.0).astype(np.uint8)

    with open(path, "wb") as f:
        for i in range(scene.count):
            f.write(means[i].tobytes())
            f.write(scales[i].tobytes())
            f.write(color_b[i].tobytes())
            f.write(bytes([alpha_b[i]]))
            f.write(rot_b[i].tobytes())


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


def _fibonacci_band_directions(count: int, max_latitude_deg: float = 60.0) -> np.ndarray:
    """Evenly spread unit directions with |latitude| capped (deterministic)."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    i = np.arange(count)
    s = np.sin(np.deg2rad(max_latitude_deg))
    y = s * (1.0 - 2.0 * (i + 0.5) / count)
    r = np.sqrt(1.0 - y * y)
    theta = golden * i
    return np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=-1)


def synthetic_camera(index: int, camera_count: int, width: int, height: int) -> gm.Camera:
    """Camera `index` of the deterministic radius-4 capture rig."""
    direction = _fibonacci_band_directions(camera_count)[index]
    return gm.Camera.look_at(
        eye=4.0 * direction,
        target=(0.0, 0.0, 0.0),
        fx=1.2 * width,
        fy=1.2 * width,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        near=DEFAULT_NEAR,
        far=DEFAULT_FAR,
    )


def generate_synthetic(
    seed: int,
    count: int,
    camera_count: int,
    width: int = 64,
    height: int = 64,
    out_dir=None,
    render_config: RenderConfig | None = None,
):
    """Seeded synthetic scene + capture rig; optionally written to disk.

    Creates `count` random Gaussians inside [-1, 1]^3, cameras on a radius-4
    sphere looking at the origin, and target images rendered with the tiled
    rasterizer. When out_dir is given, writes images/frame_%03d.ppm,
    manifest.json, points.ply (an SfM stand-in: ground-truth means jittered
    by 0.05 units with gray colors, plus a few spurious points), and
    gt.gsplat (the ground-truth checkpoint, for reference renders).

    Returns (ground-truth SceneModel, DatasetManifest, [images]).
    """
    if count < 1 or camera_count < 1:
        raise ValueError("need count >= 1 and camera_count >= 1")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-1.0, 1.0, size=(count, 3))
    log_scales = rng.uniform(np.log(0.05), np.log(0.2), size=(count, 3))
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacity_logits = rng.uniform(gm.logit(0.3), gm.logit(0.9), size=count)
    colors = rng.uniform(0.1, 0.9, size=(count, 3))
    sh = np.zeros((count, 3, 1))
    sh[:, :, 0] = (colors - 0.5) / gm.SH_C0
    scene = gm.SceneModel(
        means=means.astype(np.float32),
        log_scales=log_scales.astype(np.float32),
        quats=quats.astype(np.float32),
        opacity_logits=opacity_logits.astype(np.float32),
        sh=sh.astype(np.float32),
    )

    config = render_config or RenderConfig()
    frames = []
    images = []
    for i in range(camera_count):
        cam = synthetic_camera(i, camera_count, width, height)
        out = render(scene, cam, config)
        images.append(out.color)
        pose = np.eye(4)
        pose[:3, :] = cam.world_to_cam
        frames.append(
            FrameRecord(
                image_path=f"images/frame_{i:03d}.ppm",
                world_to_cam=pose,
                fx=cam.fx,
                fy=cam.fy,
                cx=cam.cx,
                cy=cam.cy,
                width=width,
                height=height,
            )
        )
    manifest = DatasetManifest(version=MANIFEST_VERSION, scene_unit=1.0, frames=frames)

    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        for fr, img in zip(frames, images):
            save_ppm(os.path.join(out_dir, fr.image_path), img)
        write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
        jitter = rng.normal(0.0, 0.05, size=(count, 3))
        spurious = rng.uniform(-1.0, 1.0, size=(max(2, count // 4), 3))
        cloud_xyz = np.concatenate([means + jitter, spurious], axis=0)
        cloud_rgb = np.full((cloud_xyz.shape[0], 3), 0.5)
        save_ply_points(os.path.join(out_dir, "points.ply"), cloud_xyz, cloud_rgb)
        save_checkpoint(scene, os.path.join(out_dir, "gt.gsplat"))

    return scene, manifest, images
