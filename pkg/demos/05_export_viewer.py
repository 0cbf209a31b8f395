"""Export a scene for the browser viewer.

Writes the 32-byte-per-record .splat file plus a pose file the viewer (and
`tinysplat render --pose-file`) both understand, closing the loop between
the engine and the interactive frontend in frontend/.
"""

from tinysplat.scene_io import export_splat, generate_synthetic, write_pose_file

scene, manifest, _ = generate_synthetic(seed=7, count=20, camera_count=8, width=64, height=64)
export_splat(scene, "scene.splat")
write_pose_file(manifest.frames[0], "pose.json")
print(f"wrote scene.splat ({scene.count} records, {scene.count * 32} bytes) and pose.json")
print("open frontend/index.html (after `npm run build` there) and drop scene.splat in,")
print("or reproduce the exact view with:")
print("  tinysplat render --ckpt <ckpt> --pose-file pose.json --out view.ppm")
