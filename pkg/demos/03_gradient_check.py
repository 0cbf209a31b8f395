"""Verify the analytic backward pass against central finite differences.

Runs the whole pipeline in float64 on a small audited scene and compares
every coordinate of every parameter class. The same harness backs the
`tinysplat check-gradients` subcommand.
"""

from tinysplat.gradients import GRADCHECK_CONFIG, check_gradients, well_conditioned_scene

scene, cam = well_conditioned_scene(seed=0, count=6, width=16, height=16, sh_degree=2)
print(f"scene: {scene.count} gaussians, SH degree {scene.sh_degree}, {cam.width}x{cam.height}")

report = check_gradients(scene, cam, GRADCHECK_CONFIG, step=1e-4, tolerance=1e-3)
print("class,max_rel_err,status")
for line in report.lines():
    print(line)
