/** Orbit camera: azimuth/elevation/distance around a target point.
 *
 * The derived pose follows the engine's conventions: camera space is
 * right-handed with +x right, +y down, +z forward, and the exported pose file
 * is one dataset-manifest frame (world_to_cam row-major 4x4 plus intrinsics),
 * so any explored view reproduces exactly via `render --pose-file`.
 */

export interface CameraSpec {
  worldToCam: Float64Array; // 12 values, row-major [R|t]
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
}

export interface OrbitCamera {
  target: [number, number, number];
  distance: number;
  azimuth: number; // radians
  elevation: number; // radians, clamped to +-89 deg
  fovY: number; // radians
  minDistance: number;
  maxDistance: number;
}

export type InputEvent =
  | { kind: "drag"; dx: number; dy: number; button: "primary" | "secondary" }
  | { kind: "wheel"; delta: number };

const MAX_ELEVATION = (89 * Math.PI) / 180;
const TWO_PI = Math.PI * 2;
const DRAG_SPEED = 0.008; // radians per pixel
const PAN_SPEED = 0.002; // world units per pixel per unit distance
const WHEEL_SPEED = 0.001;

export function makeOrbitCamera(extent: number, center: [number, number, number]): OrbitCamera {
  return {
    target: [center[0], center[1], center[2]],
    distance: 2.0 * extent,
    azimuth: 0,
    elevation: 0,
    fovY: (45 * Math.PI) / 180,
    minDistance: 0.01 * extent,
    maxDistance: 100 * extent,
  };
}

export function eyePosition(cam: OrbitCamera): [number, number, number] {
  const ce = Math.cos(cam.elevation);
  return [
    cam.target[0] + cam.distance * ce * Math.cos(cam.azimuth),
    cam.target[1] + cam.distance * Math.sin(cam.elevation),
    cam.target[2] + cam.distance * ce * Math.sin(cam.azimuth),
  ];
}

function cross(a: number[], b: number[]): [number, number, number] {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function normalize(v: number[]): [number, number, number] {
  const n = Math.hypot(v[0], v[1], v[2]);
  return [v[0] / n, v[1] / n, v[2] / n];
}

/** World-to-camera basis (rows: right, down, forward) for an eye/target pair. */
export function lookAtPose(eye: number[], target: number[]): Float64Array {
  const forward = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]]);
  const right = normalize(cross([0, 1, 0], forward));
  const down = cross(forward, right);
  const rot = [right, down, forward];
  const pose = new Float64Array(12);
  for (let r = 0; r < 3; r++) {
    pose[r * 4 + 0] = rot[r][0];
    pose[r * 4 + 1] = rot[r][1];
    pose[r * 4 + 2] = rot[r][2];
    pose[r * 4 + 3] = -(rot[r][0] * eye[0] + rot[r][1] * eye[1] + rot[r][2] * eye[2]);
  }
  return pose;
}

export function cameraSpec(cam: OrbitCamera, width: number, height: number): CameraSpec {
  const fy = height / 2 / Math.tan(cam.fovY / 2);
  return {
    worldToCam: lookAtPose(eyePosition(cam), cam.target),
    fx: fy,
    fy,
    cx: width / 2,
    cy: height / 2,
    width,
    height,
  };
}

/** Apply a batch of input events; returns a new camera (inputs never mutate). */
export function handleInput(cam: OrbitCamera, events: InputEvent[]): OrbitCamera {
  const out: OrbitCamera = { ...cam, target: [...cam.target] };
  for (const ev of events) {
    if (ev.kind === "wheel") {
      out.distance *= Math.exp(WHEEL_SPEED * ev.delta);
    } else if (ev.button === "primary") {
      out.azimuth += DRAG_SPEED * ev.dx;
      out.elevation += DRAG_SPEED * ev.dy;
    } else {
      // secondary drag pans the target in the view plane
      const spec = lookAtPose(eyePosition(out), out.target);
      const scale = PAN_SPEED * out.distance;
      for (let k = 0; k < 3; k++) {
        const right = spec[k]; // row 0
        const down = spec[4 + k]; // row 1
        out.target[k] -= scale * (ev.dx * right + ev.dy * down);
      }
    }
  }
  if (out.azimuth >= TWO_PI) out.azimuth -= TWO_PI * Math.floor(out.azimuth / TWO_PI);
  if (out.azimuth < 0) out.azimuth += TWO_PI * Math.ceil(-out.azimuth / TWO_PI);
  out.elevation = Math.min(MAX_ELEVATION, Math.max(-MAX_ELEVATION, out.elevation));
  out.distance = Math.min(out.maxDistance, Math.max(out.minDistance, out.distance));
  return out;
}

/** Pose-file payload (one manifest frame without image_path). */
export function exportPose(spec: CameraSpec): string {
  const m = [
    ...spec.worldToCam.slice(0, 4),
    ...spec.worldToCam.slice(4, 8),
    ...spec.worldToCam.slice(8, 12),
    0, 0, 0, 1,
  ];
  return JSON.stringify(
    {
      world_to_cam: Array.from(m),
      fx: spec.fx,
      fy: spec.fy,
      cx: spec.cx,
      cy: spec.cy,
      width: spec.width,
      height: spec.height,
    },
    null,
    2,
  );
}

export function importPose(json: string): CameraSpec {
  const raw = JSON.parse(json);
  const m: number[] = raw.world_to_cam;
  if (!Array.isArray(m) || m.length !== 16) {
    throw new Error("pose file needs a 16-value world_to_cam matrix");
  }
  return {
    worldToCam: new Float64Array(m.slice(0, 12)),
    fx: raw.fx,
    fy: raw.fy,
    cx: raw.cx,
    cy: raw.cy,
    width: raw.width,
    height: raw.height,
  };
}

/** Viewing direction (unit forward vector in world space). */
export function viewDirection(spec: CameraSpec): [number, number, number] {
  return [spec.worldToCam[8], spec.worldToCam[9], spec.worldToCam[10]];
}
