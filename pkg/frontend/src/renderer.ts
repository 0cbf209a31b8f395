/** Software splat renderer: painter's-sorted screen-space ellipses.
 *
 * Each splat is projected with the same mean/covariance math as the engine
 * (perspective Jacobian at the mean, world rotation congruence, 0.3 px
 * dilation) and blended back-to-front with premultiplied alpha, which is
 * numerically the same compositing the engine does front-to-back. Color is
 * the stored degree-0 value; view-dependent bands are an engine-side concern.
 */

import { CameraSpec } from "./orbit_camera.js";
import { ViewerScene } from "./splat_format.js";

const DILATION = 0.3;
const ALPHA_MIN = 1 / 255;
const ALPHA_MAX = 0.99;
const NEAR = 0.01;
const FAR = 1000.0;

export interface Frame {
  width: number;
  height: number;
  /** Linear RGB, row-major, 3 floats per pixel. */
  data: Float32Array;
}

interface ProjectedSplat {
  index: number;
  depth: number;
  u: number;
  v: number;
  // conic (inverse 2D covariance) entries
  a: number;
  b: number;
  c: number;
  radius: number;
  alpha: number;
}

function rotationFromQuat(q: Float32Array, o: number): number[] {
  const w = q[o], x = q[o + 1], y = q[o + 2], z = q[o + 3];
  return [
    1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
    2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
    2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
  ];
}

export function projectSplats(scene: ViewerScene, cam: CameraSpec): ProjectedSplat[] {
  const m = cam.worldToCam;
  const out: ProjectedSplat[] = [];
  for (let i = 0; i < scene.count; i++) {
    const px = scene.positions[i * 3];
    const py = scene.positions[i * 3 + 1];
    const pz = scene.positions[i * 3 + 2];
    const z = m[8] * px + m[9] * py + m[10] * pz + m[11];
    if (z <= NEAR || z >= FAR) continue;
    const x = m[0] * px + m[1] * py + m[2] * pz + m[3];
    const y = m[4] * px + m[5] * py + m[6] * pz + m[7];
    const u = (x / z) * cam.fx + cam.cx;
    const v = (y / z) * cam.fy + cam.cy;

    // cov3 (world) = R S^2 R^T
    const rot = rotationFromQuat(scene.rotations, i * 4);
    const s0 = scene.scales[i * 3], s1 = scene.scales[i * 3 + 1], s2 = scene.scales[i * 3 + 2];
    const sq = [s0 * s0, s1 * s1, s2 * s2];
    const cov3 = new Array(9).fill(0);
    for (let r = 0; r < 3; r++) {
      for (let cIdx = 0; cIdx < 3; cIdx++) {
        let acc = 0;
        for (let k = 0; k < 3; k++) acc += rot[r * 3 + k] * sq[k] * rot[cIdx * 3 + k];
        cov3[r * 3 + cIdx] = acc;
      }
    }
    // A = J * Rw, J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    const invZ = 1 / z;
    const j00 = cam.fx * invZ, j02 = -cam.fx * x * invZ * invZ;
    const j11 = cam.fy * invZ, j12 = -cam.fy * y * invZ * invZ;
    const a0 = [
      j00 * m[0] + j02 * m[8], j00 * m[1] + j02 * m[9], j00 * m[2] + j02 * m[10],
    ];
    const a1 = [
      j11 * m[4] + j12 * m[8], j11 * m[5] + j12 * m[9], j11 * m[6] + j12 * m[10],
    ];
    const mulCov = (r: number[], s: number[]) => {
      let acc = 0;
      for (let p = 0; p < 3; p++) for (let q = 0; q < 3; q++) acc += r[p] * cov3[p * 3 + q] * s[q];
      return acc;
    };
    const covA = mulCov(a0, a0) + DILATION;
    const covB = mulCov(a0, a1);
    const covC = mulCov(a1, a1) + DILATION;
    const det = covA * covC - covB * covB;
    if (det < 1e-12) continue;

    const alphaPeak = scene.alphas[i];
    if (alphaPeak < ALPHA_MIN) continue;
    const mid = 0.5 * (covA + covC);
    const lamMax = mid + Math.sqrt(Math.max(mid * mid - det, 0));
    const k = Math.min(
      Math.max(3, Math.sqrt(2 * Math.log(alphaPeak / ALPHA_MIN))),
      16,
    );
    const radius = k * Math.sqrt(lamMax);
    if (u + radius < 0 || u - radius > cam.width || v + radius < 0 || v - radius > cam.height) {
      continue;
    }
    out.push({
      index: i,
      depth: z,
      u,
      v,
      a: covC / det,
      b: -covB / det,
      c: covA / det,
      radius,
      alpha: alphaPeak,
    });
  }
  return out;
}

/** Painter's order: far to near; equal depths break by descending index so the
 * result is the exact reverse of the engine's front-to-back order. */
export function painterSort(splats: ProjectedSplat[]): ProjectedSplat[] {
  return [...splats].sort((p, q) => q.depth - p.depth || q.index - p.index);
}

export function renderFrame(
  scene: ViewerScene,
  cam: CameraSpec,
  background: [number, number, number] = [0, 0, 0],
): Frame {
  const { width, height } = cam;
  const data = new Float32Array(width * height * 3);
  for (let p = 0; p < width * height; p++) {
    data[p * 3] = background[0];
    data[p * 3 + 1] = background[1];
    data[p * 3 + 2] = background[2];
  }
  const ordered = painterSort(projectSplats(scene, cam));
  for (const s of ordered) {
    const x0 = Math.max(0, Math.floor(s.u - s.radius - 0.5));
    const x1 = Math.min(width - 1, Math.ceil(s.u + s.radius - 0.5));
    const y0 = Math.max(0, Math.floor(s.v - s.radius - 0.5));
    const y1 = Math.min(height - 1, Math.ceil(s.v + s.radius - 0.5));
    const cr = scene.colors[s.index * 3];
    const cg = scene.colors[s.index * 3 + 1];
    const cb = scene.colors[s.index * 3 + 2];
    for (let yi = y0; yi <= y1; yi++) {
      const dy = yi + 0.5 - s.v;
      for (let xi = x0; xi <= x1; xi++) {
        const dx = xi + 0.5 - s.u;
        const e = -0.5 * (s.a * dx * dx + 2 * s.b * dx * dy + s.c * dy * dy);
        if (e > 0) continue;
        const alpha = Math.min(s.alpha * Math.exp(e), ALPHA_MAX);
        if (alpha < ALPHA_MIN) continue;
        const p = (yi * width + xi) * 3;
        const keep = 1 - alpha;
        data[p] = alpha * cr + keep * data[p];
        data[p + 1] = alpha * cg + keep * data[p + 1];
        data[p + 2] = alpha * cb + keep * data[p + 2];
      }
    }
  }
  return { width, height, data };
}

/** Linear [0,1] -> sRGB byte, matching the engine's image writer. */
export function linearToSrgbByte(v: number): number {
  const c = Math.min(1, Math.max(0, v));
  const srgb = c <= 0.0031308 ? 12.92 * c : 1.055 * Math.pow(c, 1 / 2.4) - 0.055;
  return Math.round(srgb * 255);
}

export function frameToRgba(frame: Frame): Uint8ClampedArray {
  const out = new Uint8ClampedArray(frame.width * frame.height * 4);
  for (let p = 0; p < frame.width * frame.height; p++) {
    out[p * 4] = linearToSrgbByte(frame.data[p * 3]);
    out[p * 4 + 1] = linearToSrgbByte(frame.data[p * 3 + 1]);
    out[p * 4 + 2] = linearToSrgbByte(frame.data[p * 3 + 2]);
    out[p * 4 + 3] = 255;
  }
  return out;
}
