/** Parser for the engine's 32-byte splat records.
 *
 * Record layout (little-endian):
 *   position  3 x f32   (12 bytes)
 *   scale     3 x f32   (12 bytes, linear standard deviations)
 *   color     4 x u8    (rgb + alpha, each /255)
 *   rotation  4 x u8    (quaternion w,x,y,z as min(255, round(c*128 + 128)))
 */

export const RECORD_BYTES = 32;

export interface ViewerScene {
  count: number;
  positions: Float32Array; // (N*3)
  scales: Float32Array; // (N*3)
  colors: Float32Array; // (N*3) linear dc color in [0,1]
  alphas: Float32Array; // (N)
  /** Raw dequantized quaternion (b-128)/128, kept for byte-exact re-export. */
  rotationsRaw: Float32Array; // (N*4)
  /** Renormalized unit quaternion used for rendering. */
  rotations: Float32Array; // (N*4)
  /** Axis-aligned scene bounding box, [minx,miny,minz,maxx,maxy,maxz]. */
  bounds: Float32Array;
}

export function loadScene(bytes: ArrayBuffer | Uint8Array): ViewerScene {
  const buf = bytes instanceof Uint8Array
    ? bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.byteLength)
    : bytes;
  if (buf.byteLength % RECORD_BYTES !== 0) {
    throw new Error(
      `splat file length ${buf.byteLength} is not a multiple of ${RECORD_BYTES}`,
    );
  }
  const count = buf.byteLength / RECORD_BYTES;
  const view = new DataView(buf);
  const positions = new Float32Array(count * 3);
  const scales = new Float32Array(count * 3);
  const colors = new Float32Array(count * 3);
  const alphas = new Float32Array(count);
  const rotationsRaw = new Float32Array(count * 4);
  const rotations = new Float32Array(count * 4);
  const bounds = new Float32Array([Infinity, Infinity, Infinity, -Infinity, -Infinity, -Infinity]);

  for (let i = 0; i < count; i++) {
    const base = i * RECORD_BYTES;
    for (let k = 0; k < 3; k++) {
      const p = view.getFloat32(base + 4 * k, true);
      positions[i * 3 + k] = p;
      scales[i * 3 + k] = view.getFloat32(base + 12 + 4 * k, true);
      bounds[k] = Math.min(bounds[k], p);
      bounds[3 + k] = Math.max(bounds[3 + k], p);
    }
    for (let k = 0; k < 3; k++) {
      colors[i * 3 + k] = view.getUint8(base + 24 + k) / 255;
    }
    alphas[i] = view.getUint8(base + 27) / 255;
    let norm2 = 0;
    for (let k = 0; k < 4; k++) {
      const q = (view.getUint8(base + 28 + k) - 128) / 128;
      rotationsRaw[i * 4 + k] = q;
      norm2 += q * q;
    }
    const norm = Math.sqrt(norm2);
    if (norm < 1e-6) {
      console.warn(`splat ${i}: zero-norm quantized rotation, using identity`);
      rotations[i * 4] = 1;
      rotations[i * 4 + 1] = rotations[i * 4 + 2] = rotations[i * 4 + 3] = 0;
    } else {
      for (let k = 0; k < 4; k++) {
        rotations[i * 4 + k] = rotationsRaw[i * 4 + k] / norm;
      }
    }
  }
  if (count === 0) {
    bounds.fill(0);
  }
  return { count, positions, scales, colors, alphas, rotationsRaw, rotations, bounds };
}

/** Inverse of loadScene; quantization is idempotent so
 * exportScene(loadScene(bytes)) reproduces the input exactly. */
export function exportScene(scene: ViewerScene): Uint8Array {
  const out = new Uint8Array(scene.count * RECORD_BYTES);
  const view = new DataView(out.buffer);
  for (let i = 0; i < scene.count; i++) {
    const base = i * RECORD_BYTES;
    for (let k = 0; k < 3; k++) {
      view.setFloat32(base + 4 * k, scene.positions[i * 3 + k], true);
      view.setFloat32(base + 12 + 4 * k, scene.scales[i * 3 + k], true);
    }
    for (let k = 0; k < 3; k++) {
      view.setUint8(base + 24 + k, Math.round(scene.colors[i * 3 + k] * 255));
    }
    view.setUint8(base + 27, Math.round(scene.alphas[i] * 255));
    for (let k = 0; k < 4; k++) {
      const b = Math.min(255, Math.round(scene.rotationsRaw[i * 4 + k] * 128 + 128));
      view.setUint8(base + 28 + k, Math.max(0, b));
    }
  }
  return out;
}

export function sceneExtent(scene: ViewerScene): number {
  if (scene.count === 0) return 1;
  const dx = scene.bounds[3] - scene.bounds[0];
  const dy = scene.bounds[4] - scene.bounds[1];
  const dz = scene.bounds[5] - scene.bounds[2];
  return Math.max(Math.hypot(dx, dy, dz), 1e-6);
}
