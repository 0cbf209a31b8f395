import { readFileSync, writeFileSync } from "node:fs";
import { join } from "node:path";
import { beforeAll, describe, expect, it } from "vitest";

import { cameraSpec, exportPose, handleInput, importPose, makeOrbitCamera } from "../src/orbit_camera.js";
import { frameToRgba, renderFrame } from "../src/renderer.js";
import { loadScene, RECORD_BYTES, ViewerScene } from "../src/splat_format.js";
import { loadPpm, psnr, runCli, tempDir } from "./helpers.js";

function singleSplatScene(): ViewerScene {
  const raw = new Uint8Array(RECORD_BYTES);
  const view = new DataView(raw.buffer);
  [0, 0, 0].forEach((v, k) => view.setFloat32(4 * k, v, true));
  [0.3, 0.3, 0.3].forEach((v, k) => view.setFloat32(12 + 4 * k, v, true));
  [255, 255, 255, 230].forEach((v, k) => view.setUint8(24 + k, v));
  [255, 128, 128, 128].forEach((v, k) => view.setUint8(28 + k, v));
  return loadScene(raw);
}

describe("renderFrame", () => {
  it("draws a single centered splat at the viewport center", () => {
    const scene = singleSplatScene();
    const cam = makeOrbitCamera(1.0, [0, 0, 0]);
    cam.distance = 4.0;
    const frame = renderFrame(scene, cameraSpec(cam, 33, 33));
    let best = -1;
    let bestIdx = -1;
    for (let p = 0; p < 33 * 33; p++) {
      if (frame.data[p * 3] > best) {
        best = frame.data[p * 3];
        bestIdx = p;
      }
    }
    expect(bestIdx % 33).toBe(16);
    expect(Math.floor(bestIdx / 33)).toBe(16);
    expect(best).toBeGreaterThan(0.5);
  });

  it("renders an empty scene as background", () => {
    const scene = loadScene(new ArrayBuffer(0));
    const frame = renderFrame(scene, cameraSpec(makeOrbitCamera(1, [0, 0, 0]), 8, 8), [0.25, 0.5, 0.75]);
    for (let p = 0; p < 64; p++) {
      expect(frame.data[p * 3]).toBeCloseTo(0.25, 12);
      expect(frame.data[p * 3 + 2]).toBeCloseTo(0.75, 12);
    }
  });

  it("returns a pixel-identical frame after a full azimuth turn", () => {
    const scene = singleSplatScene();
    let cam = makeOrbitCamera(1.0, [0, 0, 0]);
    cam = handleInput(cam, [{ kind: "drag", dx: 37, dy: 11, button: "primary" }]);
    const before = frameToRgba(renderFrame(scene, cameraSpec(cam, 32, 32)));
    // four quarter-turn drags: dx chosen so each adds exactly pi/2 radians
    const quarter = Math.PI / 2 / 0.008;
    let turned = cam;
    for (let i = 0; i < 4; i++) {
      turned = handleInput(turned, [{ kind: "drag", dx: quarter, dy: 0, button: "primary" }]);
    }
    const after = frameToRgba(renderFrame(scene, cameraSpec(turned, 32, 32)));
    expect(Buffer.from(after)).toEqual(Buffer.from(before));
  });
});

describe("viewer vs engine golden comparison", () => {
  let dir: string;

  beforeAll(() => {
    dir = tempDir();
    runCli([
      "generate-synthetic", "--seed", "7", "--count", "20", "--cameras", "8",
      "--width", "64", "--height", "64", "--out", join(dir, "ds"),
    ]);
    runCli([
      "export-splat", "--ckpt", join(dir, "ds", "gt.gsplat"),
      "--out", join(dir, "scene.splat"),
    ]);
  });

  it("reaches 25 dB PSNR against the CLI tiled render at 3 poses", () => {
    const scene = loadScene(new Uint8Array(readFileSync(join(dir, "scene.splat"))));
    for (const poseIndex of [0, 3, 6]) {
      runCli([
        "render", "--ckpt", join(dir, "ds", "gt.gsplat"), "--data", join(dir, "ds"),
        "--pose-index", String(poseIndex), "--out", join(dir, `ref${poseIndex}.ppm`),
        "--engine", "tiled",
      ]);
      const ref = loadPpm(join(dir, `ref${poseIndex}.ppm`));
      const manifest = JSON.parse(readFileSync(join(dir, "ds", "manifest.json"), "utf-8"));
      const frameMeta = manifest.frames[poseIndex];
      const spec = importPose(JSON.stringify(frameMeta));
      const frame = renderFrame(scene, spec);
      const quality = psnr(frame.data, ref.data);
      expect(frame.width).toBe(ref.width);
      expect(quality).toBeGreaterThanOrEqual(25);
    }
  });

  it("reproduces an exported pose via the CLI pose-file path", () => {
    // Viewer-exported pose -> CLI render -> compare to the viewer's own frame.
    const scene = loadScene(new Uint8Array(readFileSync(join(dir, "scene.splat"))));
    let cam = makeOrbitCamera(2.0, [0, 0, 0]);
    cam.distance = 4.0;
    cam = handleInput(cam, [{ kind: "drag", dx: 90, dy: -40, button: "primary" }]);
    const spec = cameraSpec(cam, 64, 64);
    const posePath = join(dir, "viewer_pose.json");
    writeFileSync(posePath, exportPose(spec));
    runCli([
      "render", "--ckpt", join(dir, "ds", "gt.gsplat"), "--pose-file", posePath,
      "--out", join(dir, "from_pose.ppm"), "--engine", "tiled",
    ]);
    const ref = loadPpm(join(dir, "from_pose.ppm"));
    const frame = renderFrame(scene, spec);
    expect(psnr(frame.data, ref.data)).toBeGreaterThanOrEqual(25);
  });
});
