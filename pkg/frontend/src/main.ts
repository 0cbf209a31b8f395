/** Browser entry point: canvas, input wiring, file loading, pose export.
 *
 * The heavy lifting (parsing, camera math, compositing) lives in the DOM-free
 * modules so it can be tested headlessly; this file only translates events
 * and blits frames.
 */

import { cameraSpec, exportPose, handleInput, InputEvent, makeOrbitCamera, OrbitCamera, viewDirection } from "./orbit_camera.js";
import { frameToRgba, renderFrame } from "./renderer.js";
import { loadScene, sceneExtent, ViewerScene } from "./splat_format.js";

const RESORT_ANGLE = (1 * Math.PI) / 180; // re-sort after 1 degree of motion

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const status = document.getElementById("status")!;
const fileInput = document.getElementById("file") as HTMLInputElement;
const poseButton = document.getElementById("export-pose") as HTMLButtonElement;

let scene: ViewerScene | null = null;
let camera: OrbitCamera | null = null;
let pending: InputEvent[] = [];
let lastDir: [number, number, number] | null = null;
let dirty = true;

function setScene(bytes: ArrayBuffer, name: string) {
  try {
    scene = loadScene(bytes);
  } catch (err) {
    status.textContent = `failed to load ${name}: ${err}`;
    return;
  }
  const b = scene.bounds;
  camera = makeOrbitCamera(sceneExtent(scene), [
    (b[0] + b[3]) / 2,
    (b[1] + b[4]) / 2,
    (b[2] + b[5]) / 2,
  ]);
  status.textContent = `${name}: ${scene.count} splats`;
  dirty = true;
}

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (file) setScene(await file.arrayBuffer(), file.name);
});

canvas.addEventListener("dragover", (ev) => ev.preventDefault());
canvas.addEventListener("drop", async (ev) => {
  ev.preventDefault();
  const file = ev.dataTransfer?.files?.[0];
  if (file) setScene(await file.arrayBuffer(), file.name);
});

let dragging: "primary" | "secondary" | null = null;
let lastX = 0;
let lastY = 0;
canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());
canvas.addEventListener("pointerdown", (ev) => {
  dragging = ev.button === 2 ? "secondary" : "primary";
  lastX = ev.clientX;
  lastY = ev.clientY;
  canvas.setPointerCapture(ev.pointerId);
});
canvas.addEventListener("pointerup", () => (dragging = null));
canvas.addEventListener("pointermove", (ev) => {
  if (!dragging) return;
  pending.push({ kind: "drag", dx: ev.clientX - lastX, dy: ev.clientY - lastY, button: dragging });
  lastX = ev.clientX;
  lastY = ev.clientY;
});
canvas.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  pending.push({ kind: "wheel", delta: ev.deltaY });
});

poseButton.addEventListener("click", () => {
  if (!camera) return;
  const spec = cameraSpec(camera, canvas.width, canvas.height);
  const blob = new Blob([exportPose(spec)], { type: "application/json" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "pose.json";
  a.click();
  URL.revokeObjectURL(a.href);
});

let lastStamp = performance.now();
function tick(stamp: number) {
  requestAnimationFrame(tick);
  if (!scene || !camera) return;
  if (pending.length) {
    camera = handleInput(camera, pending);
    pending = [];
    dirty = true;
  }
  if (!dirty) return;
  const spec = cameraSpec(camera, canvas.width, canvas.height);
  const dir = viewDirection(spec);
  // The painter's order is refreshed whenever the view direction moved past
  // the threshold; renderFrame sorts internally, so "refresh" here means we
  // only redraw (and thus re-sort) on sufficient motion or explicit dirt.
  if (lastDir) {
    const dot = dir[0] * lastDir[0] + dir[1] * lastDir[1] + dir[2] * lastDir[2];
    if (Math.acos(Math.min(1, Math.max(-1, dot))) < RESORT_ANGLE && !dirty) return;
  }
  lastDir = dir;
  const frame = renderFrame(scene, spec, [0, 0, 0]);
  const img = ctx.createImageData(frame.width, frame.height);
  img.data.set(frameToRgba(frame));
  ctx.putImageData(img, 0, 0);
  const ms = stamp - lastStamp;
  lastStamp = stamp;
  status.textContent = `${scene.count} splats | frame ${ms.toFixed(1)} ms`;
  dirty = false;
}
requestAnimationFrame(tick);
