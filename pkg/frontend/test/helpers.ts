/** Shared test utilities: run the engine CLI, decode its PPM output, PSNR. */

import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

const PYTHON = process.env.PYTHON ?? "python3";

export function runCli(args: string[], cwd?: string): string {
  return execFileSync(PYTHON, ["-m", "tinysplat.cli", ...args], {
    cwd,
    encoding: "utf-8",
  });
}

export function tempDir(prefix = "viewer-test-"): string {
  return mkdtempSync(join(tmpdir(), prefix));
}

function srgbToLinear(c: number): number {
  return c <= 0.04045 ? c / 12.92 : Math.pow((c + 0.055) / 1.055, 2.4);
}

export interface Image {
  width: number;
  height: number;
  data: Float64Array; // linear RGB
}

/** Minimal binary-P6 reader matching the engine's canonical writer. */
export function loadPpm(path: string): Image {
  const raw = readFileSync(path);
  const text = raw.subarray(0, 64).toString("latin1");
  const match = /^P6\s+(\d+)\s+(\d+)\s+255\s/.exec(text);
  if (!match) throw new Error(`${path}: unsupported PPM header`);
  const width = parseInt(match[1], 10);
  const height = parseInt(match[2], 10);
  const offset = match[0].length;
  const data = new Float64Array(width * height * 3);
  for (let i = 0; i < width * height * 3; i++) {
    data[i] = srgbToLinear(raw[offset + i] / 255);
  }
  return { width, height, data };
}

export function psnr(a: ArrayLike<number>, b: ArrayLike<number>): number {
  let acc = 0;
  for (let i = 0; i < a.length; i++) {
    const d = a[i] - b[i];
    acc += d * d;
  }
  const mse = acc / a.length;
  if (mse < 1e-10) return 99;
  return Math.min(10 * Math.log10(1 / mse), 99);
}
