/** Minimal PFM reader (little- or big-endian, color or grayscale). */

import { readFileSync } from "node:fs";

export interface PfmImage {
  width: number;
  height: number;
  channels: number;
  /** top-down row-major, channel-interleaved */
  data: Float32Array;
}

export function readPfm(path: string): PfmImage {
  const raw = readFileSync(path);
  let pos = 0;
  const readLine = (): string => {
    const nl = raw.indexOf(0x0a, pos);
    if (nl < 0) throw new Error("pfm: truncated header");
    const line = raw.subarray(pos, nl).toString("ascii").trim();
    pos = nl + 1;
    return line;
  };
  const kind = readLine();
  if (kind !== "PF" && kind !== "Pf") throw new Error(`pfm: bad magic ${kind}`);
  const channels = kind === "PF" ? 3 : 1;
  const [w, h] = readLine().split(/\s+/).map(Number);
  const scale = Number(readLine());
  const little = scale < 0;
  const count = w * h * channels;
  if (raw.length < pos + count * 4) throw new Error("pfm: truncated payload");
  const data = new Float32Array(count);
  // scanlines are stored bottom-up; flip while reading
  for (let y = 0; y < h; y++) {
    const srcRow = h - 1 - y;
    for (let x = 0; x < w * channels; x++) {
      const off = pos + (srcRow * w * channels + x) * 4;
      data[y * w * channels + x] = little ? raw.readFloatLE(off) : raw.readFloatBE(off);
    }
  }
  return { width: w, height: h, channels, data };
}

/** (H, W, C) interleaved image to channel-first latent layout (C, H, W). */
export function imageToLatent(img: PfmImage): { data: Float32Array; dims: number[] } {
  const { width: w, height: h, channels: c } = img;
  const out = new Float32Array(c * h * w);
  for (let ch = 0; ch < c; ch++) {
    for (let y = 0; y < h; y++) {
      for (let x = 0; x < w; x++) {
        out[ch * h * w + y * w + x] = img.data[(y * w + x) * c + ch];
      }
    }
  }
  return { data: out, dims: [c, h, w] };
}
