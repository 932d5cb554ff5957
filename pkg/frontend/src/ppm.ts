import { readFileSync } from "fs";

export interface Image {
  width: number;
  height: number;
  /** row-major RGB intensities in [0, 1] */
  data: Float64Array;
}

/** Read a binary (P6, maxval 255) PPM file. */
export function readPpm(path: string): Image {
  const raw = readFileSync(path);
  if (raw[0] !== 0x50 || raw[1] !== 0x36) {
    throw new Error(`${path}: not a binary PPM (P6) file`);
  }
  const tokens: string[] = [];
  let pos = 2;
  while (tokens.length < 3) {
    while (pos < raw.length && isSpace(raw[pos])) pos++;
    if (raw[pos] === 0x23) {
      while (pos < raw.length && raw[pos] !== 0x0a) pos++;
      continue;
    }
    const start = pos;
    while (pos < raw.length && !isSpace(raw[pos])) pos++;
    tokens.push(raw.subarray(start, pos).toString("ascii"));
  }
  pos++;
  const [width, height, maxval] = tokens.map(Number);
  if (maxval !== 255) throw new Error(`${path}: only maxval 255 supported`);
  const n = width * height * 3;
  if (raw.length - pos < n) throw new Error(`${path}: truncated pixel payload`);
  const data = new Float64Array(n);
  for (let i = 0; i < n; i++) data[i] = raw[pos + i] / 255;
  return { width, height, data };
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
}

export function pixel(img: Image, x: number, y: number): [number, number, number] {
  const o = (y * img.width + x) * 3;
  return [img.data[o], img.data[o + 1], img.data[o + 2]];
}

/** Per-channel mean over all pixels. */
export function meanPixel(img: Image): [number, number, number] {
  let r = 0,
    g = 0,
    b = 0;
  for (let i = 0; i < img.data.length; i += 3) {
    r += img.data[i];
    g += img.data[i + 1];
    b += img.data[i + 2];
  }
  const n = img.data.length / 3;
  return [r / n, g / n, b / n];
}

/** Copy of the image with the pixels under a patch-grid mask set to a constant. */
export function maskPixels(
  img: Image,
  cellMask: boolean[],
  gridW: number,
  stride: number,
  fill: [number, number, number],
): Image {
  const data = Float64Array.from(img.data);
  for (let cell = 0; cell < cellMask.length; cell++) {
    if (!cellMask[cell]) continue;
    const cy = Math.floor(cell / gridW) * stride;
    const cx = (cell % gridW) * stride;
    for (let y = cy; y < Math.min(cy + stride, img.height); y++) {
      for (let x = cx; x < Math.min(cx + stride, img.width); x++) {
        const o = (y * img.width + x) * 3;
        data[o] = fill[0];
        data[o + 1] = fill[1];
        data[o + 2] = fill[2];
      }
    }
  }
  return { width: img.width, height: img.height, data };
}
