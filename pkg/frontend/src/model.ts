import { readFileSync } from "fs";
import { z } from "zod";
import { Image, maskPixels, meanPixel } from "./ppm.js";

/** Checkpoint weights for the bundled vision-language encoder.
 *
 * The adapter is written against this checkpoint contract; any file that
 * validates against the schema loads. Weights live in plain JSON (the
 * ecosystem-native format for small js models). */

const matrix = z.array(z.array(z.number()));

const checkpointSchema = z.object({
  version: z.literal(1),
  d: z.number().int().positive(),
  stride: z.number().int().positive(),
  featureDim: z.number().int().positive(),
  contextMix: z.number(),
  tokenSalt: z.string(),
  imgProj: matrix,
  simW: z.array(z.number()),
  simB: z.number(),
  layers: z.array(z.object({ wq: matrix, wk: matrix, wv: matrix })).min(1),
});

export type Checkpoint = z.infer<typeof checkpointSchema>;

export function loadCheckpoint(path: string): Checkpoint {
  let raw: string;
  try {
    raw = readFileSync(path, "utf-8");
  } catch (e) {
    throw new Error(`checkpoint load failure: ${path}: ${(e as Error).message}`);
  }
  const parsed = checkpointSchema.safeParse(JSON.parse(raw));
  if (!parsed.success) {
    throw new Error(`checkpoint load failure: ${path}: ${parsed.error.issues[0]?.message}`);
  }
  const ckpt = parsed.data;
  for (const layer of ckpt.layers) {
    for (const m of [layer.wq, layer.wk, layer.wv]) {
      if (m.length !== ckpt.d || m.some((row) => row.length !== ckpt.d)) {
        throw new Error(`checkpoint load failure: ${path}: layer matrices must be d x d`);
      }
    }
  }
  if (ckpt.imgProj.length !== ckpt.featureDim || ckpt.simW.length !== ckpt.d) {
    throw new Error(`checkpoint load failure: ${path}: projection shapes inconsistent`);
  }
  return ckpt;
}

// deterministic PRNG (splitmix-style) + FNV-1a string hashing

function fnv1a(text: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h >>> 0;
}

export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function gaussian(rand: () => number): number {
  const u = Math.max(rand(), 1e-12);
  const v = rand();
  return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
}

export function tokenize(caption: string): string[] {
  return caption
    .toLowerCase()
    .split(/[^a-z0-9]+/)
    .filter((t) => t.length > 0);
}

/** Deterministic unit-norm embedding for a token under the checkpoint salt. */
export function tokenEmbedding(ckpt: Checkpoint, token: string): Float64Array {
  const rand = mulberry32(fnv1a(`${ckpt.tokenSalt}:${token}`));
  const v = new Float64Array(ckpt.d);
  let norm = 0;
  for (let i = 0; i < ckpt.d; i++) {
    v[i] = gaussian(rand);
    norm += v[i] * v[i];
  }
  norm = Math.sqrt(norm) || 1;
  for (let i = 0; i < ckpt.d; i++) v[i] /= norm;
  return v;
}

/** Query vector for the object token, lightly mixed with caption context. */
export function objectQuery(ckpt: Checkpoint, tokens: string[], objectIndex: number): Float64Array {
  if (objectIndex < 0 || objectIndex >= tokens.length) {
    throw new Error(`object index ${objectIndex} outside caption of ${tokens.length} tokens`);
  }
  const q = Float64Array.from(tokenEmbedding(ckpt, tokens[objectIndex]));
  const others = tokens.filter((_, i) => i !== objectIndex);
  if (others.length > 0 && ckpt.contextMix !== 0) {
    const ctx = new Float64Array(ckpt.d);
    for (const t of others) {
      const e = tokenEmbedding(ckpt, t);
      for (let i = 0; i < ckpt.d; i++) ctx[i] += e[i] / others.length;
    }
    for (let i = 0; i < ckpt.d; i++) q[i] += ckpt.contextMix * ctx[i];
  }
  let norm = 0;
  for (let i = 0; i < ckpt.d; i++) norm += q[i] * q[i];
  norm = Math.sqrt(norm) || 1;
  for (let i = 0; i < ckpt.d; i++) q[i] /= norm;
  return q;
}

export interface FeatureGrid {
  hF: number;
  wF: number;
  /** N_R x d region embeddings, row-major */
  rows: Float64Array[];
}

/** Patch descriptors (color stats + gradient energy) projected to d dims. */
export function patchFeatures(ckpt: Checkpoint, img: Image): FeatureGrid {
  const s = ckpt.stride;
  const hF = Math.floor(img.height / s);
  const wF = Math.floor(img.width / s);
  const rows: Float64Array[] = [];
  for (let cy = 0; cy < hF; cy++) {
    for (let cx = 0; cx < wF; cx++) {
      const feat = new Float64Array(ckpt.featureDim);
      const sums = [0, 0, 0];
      const sq = [0, 0, 0];
      let grad = 0;
      let n = 0;
      for (let y = cy * s; y < (cy + 1) * s; y++) {
        for (let x = cx * s; x < (cx + 1) * s; x++) {
          const o = (y * img.width + x) * 3;
          for (let c = 0; c < 3; c++) {
            sums[c] += img.data[o + c];
            sq[c] += img.data[o + c] * img.data[o + c];
          }
          if (x + 1 < img.width) grad += Math.abs(img.data[o] - img.data[o + 3]);
          if (y + 1 < img.height) grad += Math.abs(img.data[o] - img.data[o + img.width * 3]);
          n++;
        }
      }
      for (let c = 0; c < 3; c++) {
        feat[c] = sums[c] / n;
        feat[3 + c] = Math.sqrt(Math.max(sq[c] / n - feat[c] * feat[c], 0));
      }
      feat[6] = grad / n;
      if (ckpt.featureDim > 7) feat[7] = 1.0;
      const row = new Float64Array(ckpt.d);
      for (let j = 0; j < ckpt.d; j++) {
        let acc = 0;
        for (let f = 0; f < ckpt.featureDim; f++) acc += feat[f] * ckpt.imgProj[f][j];
        row[j] = acc;
      }
      rows.push(row);
    }
  }
  return { hF, wF, rows };
}

function matVec(m: number[][], v: Float64Array): Float64Array {
  // v (d,) times matrix (d x d): out_j = sum_i v_i m[i][j]
  const d = v.length;
  const out = new Float64Array(d);
  for (let i = 0; i < d; i++) {
    const vi = v[i];
    if (vi === 0) continue;
    const row = m[i];
    for (let j = 0; j < d; j++) out[j] += vi * row[j];
  }
  return out;
}

function softmax(z: Float64Array): Float64Array {
  let peak = -Infinity;
  for (const v of z) peak = Math.max(peak, v);
  const out = new Float64Array(z.length);
  let total = 0;
  for (let i = 0; i < z.length; i++) {
    out[i] = Math.exp(z[i] - peak);
    total += out[i];
  }
  for (let i = 0; i < z.length; i++) out[i] /= total;
  return out;
}

export interface Trace {
  attention: Float64Array[];
  hidden: Float64Array[];
  similarity: number;
}

/** Single-query cross-attention stack + linear similarity head. */
export function forward(ckpt: Checkpoint, grid: FeatureGrid, query: Float64Array): Trace {
  const scale = Math.sqrt(ckpt.d);
  let h = query;
  const attention: Float64Array[] = [];
  const hidden: Float64Array[] = [];
  for (const layer of ckpt.layers) {
    const q = matVec(layer.wq, h);
    const logits = new Float64Array(grid.rows.length);
    const values: Float64Array[] = [];
    for (let r = 0; r < grid.rows.length; r++) {
      const key = matVec(layer.wk, grid.rows[r]);
      let dot = 0;
      for (let j = 0; j < ckpt.d; j++) dot += q[j] * key[j];
      logits[r] = dot / scale;
      values.push(matVec(layer.wv, grid.rows[r]));
    }
    const x = softmax(logits);
    const newH = new Float64Array(ckpt.d);
    for (let r = 0; r < grid.rows.length; r++) {
      for (let j = 0; j < ckpt.d; j++) newH[j] += x[r] * values[r][j];
    }
    attention.push(x);
    hidden.push(newH);
    h = newH;
  }
  let s = ckpt.simB;
  for (let j = 0; j < ckpt.d; j++) s += ckpt.simW[j] * h[j];
  return { attention, hidden, similarity: s };
}

/** Activation map: attention row at `layer` (1-based) weighted by the
 * clamped analytic gradient of the similarity score. */
export function gradcam(ckpt: Checkpoint, grid: FeatureGrid, query: Float64Array, layer: number): Float64Array {
  if (layer < 1 || layer > ckpt.layers.length) {
    throw new Error(`layer ${layer} out of range 1..${ckpt.layers.length}`);
  }
  const trace = forward(ckpt, grid, query);
  const scale = Math.sqrt(ckpt.d);
  let gH = Float64Array.from(ckpt.simW);
  for (let n = ckpt.layers.length - 1; n >= layer; n--) {
    const { wq, wk, wv } = ckpt.layers[n];
    const x = trace.attention[n];
    const dx = new Float64Array(x.length);
    for (let r = 0; r < x.length; r++) {
      const val = matVec(wv, grid.rows[r]);
      let acc = 0;
      for (let j = 0; j < ckpt.d; j++) acc += val[j] * gH[j];
      dx[r] = acc;
    }
    let inner = 0;
    for (let r = 0; r < x.length; r++) inner += dx[r] * x[r];
    const dq = new Float64Array(ckpt.d);
    for (let r = 0; r < x.length; r++) {
      const dz = x[r] * (dx[r] - inner);
      if (dz === 0) continue;
      const key = matVec(wk, grid.rows[r]);
      for (let j = 0; j < ckpt.d; j++) dq[j] += (dz * key[j]) / scale;
    }
    // dS/dh_{n-1} = Wq dq
    const next = new Float64Array(ckpt.d);
    for (let i = 0; i < ckpt.d; i++) {
      let acc = 0;
      for (let j = 0; j < ckpt.d; j++) acc += wq[i][j] * dq[j];
      next[i] = acc;
    }
    gH = next;
  }
  const xM = trace.attention[layer - 1];
  const out = new Float64Array(xM.length);
  for (let r = 0; r < xM.length; r++) {
    const val = matVec(ckpt.layers[layer - 1].wv, grid.rows[r]);
    let grad = 0;
    for (let j = 0; j < ckpt.d; j++) grad += val[j] * gH[j];
    out[r] = xM[r] * Math.max(grad, 0);
  }
  return out;
}

/** Activation evidence for one object under internal masking iterations.
 *
 * Iteration 0 uses the raw image; each further iteration replaces the
 * cells of the max-normalized, 0.5-thresholded map with the image mean and
 * re-runs the encoder; the exported grid is the elementwise max of the
 * normalized per-iteration maps. */
export function activationEvidence(
  ckpt: Checkpoint,
  img: Image,
  tokens: string[],
  objectIndex: number,
  layer: number,
  iterations: number,
): { hF: number; wF: number; values: Float64Array } {
  const query = objectQuery(ckpt, tokens, objectIndex);
  const fill = meanPixel(img);
  let current = img;
  let soft: Float64Array | null = null;
  let maskedCells: boolean[] | null = null;
  let dims = { hF: 0, wF: 0 };
  for (let it = 0; it <= iterations; it++) {
    const grid = patchFeatures(ckpt, current);
    dims = { hF: grid.hF, wF: grid.wF };
    const phi = gradcam(ckpt, grid, query, layer);
    let peak = 0;
    for (const v of phi) peak = Math.max(peak, v);
    const normalized = new Float64Array(phi.length);
    if (peak > 0) for (let i = 0; i < phi.length; i++) normalized[i] = phi[i] / peak;
    if (soft === null) {
      soft = normalized;
      maskedCells = new Array(phi.length).fill(false);
    } else {
      for (let i = 0; i < phi.length; i++) soft[i] = Math.max(soft[i], normalized[i]);
    }
    if (it < iterations) {
      for (let i = 0; i < phi.length; i++) {
        if (peak > 0 && normalized[i] >= 0.5) maskedCells![i] = true;
      }
      current = maskPixels(img, maskedCells!, dims.wF, ckpt.stride, fill);
    }
  }
  return { hF: dims.hF, wF: dims.wF, values: soft! };
}

export function makeCheckpoint(seed: number, d = 16, stride = 16, layers = 2): Checkpoint {
  const rand = mulberry32(seed >>> 0);
  const eyeish = () =>
    Array.from({ length: d }, (_, i) =>
      Array.from({ length: d }, (_, j) => (i === j ? 1.0 : 0) + 0.15 * gaussian(rand)),
    );
  const featureDim = 8;
  // the constant feature row and the similarity head share a positive
  // direction, so every region keeps a positive clamped gradient baseline
  // (otherwise half the seeds would zero out the whole activation map)
  const imgProj = Array.from({ length: featureDim }, () =>
    Array.from({ length: d }, () => 1.2 * gaussian(rand)),
  );
  imgProj[featureDim - 1] = Array.from({ length: d }, (_, j) => (j === 0 ? 2.0 : 0.2 * gaussian(rand)));
  const simW = Array.from({ length: d }, (_, j) => (j === 0 ? 1.0 : 0.2 * gaussian(rand)));
  return {
    version: 1,
    d,
    stride,
    featureDim,
    contextMix: 0.3,
    tokenSalt: `vlm-${seed}`,
    imgProj,
    simW,
    simB: 0,
    layers: Array.from({ length: layers }, () => ({ wq: eyeish(), wk: eyeish(), wv: eyeish() })),
  };
}
