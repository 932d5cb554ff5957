import { readFileSync, writeFileSync } from "fs";

/** AMAP container: magic "AMAP", u16 version, u32 count, then per entry
 * {u32 category_id, u32 h_f, u32 w_f, row-major little-endian f32}. */

export interface AmapEntry {
  categoryId: number;
  hF: number;
  wF: number;
  values: Float64Array;
}

const AMAP_VERSION = 1;
const CEMB_VERSION = 1;

export function writeAmap(path: string, entries: AmapEntry[]): void {
  let payload = 0;
  for (const e of entries) payload += 12 + 4 * e.hF * e.wF;
  const buf = Buffer.alloc(4 + 2 + 4 + payload);
  buf.write("AMAP", 0, "ascii");
  buf.writeUInt16LE(AMAP_VERSION, 4);
  buf.writeUInt32LE(entries.length, 6);
  let pos = 10;
  for (const e of entries) {
    if (e.values.length !== e.hF * e.wF) throw new Error("grid size mismatch");
    buf.writeUInt32LE(e.categoryId, pos);
    buf.writeUInt32LE(e.hF, pos + 4);
    buf.writeUInt32LE(e.wF, pos + 8);
    pos += 12;
    for (const v of e.values) {
      if (!Number.isFinite(v) || v < 0) throw new Error("activation values must be finite and non-negative");
      buf.writeFloatLE(v, pos);
      pos += 4;
    }
  }
  writeFileSync(path, buf);
}

export function readAmap(path: string): AmapEntry[] {
  const buf = readFileSync(path);
  if (buf.subarray(0, 4).toString("ascii") !== "AMAP") throw new Error(`${path}: bad magic`);
  if (buf.readUInt16LE(4) !== AMAP_VERSION) throw new Error(`${path}: unsupported version`);
  const count = buf.readUInt32LE(6);
  let pos = 10;
  const out: AmapEntry[] = [];
  for (let i = 0; i < count; i++) {
    const categoryId = buf.readUInt32LE(pos);
    const hF = buf.readUInt32LE(pos + 4);
    const wF = buf.readUInt32LE(pos + 8);
    pos += 12;
    const values = new Float64Array(hF * wF);
    for (let j = 0; j < values.length; j++) {
      values[j] = buf.readFloatLE(pos);
      pos += 4;
    }
    out.push({ categoryId, hF, wF, values });
  }
  if (pos !== buf.length) throw new Error(`${path}: trailing bytes`);
  return out;
}

/** CEMB container: same envelope with per entry {u32 category_id, u32 d, f32 vector}. */

export interface CembEntry {
  categoryId: number;
  vector: Float64Array;
}

export function writeCemb(path: string, entries: CembEntry[]): void {
  let payload = 0;
  for (const e of entries) payload += 8 + 4 * e.vector.length;
  const buf = Buffer.alloc(4 + 2 + 4 + payload);
  buf.write("CEMB", 0, "ascii");
  buf.writeUInt16LE(CEMB_VERSION, 4);
  buf.writeUInt32LE(entries.length, 6);
  let pos = 10;
  for (const e of entries) {
    buf.writeUInt32LE(e.categoryId, pos);
    buf.writeUInt32LE(e.vector.length, pos + 4);
    pos += 8;
    for (const v of e.vector) {
      buf.writeFloatLE(v, pos);
      pos += 4;
    }
  }
  writeFileSync(path, buf);
}

export function readCemb(path: string): CembEntry[] {
  const buf = readFileSync(path);
  if (buf.subarray(0, 4).toString("ascii") !== "CEMB") throw new Error(`${path}: bad magic`);
  if (buf.readUInt16LE(4) !== CEMB_VERSION) throw new Error(`${path}: unsupported version`);
  const count = buf.readUInt32LE(6);
  let pos = 10;
  const out: CembEntry[] = [];
  for (let i = 0; i < count; i++) {
    const categoryId = buf.readUInt32LE(pos);
    const d = buf.readUInt32LE(pos + 4);
    pos += 8;
    const vector = new Float64Array(d);
    for (let j = 0; j < d; j++) {
      vector[j] = buf.readFloatLE(pos);
      pos += 4;
    }
    out.push({ categoryId, vector });
  }
  return out;
}
