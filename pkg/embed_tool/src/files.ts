/** Dataset-directory file helpers: jsonl, meta.json, and the row-major
 * float32 little-endian matrix format. All writes go through a temp file
 * plus rename so a crash never leaves a half-written artifact. */

import { randomBytes } from "node:crypto";
import * as fs from "node:fs";
import * as path from "node:path";

export function atomicWrite(filePath: string, data: Buffer | string): void {
  const dir = path.dirname(filePath);
  const tmp = path.join(dir, `.${path.basename(filePath)}.${randomBytes(6).toString("hex")}.tmp`);
  fs.writeFileSync(tmp, data);
  fs.renameSync(tmp, filePath);
}

export function readJsonl(filePath: string): unknown[] {
  const rows: unknown[] = [];
  for (const line of fs.readFileSync(filePath, "utf8").split("\n")) {
    const trimmed = line.trim();
    if (trimmed.length > 0) rows.push(JSON.parse(trimmed));
  }
  return rows;
}

export interface DatasetMeta {
  num_nodes?: number;
  num_classes?: number;
  emb_dim?: number;
  class_names?: string[];
  directed?: boolean;
  encoder_name?: string;
  [key: string]: unknown;
}

export function readMeta(datasetDir: string): DatasetMeta {
  const metaPath = path.join(datasetDir, "meta.json");
  if (!fs.existsSync(metaPath)) return {};
  return JSON.parse(fs.readFileSync(metaPath, "utf8")) as DatasetMeta;
}

export function writeMeta(datasetDir: string, meta: DatasetMeta): void {
  atomicWrite(path.join(datasetDir, "meta.json"), JSON.stringify(meta, null, 2) + "\n");
}

/** Rows to a row-major little-endian float32 buffer. */
export function rowsToF32le(rows: Float32Array[]): Buffer {
  const dim = rows.length > 0 ? rows[0].length : 0;
  const out = Buffer.alloc(rows.length * dim * 4);
  rows.forEach((row, r) => {
    if (row.length !== dim) {
      throw new Error(`row ${r} has dimension ${row.length}, expected ${dim}`);
    }
    for (let j = 0; j < dim; j++) out.writeFloatLE(row[j], (r * dim + j) * 4);
  });
  return out;
}

export function f32leToRows(buf: Buffer, dim: number): Float32Array[] {
  if (buf.length % (dim * 4) !== 0) {
    throw new Error(`file of ${buf.length} bytes is not a whole number of ${dim}-float rows`);
  }
  const rows: Float32Array[] = [];
  for (let offset = 0; offset < buf.length; offset += dim * 4) {
    const row = new Float32Array(dim);
    for (let j = 0; j < dim; j++) row[j] = buf.readFloatLE(offset + j * 4);
    rows.push(row);
  }
  return rows;
}
