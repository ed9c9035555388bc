/**
 * The two conversion jobs.
 *
 * embedNodes: nodes.jsonl -> embeddings.f32le, one row per node in id order;
 * meta.json gets emb_dim and encoder_name set (or verified when present).
 *
 * embedRationales: rationales_pending.jsonl -> rationale_embeddings.f32le +
 * index.json mapping node_id to row index. Re-runs are no-ops for ids that
 * already have rows; new pendings append without touching existing bytes.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { Encoder, EncoderLoadFailure, getEncoder, HashedEncoder } from "./encoder.js";
import {
  atomicWrite,
  f32leToRows,
  readJsonl,
  readMeta,
  rowsToF32le,
  writeMeta,
} from "./files.js";

export class MissingText extends Error {}

export interface EmbedJob {
  datasetDir: string;
  encoderName?: string;      // defaults to meta's encoder, else hashed-v1-<dim>
  dim?: number;              // defaults to meta's emb_dim, else 256
  batchSize?: number;
  normalize?: boolean;
}

interface NodeRow {
  id: number;
  label: number | null;
  text: string | null;
}

interface PendingRow {
  node_id: number;
  rationale_text: string;
}

function resolveEncoder(job: EmbedJob, metaDim?: number, metaEncoder?: string): Encoder {
  const dim = job.dim ?? metaDim ?? 256;
  if (metaDim !== undefined && job.dim !== undefined && job.dim !== metaDim) {
    throw new EncoderLoadFailure(
      `requested dimension ${job.dim} conflicts with meta.json emb_dim ${metaDim}`,
    );
  }
  const name = job.encoderName ?? metaEncoder;
  if (metaEncoder !== undefined && job.encoderName !== undefined && job.encoderName !== metaEncoder) {
    throw new EncoderLoadFailure(
      `dataset was embedded with "${metaEncoder}"; refusing to mix in "${job.encoderName}"`,
    );
  }
  if (name === undefined) return new HashedEncoder(dim, job.normalize ?? true);
  return getEncoder(name, dim, job.normalize ?? true);
}

export interface EmbedResult {
  rows: number;
  dim: number;
  encoderName: string;
  outputPath: string;
}

export function embedNodes(job: EmbedJob): EmbedResult {
  const nodesPath = path.join(job.datasetDir, "nodes.jsonl");
  if (!fs.existsSync(nodesPath)) {
    throw new Error(`${nodesPath} not found`);
  }
  const meta = readMeta(job.datasetDir);
  const encoder = resolveEncoder(job, meta.emb_dim, meta.encoder_name);

  const nodes = readJsonl(nodesPath) as NodeRow[];
  const texts: string[] = [];
  nodes.forEach((node, line) => {
    if (node.id !== line) {
      throw new Error(`nodes.jsonl line ${line} has id ${node.id}; rows must be in id order`);
    }
    if (node.text === null || node.text === undefined || node.text === "") {
      throw new MissingText(`node ${node.id} has no text`);
    }
    texts.push(node.text);
  });

  const batch = job.batchSize ?? 64;
  const rows: Float32Array[] = [];
  for (let start = 0; start < texts.length; start += batch) {
    rows.push(...encoder.encodeBatch(texts.slice(start, start + batch)));
  }
  for (const row of rows) {
    for (const v of row) {
      if (!Number.isFinite(v)) throw new Error("encoder produced a non-finite value");
    }
  }

  const outputPath = path.join(job.datasetDir, "embeddings.f32le");
  atomicWrite(outputPath, rowsToF32le(rows));
  writeMeta(job.datasetDir, {
    ...meta,
    num_nodes: meta.num_nodes ?? nodes.length,
    emb_dim: encoder.dim,
    encoder_name: encoder.name,
  });
  return { rows: rows.length, dim: encoder.dim, encoderName: encoder.name, outputPath };
}

export function embedRationales(job: EmbedJob): EmbedResult {
  const pendingPath = path.join(job.datasetDir, "rationales_pending.jsonl");
  if (!fs.existsSync(pendingPath)) {
    throw new Error(`${pendingPath} not found`);
  }
  const meta = readMeta(job.datasetDir);
  const encoder = resolveEncoder(job, meta.emb_dim, meta.encoder_name);

  const outputPath = path.join(job.datasetDir, "rationale_embeddings.f32le");
  const indexPath = path.join(job.datasetDir, "index.json");
  const index: Record<string, number> = fs.existsSync(indexPath)
    ? (JSON.parse(fs.readFileSync(indexPath, "utf8")) as Record<string, number>)
    : {};
  const existing = fs.existsSync(outputPath) ? fs.readFileSync(outputPath) : Buffer.alloc(0);
  if (existing.length !== Object.keys(index).length * encoder.dim * 4) {
    throw new Error(
      `rationale_embeddings.f32le (${existing.length} bytes) does not match ` +
      `index.json (${Object.keys(index).length} rows of dim ${encoder.dim})`,
    );
  }

  const pending = readJsonl(pendingPath) as PendingRow[];
  const fresh: PendingRow[] = [];
  const seen = new Set<number>();
  for (const row of pending) {
    if (row.rationale_text === null || row.rationale_text === undefined || row.rationale_text === "") {
      throw new MissingText(`pending rationale for node ${row.node_id} has no text`);
    }
    if (String(row.node_id) in index || seen.has(row.node_id)) continue;
    seen.add(row.node_id);
    fresh.push(row);
  }

  if (fresh.length > 0) {
    const newRows = encoder.encodeBatch(fresh.map((r) => r.rationale_text));
    const nextIndex = { ...index };
    let rowIdx = Object.keys(index).length;
    for (const row of fresh) nextIndex[String(row.node_id)] = rowIdx++;
    atomicWrite(outputPath, Buffer.concat([existing, rowsToF32le(newRows)]));
    atomicWrite(indexPath, JSON.stringify(nextIndex, null, 2) + "\n");
  } else if (!fs.existsSync(outputPath)) {
    atomicWrite(outputPath, Buffer.alloc(0));
    atomicWrite(indexPath, JSON.stringify(index, null, 2) + "\n");
  }

  writeMeta(job.datasetDir, { ...meta, emb_dim: encoder.dim, encoder_name: encoder.name });
  const total = Object.keys(index).length + fresh.length;
  return { rows: total, dim: encoder.dim, encoderName: encoder.name, outputPath };
}

export { f32leToRows };
