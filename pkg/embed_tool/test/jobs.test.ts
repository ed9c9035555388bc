import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { afterEach, beforeEach, describe, expect, it } from "vitest";

import { EncoderLoadFailure } from "../src/encoder.js";
import { f32leToRows } from "../src/files.js";
import { embedNodes, embedRationales, MissingText } from "../src/jobs.js";
import { main } from "../src/cli.js";

let dir: string;

beforeEach(() => {
  dir = fs.mkdtempSync(path.join(os.tmpdir(), "embed-"));
});

afterEach(() => {
  fs.rmSync(dir, { recursive: true, force: true });
});

function writeNodes(texts: (string | null)[], meta?: object) {
  const lines = texts.map((text, id) => JSON.stringify({ id, label: null, text }));
  fs.writeFileSync(path.join(dir, "nodes.jsonl"), lines.join("\n") + "\n");
  if (meta) {
    fs.writeFileSync(path.join(dir, "meta.json"), JSON.stringify(meta));
  }
}

function writePending(rows: { node_id: number; rationale_text: string }[], append = false) {
  const text = rows.map((r) => JSON.stringify(r)).join("\n") + "\n";
  const p = path.join(dir, "rationales_pending.jsonl");
  if (append) fs.appendFileSync(p, text);
  else fs.writeFileSync(p, text);
}

describe("embedNodes", () => {
  it("writes exactly N x dim x 4 bytes in input order", () => {
    writeNodes(["alpha text", "beta text", "gamma text"]);
    const result = embedNodes({ datasetDir: dir, dim: 32 });
    expect(result.rows).toBe(3);
    const blob = fs.readFileSync(path.join(dir, "embeddings.f32le"));
    expect(blob.length).toBe(3 * 32 * 4);
  });

  it("gives identical rows for identical texts", () => {
    writeNodes(["same text", "other text", "same text"]);
    embedNodes({ datasetDir: dir, dim: 48 });
    const rows = f32leToRows(fs.readFileSync(path.join(dir, "embeddings.f32le")), 48);
    expect(Array.from(rows[0])).toEqual(Array.from(rows[2]));
    expect(Array.from(rows[0])).not.toEqual(Array.from(rows[1]));
  });

  it("records dimension and encoder name in meta.json", () => {
    writeNodes(["a", "b"], { num_nodes: 2, num_classes: 1, class_names: ["x"], directed: false });
    embedNodes({ datasetDir: dir, dim: 16 });
    const meta = JSON.parse(fs.readFileSync(path.join(dir, "meta.json"), "utf8"));
    expect(meta.emb_dim).toBe(16);
    expect(meta.encoder_name).toBe("hashed-v1-16");
    expect(meta.num_classes).toBe(1);
  });

  it("rejects a null text naming the node", () => {
    writeNodes(["fine", null, "fine too"]);
    expect(() => embedNodes({ datasetDir: dir, dim: 8 })).toThrow(MissingText);
    expect(() => embedNodes({ datasetDir: dir, dim: 8 })).toThrow(/node 1/);
  });

  it("enforces meta emb_dim consistency", () => {
    writeNodes(["a", "b"], { emb_dim: 64 });
    expect(() => embedNodes({ datasetDir: dir, dim: 32 })).toThrow(EncoderLoadFailure);
    const ok = embedNodes({ datasetDir: dir });       // no flag: inherit meta's 64
    expect(ok.dim).toBe(64);
  });

  it("refuses to mix encoders on an existing dataset", () => {
    writeNodes(["a", "b"], { emb_dim: 8, encoder_name: "hashed-v1-8" });
    expect(() => embedNodes({ datasetDir: dir, encoderName: "other-model" }))
      .toThrow(EncoderLoadFailure);
  });

  it("normalizes rows to unit length by default", () => {
    writeNodes(["some words", "more words here"]);
    embedNodes({ datasetDir: dir, dim: 24 });
    const rows = f32leToRows(fs.readFileSync(path.join(dir, "embeddings.f32le")), 24);
    for (const row of rows) {
      const norm = Math.sqrt(row.reduce((s, x) => s + x * x, 0));
      expect(Math.abs(norm - 1)).toBeLessThan(1e-6);
    }
  });
});

describe("embedRationales", () => {
  it("writes one row and one index entry per pending rationale", () => {
    writeNodes(["a"], { emb_dim: 16 });
    writePending([
      { node_id: 4, rationale_text: "because of the citations" },
      { node_id: 9, rationale_text: "terminology matches" },
      { node_id: 2, rationale_text: "topic overlap" },
      { node_id: 7, rationale_text: "journal context" },
      { node_id: 5, rationale_text: "shared authors" },
    ]);
    const result = embedRationales({ datasetDir: dir });
    expect(result.rows).toBe(5);
    const blob = fs.readFileSync(path.join(dir, "rationale_embeddings.f32le"));
    expect(blob.length).toBe(5 * 16 * 4);
    const index = JSON.parse(fs.readFileSync(path.join(dir, "index.json"), "utf8"));
    expect(Object.keys(index)).toHaveLength(5);
    expect(index["4"]).toBe(0);
    expect(index["5"]).toBe(4);
  });

  it("is a no-op on rerun without new pendings", () => {
    writeNodes(["a"], { emb_dim: 8 });
    writePending([{ node_id: 1, rationale_text: "first" }]);
    embedRationales({ datasetDir: dir });
    const before = fs.readFileSync(path.join(dir, "rationale_embeddings.f32le"));
    const indexBefore = fs.readFileSync(path.join(dir, "index.json"));
    embedRationales({ datasetDir: dir });
    expect(fs.readFileSync(path.join(dir, "rationale_embeddings.f32le")).equals(before)).toBe(true);
    expect(fs.readFileSync(path.join(dir, "index.json")).equals(indexBefore)).toBe(true);
  });

  it("appends exactly one new row, prior bytes untouched", () => {
    writeNodes(["a"], { emb_dim: 8 });
    writePending([{ node_id: 1, rationale_text: "first" }]);
    embedRationales({ datasetDir: dir });
    const before = fs.readFileSync(path.join(dir, "rationale_embeddings.f32le"));
    writePending([{ node_id: 3, rationale_text: "second" }], true);
    const result = embedRationales({ datasetDir: dir });
    expect(result.rows).toBe(2);
    const after = fs.readFileSync(path.join(dir, "rationale_embeddings.f32le"));
    expect(after.length).toBe(2 * 8 * 4);
    expect(after.subarray(0, before.length).equals(before)).toBe(true);
    const index = JSON.parse(fs.readFileSync(path.join(dir, "index.json"), "utf8"));
    expect(index["3"]).toBe(1);
  });

  it("skips duplicated pending ids", () => {
    writeNodes(["a"], { emb_dim: 8 });
    writePending([
      { node_id: 1, rationale_text: "first" },
      { node_id: 1, rationale_text: "repeat of first" },
    ]);
    const result = embedRationales({ datasetDir: dir });
    expect(result.rows).toBe(1);
  });
});

describe("acceptance", () => {
  it("1k texts embed within the runtime budget and exact byte size", () => {
    const texts = Array.from({ length: 1000 }, (_, i) =>
      `document number ${i} discussing topic ${i % 7} with shared vocabulary about graphs`);
    writeNodes(texts);
    const t0 = Date.now();
    const result = embedNodes({ datasetDir: dir, dim: 128 });
    const elapsed = (Date.now() - t0) / 1000;
    expect(result.rows).toBe(1000);
    const blob = fs.readFileSync(path.join(dir, "embeddings.f32le"));
    expect(blob.length).toBe(1000 * 128 * 4);
    expect(elapsed).toBeLessThan(120);
    const rows = f32leToRows(blob, 128);
    expect(Array.from(rows[7])).not.toEqual(Array.from(rows[8]));
    console.log(`ACCEPTANCE PASS - embedding tool contracts (1000 rows in ${elapsed.toFixed(2)}s)`);
  });
});

describe("cli", () => {
  it("runs embed-nodes end to end", () => {
    writeNodes(["cli text one", "cli text two"]);
    const rc = main(["embed-nodes", "--dataset", dir, "--dim", "16"]);
    expect(rc).toBe(0);
    expect(fs.readFileSync(path.join(dir, "embeddings.f32le")).length).toBe(2 * 16 * 4);
  });

  it("runs embed-rationales end to end", () => {
    writeNodes(["a"], { emb_dim: 8 });
    writePending([{ node_id: 0, rationale_text: "reasoning" }]);
    const rc = main(["embed-rationales", "--dataset", dir]);
    expect(rc).toBe(0);
    expect(fs.existsSync(path.join(dir, "index.json"))).toBe(true);
  });

  it("reports usage errors", () => {
    expect(main(["bogus"])).toBe(2);
    expect(main(["embed-nodes"])).toBe(2);
    expect(main(["embed-nodes", "--dataset", path.join(dir, "missing")])).toBe(1);
  });
});
