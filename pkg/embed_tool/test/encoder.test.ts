import { describe, expect, it } from "vitest";

import { EncoderLoadFailure, getEncoder, HashedEncoder } from "../src/encoder.js";

describe("HashedEncoder", () => {
  it("is deterministic for identical texts", () => {
    const enc = new HashedEncoder(64);
    const a = enc.encode("graph neural networks");
    const b = enc.encode("graph neural networks");
    expect(Array.from(a)).toEqual(Array.from(b));
  });

  it("produces unit-norm rows when normalizing", () => {
    const enc = new HashedEncoder(128, true);
    for (const text of ["one", "two words here", "a much longer sentence with many tokens"]) {
      const v = enc.encode(text);
      const norm = Math.sqrt(v.reduce((s, x) => s + x * x, 0));
      expect(Math.abs(norm - 1)).toBeLessThan(1e-6);
    }
  });

  it("maps empty text to a fixed unit vector", () => {
    const enc = new HashedEncoder(16);
    const v = enc.encode("");
    expect(v[0]).toBe(1);
    expect(v.slice(1).every((x) => x === 0)).toBe(true);
  });

  it("distinguishes different texts", () => {
    const enc = new HashedEncoder(256);
    const a = enc.encode("citation networks");
    const b = enc.encode("protein folding");
    expect(Array.from(a)).not.toEqual(Array.from(b));
  });

  it("keeps a constant dimension across the batch", () => {
    const enc = new HashedEncoder(32);
    const rows = enc.encodeBatch(["x", "y z", "w"]);
    expect(rows).toHaveLength(3);
    for (const row of rows) expect(row.length).toBe(32);
  });
});

describe("getEncoder", () => {
  it("resolves recorded names", () => {
    const enc = getEncoder("hashed-v1-64", 64);
    expect(enc.dim).toBe(64);
    expect(enc.name).toBe("hashed-v1-64");
  });

  it("rejects unknown encoders", () => {
    expect(() => getEncoder("some-closed-model", 64)).toThrow(EncoderLoadFailure);
  });

  it("rejects a dimension mismatch against the recorded name", () => {
    expect(() => getEncoder("hashed-v1-64", 32)).toThrow(EncoderLoadFailure);
  });
});
