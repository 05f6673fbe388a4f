import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { describe, expect, it } from "vitest";

import {
  StubDepthBackbone,
  StubTextEncoder,
  StubVisualBackbone,
  TransformersTextEncoder,
  TransformersVisualBackbone,
  proportionalLayer,
} from "../src/backbones.js";
import { exportText, exportVisual } from "../src/export.js";
import { DEPTH_FLAG, Kind, decode } from "../src/vfea.js";

function outDir(): string {
  return mkdtempSync(join(tmpdir(), "vfea-export-"));
}

describe("visual export", () => {
  it("writes one entry per tapped layer for a visual-only job", async () => {
    const files = await exportVisual({
      imagePaths: ["scene.png"],
      visual: new StubVisualBackbone(),
      layers: [8, 12, 16, 24],
      outDir: outDir(),
    });
    expect(files).toHaveLength(1);
    expect(files[0].entries).toBe(4);
    const back = decode(readFileSync(files[0].path));
    expect(back.kind).toBe(Kind.FeatureStack);
    expect(back.entries.map((e) => e.id)).toEqual([8, 12, 16, 24]);
  });

  it("adds depth entries flagged on bit 31 when a depth backbone is given", async () => {
    const files = await exportVisual({
      imagePaths: ["scene.png"],
      visual: new StubVisualBackbone(),
      depth: new StubDepthBackbone(),
      layers: [8, 12],
      outDir: outDir(),
    });
    const back = decode(readFileSync(files[0].path));
    expect(back.entries).toHaveLength(4);
    const depthIds = back.entries.filter((e) => e.id & DEPTH_FLAG)
      .map((e) => (e.id & ~DEPTH_FLAG) >>> 0);
    expect(depthIds).toEqual([8, 12]);
  });

  it("re-exports byte-identically", async () => {
    const job = {
      imagePaths: ["same.png"],
      visual: new StubVisualBackbone(),
      depth: new StubDepthBackbone(),
      layers: [8, 12, 16, 24],
    };
    const [a] = await exportVisual({ ...job, outDir: outDir() });
    const [b] = await exportVisual({ ...job, outDir: outDir() });
    expect(readFileSync(a.path).equals(readFileSync(b.path))).toBe(true);
  });

  it("distinct images give distinct payloads", async () => {
    const dir = outDir();
    const files = await exportVisual({
      imagePaths: ["a.png", "b.png"],
      visual: new StubVisualBackbone(),
      layers: [8],
      outDir: dir,
    });
    const [fa, fb] = files.map((f) => decode(readFileSync(f.path)));
    expect(Array.from(fa.entries[0].payload)).not.toEqual(Array.from(fb.entries[0].payload));
  });

  it("rejects taps outside the backbone", async () => {
    await expect(exportVisual({
      imagePaths: ["x.png"],
      visual: new StubVisualBackbone({ totalLayers: 12 }),
      layers: [8, 24],
      outDir: outDir(),
    })).rejects.toThrow(/layer 24/);
  });

  it("maps depth taps proportionally", () => {
    expect(proportionalLayer(8, 24, 12)).toBe(4);
    expect(proportionalLayer(24, 24, 12)).toBe(12);
    expect(proportionalLayer(1, 24, 12)).toBe(1);
  });
});

describe("text export", () => {
  it("writes one unit-norm row per label", async () => {
    const file = await exportText(["road", "car", "sky"], new StubTextEncoder(), outDir());
    expect(file.entries).toBe(3);
    const back = decode(readFileSync(file.path));
    expect(back.kind).toBe(Kind.TextBank);
    expect(back.entries.map((e) => e.name)).toEqual(["road", "car", "sky"]);
    for (const entry of back.entries) {
      let sq = 0;
      for (const v of entry.payload) sq += v * v;
      expect(Math.abs(Math.sqrt(sq) - 1)).toBeLessThanOrEqual(1e-6);
    }
  });

  it("keeps synonymous labels distinct", async () => {
    const file = await exportText(["car", "automobile"], new StubTextEncoder(), outDir());
    const back = decode(readFileSync(file.path));
    expect(Array.from(back.entries[0].payload))
      .not.toEqual(Array.from(back.entries[1].payload));
  });

  it("rejects empty labels", async () => {
    await expect(exportText(["road", "  "], new StubTextEncoder(), outDir()))
      .rejects.toThrow(/empty label/);
  });
});

describe("real backbones without checkpoints", () => {
  it("visual loader errors with a download hint", () => {
    expect(() => new TransformersVisualBackbone("/no/such/checkpoint"))
      .toThrow(/checkpoint not found.*download/is);
  });

  it("text loader errors with a download hint", () => {
    expect(() => new TransformersTextEncoder("/no/such/checkpoint"))
      .toThrow(/checkpoint not found.*download/is);
  });
});
