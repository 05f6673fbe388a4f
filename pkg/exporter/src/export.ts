/**
 * Export jobs: run the configured backbones over images and prompts and
 * write VFEA files the primary pipeline can consume directly.
 */

import { mkdirSync, writeFileSync } from "node:fs";
import { basename, extname, join } from "node:path";

import {
  DepthBackbone,
  TextEncoder,
  VisualBackbone,
  proportionalLayer,
  validateTaps,
} from "./backbones.js";
import { DEPTH_FLAG, Entry, Kind, encode } from "./vfea.js";

export const DEFAULT_LAYERS = [8, 12, 16, 24];
export const DEFAULT_TEMPLATE = "a photo of a {label}.";

export interface ExportJob {
  imagePaths: string[];
  visual: VisualBackbone;
  /** omit for a visual-only export (one entry per tapped layer) */
  depth?: DepthBackbone;
  /** visual encoder layers to tap (1-based, ascending) */
  layers?: number[];
  /** how depth taps map onto the depth stack; "proportional" rescales by
      relative depth, "final" always uses the last layer */
  depthTap?: "proportional" | "final";
  outDir: string;
}

export interface ExportedFile {
  path: string;
  entries: number;
}

function imageId(path: string): string {
  const base = basename(path);
  const ext = extname(base);
  return ext ? base.slice(0, -ext.length) : base;
}

export async function exportVisual(job: ExportJob): Promise<ExportedFile[]> {
  if (job.imagePaths.length === 0) throw new Error("no images given");
  const layers = job.layers ?? DEFAULT_LAYERS;
  validateTaps(layers, job.visual.totalLayers, job.visual.name);
  const depth = job.depth;
  const depthLayers = depth === undefined ? [] : layers.map((layer) =>
    job.depthTap === "final"
      ? depth.totalLayers
      : proportionalLayer(layer, job.visual.totalLayers, depth.totalLayers));
  mkdirSync(job.outDir, { recursive: true });

  const written: ExportedFile[] = [];
  for (const imagePath of job.imagePaths) {
    const visualFeatures = await job.visual.extract(imagePath, layers);
    const entries: Entry[] = visualFeatures.map((f) => ({
      id: f.layer,
      extents: [...f.extents],
      payload: f.values,
    }));
    if (depth !== undefined) {
      // depth entries are keyed by the visual layer they accompany
      for (let i = 0; i < layers.length; i++) {
        const [feature] = await depth.extract(imagePath, [depthLayers[i]]);
        entries.push({
          id: (layers[i] | DEPTH_FLAG) >>> 0,
          extents: [...feature.extents],
          payload: feature.values,
        });
      }
    }
    const path = join(job.outDir, `${imageId(imagePath)}.vfea`);
    writeFileSync(path, encode(Kind.FeatureStack, entries));
    written.push({ path, entries: entries.length });
  }
  return written;
}

export function normalize(row: Float32Array): Float32Array {
  let sq = 0;
  for (const v of row) sq += v * v;
  const norm = Math.sqrt(sq);
  if (!(norm > 0)) throw new Error("cannot normalize a zero embedding");
  const out = new Float32Array(row.length);
  for (let i = 0; i < row.length; i++) out[i] = row[i] / norm;
  return out;
}

export async function exportText(
  labels: string[], encoder: TextEncoder, outDir: string,
  template: string = DEFAULT_TEMPLATE,
): Promise<ExportedFile> {
  if (labels.length === 0) throw new Error("no labels given");
  for (const label of labels) {
    if (!label.trim()) throw new Error("empty label");
  }
  const prompts = labels.map((label) => template.replaceAll("{label}", label));
  const rows = await encoder.encode(prompts);
  const entries: Entry[] = rows.map((row, i) => ({
    id: i,
    name: labels[i],
    extents: [row.length],
    payload: normalize(row),
  }));
  mkdirSync(outDir, { recursive: true });
  const path = join(outDir, "text_bank.vfea");
  writeFileSync(path, encode(Kind.TextBank, entries));
  return { path, entries: entries.length };
}
