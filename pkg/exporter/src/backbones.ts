/**
 * Encoder backends. Real backbones run pretrained models from a local
 * checkpoint directory; the stub backbones produce deterministic seeded
 * features with the same shapes, so export plumbing is testable offline.
 */

import { existsSync } from "node:fs";

import { keyedNormals } from "./rng.js";

export interface LayerFeature {
  layer: number;
  /** row-major [h, w, d] */
  extents: [number, number, number];
  values: Float32Array;
}

export interface VisualBackbone {
  readonly name: string;
  readonly totalLayers: number;
  /** Features at the requested encoder layers (1-based, ascending). */
  extract(imagePath: string, layers: number[]): Promise<LayerFeature[]>;
}

export interface DepthBackbone {
  readonly name: string;
  readonly totalLayers: number;
  extract(imagePath: string, layers: number[]): Promise<LayerFeature[]>;
}

export interface TextEncoder {
  readonly name: string;
  /** One embedding row per prompt; not normalized here. */
  encode(prompts: string[]): Promise<Float32Array[]>;
  readonly width: number;
}

export function validateTaps(layers: number[], totalLayers: number, name: string): void {
  for (const layer of layers) {
    if (!Number.isInteger(layer) || layer < 1 || layer > totalLayers) {
      throw new Error(`layer ${layer} does not exist in ${name} (1..${totalLayers})`);
    }
  }
  if (layers.some((l, i) => i > 0 && l <= layers[i - 1])) {
    throw new Error(`tapped layers must be strictly increasing, got [${layers}]`);
  }
}

/** Maps a visual-layer tap to the matching relative depth of another stack. */
export function proportionalLayer(tap: number, fromTotal: number, toTotal: number): number {
  return Math.min(Math.max(Math.floor((tap * toTotal) / fromTotal + 0.5), 1), toTotal);
}

export interface StubOptions {
  totalLayers?: number;
  h?: number;
  w?: number;
  width?: number;
}

export class StubVisualBackbone implements VisualBackbone {
  readonly name = "stub-visual";
  readonly totalLayers: number;
  private readonly h: number;
  private readonly w: number;
  private readonly width: number;

  constructor(options: StubOptions = {}) {
    this.totalLayers = options.totalLayers ?? 24;
    this.h = options.h ?? 16;
    this.w = options.w ?? 16;
    this.width = options.width ?? 32;
  }

  async extract(imagePath: string, layers: number[]): Promise<LayerFeature[]> {
    validateTaps(layers, this.totalLayers, this.name);
    return layers.map((layer) => ({
      layer,
      extents: [this.h, this.w, this.width] as [number, number, number],
      values: keyedNormals(this.h * this.w * this.width,
                           "stub-visual", imagePath, layer),
    }));
  }
}

export class StubDepthBackbone implements DepthBackbone {
  readonly name = "stub-depth";
  readonly totalLayers: number;
  private readonly h: number;
  private readonly w: number;
  private readonly width: number;

  constructor(options: StubOptions = {}) {
    this.totalLayers = options.totalLayers ?? 12;
    this.h = options.h ?? 16;
    this.w = options.w ?? 16;
    this.width = options.width ?? 16;
  }

  async extract(imagePath: string, layers: number[]): Promise<LayerFeature[]> {
    validateTaps(layers, this.totalLayers, this.name);
    return layers.map((layer) => ({
      layer,
      extents: [this.h, this.w, this.width] as [number, number, number],
      values: keyedNormals(this.h * this.w * this.width,
                           "stub-depth", imagePath, layer),
    }));
  }
}

export class StubTextEncoder implements TextEncoder {
  readonly name = "stub-text";
  readonly width: number;

  constructor(width = 32) {
    this.width = width;
  }

  async encode(prompts: string[]): Promise<Float32Array[]> {
    return prompts.map((prompt) => keyedNormals(this.width, "stub-text", prompt));
  }
}

function missingCheckpoint(kind: string, path: string, hint: string): Error {
  return new Error(
    `${kind} checkpoint not found at '${path}'. Download it first, e.g. ` +
    `\`huggingface-cli download ${hint} --local-dir ${path}\`, then re-run.`);
}

async function loadTransformers(): Promise<any> {
  try {
    return await import("@huggingface/transformers" as string);
  } catch {
    throw new Error(
      "@huggingface/transformers is not installed; run " +
      "`npm install @huggingface/transformers` to enable real backbones");
  }
}

/** [1, tokens, width] hidden state -> [h, w, width] grid, CLS token dropped. */
export function hiddenStateToGrid(
  values: Float32Array, tokens: number, width: number,
): { extents: [number, number, number]; values: Float32Array } {
  const patches = tokens - 1;
  const side = Math.floor(Math.sqrt(patches));
  if (side * side !== patches) {
    throw new Error(`token count ${tokens} is not 1 + a square patch grid`);
  }
  return { extents: [side, side, width], values: values.subarray(width) as Float32Array };
}

/**
 * ViT features through transformers.js from a local checkpoint exported
 * with hidden states. Checkpoint presence is validated eagerly; the model
 * loads lazily on the first extract call.
 */
export class TransformersVisualBackbone implements VisualBackbone {
  readonly name: string;
  readonly totalLayers: number;
  private readonly checkpoint: string;
  private model: any = null;
  private processor: any = null;

  constructor(checkpoint: string, totalLayers = 24) {
    if (!existsSync(checkpoint)) {
      throw missingCheckpoint("visual", checkpoint, "onnx-community/dinov2-large");
    }
    this.checkpoint = checkpoint;
    this.name = `transformers:${checkpoint}`;
    this.totalLayers = totalLayers;
  }

  async extract(imagePath: string, layers: number[]): Promise<LayerFeature[]> {
    validateTaps(layers, this.totalLayers, this.name);
    const { AutoModel, AutoProcessor, RawImage, env } = await loadTransformers();
    env.allowRemoteModels = false;
    if (!this.model) {
      this.model = await AutoModel.from_pretrained(this.checkpoint, {
        output_hidden_states: true,
      });
      this.processor = await AutoProcessor.from_pretrained(this.checkpoint);
    }
    const image = await RawImage.read(imagePath);
    const inputs = await this.processor(image);
    const outputs = await this.model(inputs, { output_hidden_states: true });
    const hidden = outputs.hidden_states;
    if (!hidden) {
      throw new Error(
        `${this.checkpoint} did not return hidden states; re-export the model ` +
        "with output_hidden_states enabled");
    }
    return layers.map((layer) => {
      const state = hidden[layer];
      const [, tokens, width] = state.dims;
      const grid = hiddenStateToGrid(state.data as Float32Array, tokens, width);
      return { layer, extents: grid.extents, values: grid.values };
    });
  }
}

export class TransformersDepthBackbone implements DepthBackbone {
  readonly name: string;
  readonly totalLayers: number;
  private readonly visual: TransformersVisualBackbone;

  constructor(checkpoint: string, totalLayers = 12) {
    if (!existsSync(checkpoint)) {
      throw missingCheckpoint("depth", checkpoint, "onnx-community/depth-anything-v2-base");
    }
    this.name = `transformers:${checkpoint}`;
    this.totalLayers = totalLayers;
    this.visual = new TransformersVisualBackbone(checkpoint, totalLayers);
  }

  async extract(imagePath: string, layers: number[]): Promise<LayerFeature[]> {
    return this.visual.extract(imagePath, layers);
  }
}

export class TransformersTextEncoder implements TextEncoder {
  readonly name: string;
  readonly width: number;
  private readonly checkpoint: string;
  private pipe: any = null;

  constructor(checkpoint: string, width = 768) {
    if (!existsSync(checkpoint)) {
      throw missingCheckpoint("text", checkpoint, "Xenova/clip-vit-large-patch14");
    }
    this.checkpoint = checkpoint;
    this.name = `transformers:${checkpoint}`;
    this.width = width;
  }

  async encode(prompts: string[]): Promise<Float32Array[]> {
    const { pipeline, env } = await loadTransformers();
    env.allowRemoteModels = false;
    if (!this.pipe) {
      this.pipe = await pipeline("feature-extraction", this.checkpoint);
    }
    const rows: Float32Array[] = [];
    for (const prompt of prompts) {
      const out = await this.pipe(prompt, { pooling: "mean" });
      rows.push(Float32Array.from(out.data as Float32Array));
    }
    return rows;
  }
}
