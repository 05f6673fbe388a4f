/**
 * export-visual / export-text commands, flag names mirroring the primary CLI.
 *
 *   node dist/cli.js export-visual --out DIR --image a.png --image b.png \
 *       [--model stub|transformers] [--checkpoint DIR] [--layers 8,12,16,24] \
 *       [--depth-tap proportional|final]
 *   node dist/cli.js export-text --out DIR --classes road,car \
 *       [--template "a photo of a {label}."] [--model stub|transformers]
 */

import { parseArgs } from "node:util";

import {
  StubDepthBackbone,
  StubTextEncoder,
  StubVisualBackbone,
  TransformersDepthBackbone,
  TransformersTextEncoder,
  TransformersVisualBackbone,
} from "./backbones.js";
import { DEFAULT_TEMPLATE, exportText, exportVisual } from "./export.js";

function fail(message: string): never {
  console.error(`error: ${message}`);
  process.exit(2);
}

async function runExportVisual(argv: string[]): Promise<number> {
  const { values } = parseArgs({
    args: argv,
    options: {
      out: { type: "string" },
      image: { type: "string", multiple: true },
      model: { type: "string", default: "stub" },
      checkpoint: { type: "string" },
      "depth-checkpoint": { type: "string" },
      layers: { type: "string", default: "8,12,16,24" },
      "depth-tap": { type: "string", default: "proportional" },
    },
  });
  if (!values.out) fail("--out is required");
  if (!values.image || values.image.length === 0) fail("--image is required");
  const layers = values.layers!.split(",").map((s) => parseInt(s.trim(), 10));
  let visual, depth;
  if (values.model === "stub") {
    visual = new StubVisualBackbone();
    depth = new StubDepthBackbone();
  } else if (values.model === "transformers") {
    if (!values.checkpoint) fail("--checkpoint is required with --model transformers");
    visual = new TransformersVisualBackbone(values.checkpoint);
    depth = new TransformersDepthBackbone(values["depth-checkpoint"] ?? values.checkpoint);
  } else {
    fail(`unknown model ${values.model}`);
  }
  const written = await exportVisual({
    imagePaths: values.image,
    visual,
    depth,
    layers,
    depthTap: values["depth-tap"] === "final" ? "final" : "proportional",
    outDir: values.out,
  });
  for (const file of written) {
    console.log(`wrote ${file.path} (${file.entries} entries)`);
  }
  return 0;
}

async function runExportText(argv: string[]): Promise<number> {
  const { values } = parseArgs({
    args: argv,
    options: {
      out: { type: "string" },
      classes: { type: "string" },
      template: { type: "string", default: DEFAULT_TEMPLATE },
      model: { type: "string", default: "stub" },
      checkpoint: { type: "string" },
    },
  });
  if (!values.out) fail("--out is required");
  if (!values.classes) fail("--classes is required");
  const labels = values.classes.split(",").map((s) => s.trim());
  const encoder = values.model === "transformers"
    ? new TransformersTextEncoder(values.checkpoint ?? fail("--checkpoint is required"))
    : new StubTextEncoder();
  const file = await exportText(labels, encoder, values.out, values.template);
  console.log(`wrote ${file.path} (${file.entries} entries)`);
  return 0;
}

export async function main(argv: string[]): Promise<number> {
  const [command, ...rest] = argv;
  try {
    if (command === "export-visual") return await runExportVisual(rest);
    if (command === "export-text") return await runExportText(rest);
    console.error("usage: cli.js <export-visual|export-text> [options]");
    return 2;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

const isMain = process.argv[1] && import.meta.url.endsWith(process.argv[1].split("/").pop()!);
if (isMain) {
  main(process.argv.slice(2)).then((code) => process.exit(code));
}
