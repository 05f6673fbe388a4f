/** Deterministic keyed random streams for the stub backbones. */

function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

/** sfc32 stream seeded by hashing the key parts. */
export function keyedStream(...parts: (string | number)[]): () => number {
  const tag = parts.join("\x1f");
  let a = fnv1a(tag);
  let b = fnv1a(tag + "#b");
  let c = fnv1a(tag + "#c");
  let d = fnv1a(tag + "#d");
  return () => {
    a >>>= 0; b >>>= 0; c >>>= 0; d >>>= 0;
    const t = (a + b) | 0;
    a = b ^ (b >>> 9);
    b = (c + (c << 3)) | 0;
    c = (c << 21) | (c >>> 11);
    d = (d + 1) | 0;
    const out = (t + d) | 0;
    c = (c + out) | 0;
    return (out >>> 0) / 4294967296;
  };
}

/** Standard-normal draws via Box-Muller over the keyed stream. */
export function keyedNormals(count: number, ...parts: (string | number)[]): Float32Array {
  const next = keyedStream(...parts);
  const out = new Float32Array(count);
  for (let i = 0; i < count; i += 2) {
    const u = Math.max(next(), 1e-12);
    const v = next();
    const r = Math.sqrt(-2.0 * Math.log(u));
    out[i] = r * Math.cos(2 * Math.PI * v);
    if (i + 1 < count) out[i + 1] = r * Math.sin(2 * Math.PI * v);
  }
  return out;
}
