/**
 * VFEA container writer/reader, byte-compatible with the primary pipeline.
 *
 * Little-endian layout: magic "VFEA", version u32 = 1, kind u8
 * (0 feature stack, 1 text bank, 2 named parameters), count u32, entries,
 * CRC32 u32 over every byte between the header and the CRC field.
 *
 * Entries: id u32 (bit 31 flags depth-modality entries in kind 0), a
 * u32-length-prefixed UTF-8 name for kinds 1 and 2, rank u8, extents
 * u32 x rank, payload f32 row-major.
 */

import { crc32 } from "node:zlib";

export const MAGIC = "VFEA";
export const VERSION = 1;

export enum Kind {
  FeatureStack = 0,
  TextBank = 1,
  Parameters = 2,
}

export const DEPTH_FLAG = 0x80000000;

export interface Entry {
  id: number;
  name?: string;
  extents: number[];
  payload: Float32Array;
}

function payloadLength(extents: number[]): number {
  return extents.reduce((a, b) => a * b, 1);
}

export function encode(kind: Kind, entries: Entry[]): Buffer {
  const chunks: Buffer[] = [];
  for (const entry of entries) {
    if (payloadLength(entry.extents) !== entry.payload.length) {
      throw new Error(
        `entry ${entry.id}: extents [${entry.extents}] expect ` +
        `${payloadLength(entry.extents)} values, payload has ${entry.payload.length}`);
    }
    const named = kind !== Kind.FeatureStack;
    const nameBytes = named ? Buffer.from(entry.name ?? "", "utf-8") : Buffer.alloc(0);
    const head = Buffer.alloc(4 + (named ? 4 : 0));
    head.writeUInt32LE(entry.id >>> 0, 0);
    if (named) head.writeUInt32LE(nameBytes.length, 4);
    const shape = Buffer.alloc(1 + 4 * entry.extents.length);
    shape.writeUInt8(entry.extents.length, 0);
    entry.extents.forEach((n, i) => shape.writeUInt32LE(n, 1 + 4 * i));
    const data = Buffer.alloc(4 * entry.payload.length);
    for (let i = 0; i < entry.payload.length; i++) {
      data.writeFloatLE(entry.payload[i], 4 * i);
    }
    chunks.push(head, nameBytes, shape, data);
  }
  const region = Buffer.concat(chunks);
  const header = Buffer.alloc(13);
  header.write(MAGIC, 0, "ascii");
  header.writeUInt32LE(VERSION, 4);
  header.writeUInt8(kind, 8);
  header.writeUInt32LE(entries.length, 9);
  const trailer = Buffer.alloc(4);
  trailer.writeUInt32LE(crc32(region) >>> 0, 0);
  return Buffer.concat([header, region, trailer]);
}

export interface Decoded {
  kind: Kind;
  entries: Entry[];
}

export function decode(blob: Buffer): Decoded {
  if (blob.length < 17) throw new Error(`file too short (${blob.length} bytes)`);
  if (blob.toString("ascii", 0, 4) !== MAGIC) {
    throw new Error(`bad magic ${JSON.stringify(blob.toString("ascii", 0, 4))}`);
  }
  const version = blob.readUInt32LE(4);
  if (version !== VERSION) throw new Error(`unsupported version ${version}`);
  const kind = blob.readUInt8(8) as Kind;
  const count = blob.readUInt32LE(9);
  const region = blob.subarray(13, blob.length - 4);
  const stored = blob.readUInt32LE(blob.length - 4);
  const actual = crc32(region) >>> 0;
  if (stored !== actual) {
    throw new Error(`CRC mismatch: stored ${stored}, computed ${actual}`);
  }
  let pos = 0;
  const need = (n: number, what: string) => {
    if (pos + n > region.length) throw new Error(`truncated file: ${what}`);
  };
  const entries: Entry[] = [];
  for (let e = 0; e < count; e++) {
    need(4, "entry id");
    const id = region.readUInt32LE(pos); pos += 4;
    let name: string | undefined;
    if (kind !== Kind.FeatureStack) {
      need(4, "name length");
      const len = region.readUInt32LE(pos); pos += 4;
      need(len, "name");
      name = region.toString("utf-8", pos, pos + len); pos += len;
    }
    need(1, "rank");
    const rank = region.readUInt8(pos); pos += 1;
    const extents: number[] = [];
    for (let i = 0; i < rank; i++) {
      need(4, `extent ${i}`);
      extents.push(region.readUInt32LE(pos)); pos += 4;
    }
    const n = payloadLength(extents);
    need(4 * n, `payload of entry ${id}`);
    const payload = new Float32Array(n);
    for (let i = 0; i < n; i++) payload[i] = region.readFloatLE(pos + 4 * i);
    pos += 4 * n;
    entries.push({ id, name, extents, payload });
  }
  return { kind, entries };
}
