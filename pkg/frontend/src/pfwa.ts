/**
 * PFWA v1 binary weight archive.
 *
 * Layout, all integers little-endian:
 *
 *     magic   4 bytes  "PFWA"
 *     version u32      1
 *     count   u64      number of tensors
 *     per tensor:
 *         name_len u16
 *         name     UTF-8 bytes
 *         rank     u8
 *         dims     rank x u64
 *         offset   u64   byte offset into the payload region
 *     payload: concatenated little-endian float32 data
 *
 * Offsets are relative to the start of the payload region, which begins
 * immediately after the last header entry.
 */

export interface NamedTensor {
  name: string;
  shape: number[];
  data: Float32Array;
}

const MAGIC = Buffer.from("PFWA", "ascii");
const VERSION = 1;

// payload handling relies on the host being little-endian (x86/arm)
if (new Uint8Array(Float32Array.of(1).buffer)[3] !== 0x3f) {
  throw new Error("PFWA serialization requires a little-endian platform");
}

export class ArchiveError extends Error {}

export function serializeArchive(tensors: NamedTensor[]): Buffer {
  const seen = new Set<string>();
  const headerParts: Buffer[] = [];
  const payloadParts: Buffer[] = [];
  let offset = 0n;
  for (const t of tensors) {
    if (seen.has(t.name)) {
      throw new ArchiveError(`duplicate tensor name '${t.name}'`);
    }
    seen.add(t.name);
    const nameBytes = Buffer.from(t.name, "utf-8");
    if (nameBytes.length > 0xffff) {
      throw new ArchiveError(`tensor name too long: '${t.name}'`);
    }
    const numel = t.shape.reduce((a, b) => a * b, 1);
    if (numel !== t.data.length) {
      throw new ArchiveError(
        `tensor '${t.name}': shape [${t.shape}] does not match ${t.data.length} values`,
      );
    }
    const head = Buffer.alloc(2 + nameBytes.length + 1 + 8 * t.shape.length + 8);
    let pos = 0;
    head.writeUInt16LE(nameBytes.length, pos);
    pos += 2;
    nameBytes.copy(head, pos);
    pos += nameBytes.length;
    head.writeUInt8(t.shape.length, pos);
    pos += 1;
    for (const dim of t.shape) {
      head.writeBigUInt64LE(BigInt(dim), pos);
      pos += 8;
    }
    head.writeBigUInt64LE(offset, pos);
    headerParts.push(head);

    // little-endian platform assumed (checked below); bulk byte view
    const payload = Buffer.from(t.data.buffer, t.data.byteOffset, t.data.length * 4);
    payloadParts.push(payload);
    offset += BigInt(payload.length);
  }
  const preamble = Buffer.alloc(16);
  MAGIC.copy(preamble, 0);
  preamble.writeUInt32LE(VERSION, 4);
  preamble.writeBigUInt64LE(BigInt(tensors.length), 8);
  return Buffer.concat([preamble, ...headerParts, ...payloadParts]);
}

export function parseArchive(blob: Buffer): NamedTensor[] {
  if (blob.length < 16 || !blob.subarray(0, 4).equals(MAGIC)) {
    throw new ArchiveError("bad magic bytes, expected PFWA");
  }
  const version = blob.readUInt32LE(4);
  if (version !== VERSION) {
    throw new ArchiveError(`unsupported archive version ${version}`);
  }
  const count = Number(blob.readBigUInt64LE(8));
  let pos = 16;
  const entries: { name: string; shape: number[]; offset: number }[] = [];
  for (let i = 0; i < count; i++) {
    const nameLen = blob.readUInt16LE(pos);
    pos += 2;
    const name = blob.subarray(pos, pos + nameLen).toString("utf-8");
    pos += nameLen;
    const rank = blob.readUInt8(pos);
    pos += 1;
    const shape: number[] = [];
    for (let d = 0; d < rank; d++) {
      shape.push(Number(blob.readBigUInt64LE(pos)));
      pos += 8;
    }
    const offset = Number(blob.readBigUInt64LE(pos));
    pos += 8;
    entries.push({ name, shape, offset });
  }
  const payloadStart = pos;
  const seen = new Set<string>();
  return entries.map((e) => {
    if (seen.has(e.name)) {
      throw new ArchiveError(`duplicate tensor name '${e.name}'`);
    }
    seen.add(e.name);
    const numel = e.shape.reduce((a, b) => a * b, 1);
    const start = payloadStart + e.offset;
    const bytes = Uint8Array.prototype.slice.call(blob, start, start + numel * 4);
    return { name: e.name, shape: e.shape, data: new Float32Array(bytes.buffer) };
  });
}
