/**
 * Minimal ZIP reader for PyTorch checkpoint containers.
 *
 * Checkpoints are ZIP files with uncompressed (stored) entries. Entries
 * are located through the central directory so local-header padding and
 * alignment tricks do not matter.
 */

import { inflateRawSync } from "node:zlib";

const EOCD_SIG = 0x06054b50;
const CEN_SIG = 0x02014b50;
const LOC_SIG = 0x04034b50;
const ZIP64_EOCD_SIG = 0x06064b50;
const ZIP64_EOCD_LOC_SIG = 0x07064b50;

export class ZipError extends Error {}

export interface ZipEntry {
  name: string;
  data: Buffer;
}

interface CentralEntry {
  name: string;
  method: number;
  compressedSize: number;
  uncompressedSize: number;
  localOffset: number;
}

function findEocd(blob: Buffer): number {
  // EOCD is at the end, possibly preceded by a comment (max 64 KiB)
  const lo = Math.max(0, blob.length - 22 - 0xffff);
  for (let pos = blob.length - 22; pos >= lo; pos--) {
    if (blob.readUInt32LE(pos) === EOCD_SIG) return pos;
  }
  throw new ZipError("end-of-central-directory record not found");
}

function readCentralDirectory(blob: Buffer): CentralEntry[] {
  const eocd = findEocd(blob);
  let count = blob.readUInt16LE(eocd + 10);
  let cdOffset = blob.readUInt32LE(eocd + 16);
  if (count === 0xffff || cdOffset === 0xffffffff) {
    // ZIP64: locate the 64-bit EOCD through its locator
    const locPos = eocd - 20;
    if (locPos < 0 || blob.readUInt32LE(locPos) !== ZIP64_EOCD_LOC_SIG) {
      throw new ZipError("zip64 locator missing");
    }
    const z64 = Number(blob.readBigUInt64LE(locPos + 8));
    if (blob.readUInt32LE(z64) !== ZIP64_EOCD_SIG) {
      throw new ZipError("zip64 end-of-central-directory record missing");
    }
    count = Number(blob.readBigUInt64LE(z64 + 32));
    cdOffset = Number(blob.readBigUInt64LE(z64 + 48));
  }
  const entries: CentralEntry[] = [];
  let pos = cdOffset;
  for (let i = 0; i < count; i++) {
    if (blob.readUInt32LE(pos) !== CEN_SIG) {
      throw new ZipError(`bad central directory signature at ${pos}`);
    }
    const method = blob.readUInt16LE(pos + 10);
    let compressedSize = blob.readUInt32LE(pos + 20);
    let uncompressedSize = blob.readUInt32LE(pos + 24);
    const nameLen = blob.readUInt16LE(pos + 28);
    const extraLen = blob.readUInt16LE(pos + 30);
    const commentLen = blob.readUInt16LE(pos + 32);
    let localOffset = blob.readUInt32LE(pos + 42);
    const name = blob.subarray(pos + 46, pos + 46 + nameLen).toString("utf-8");
    // ZIP64 extended information in the extra field
    let extraPos = pos + 46 + nameLen;
    const extraEnd = extraPos + extraLen;
    while (extraPos + 4 <= extraEnd) {
      const id = blob.readUInt16LE(extraPos);
      const size = blob.readUInt16LE(extraPos + 2);
      if (id === 0x0001) {
        let fieldPos = extraPos + 4;
        if (uncompressedSize === 0xffffffff) {
          uncompressedSize = Number(blob.readBigUInt64LE(fieldPos));
          fieldPos += 8;
        }
        if (compressedSize === 0xffffffff) {
          compressedSize = Number(blob.readBigUInt64LE(fieldPos));
          fieldPos += 8;
        }
        if (localOffset === 0xffffffff) {
          localOffset = Number(blob.readBigUInt64LE(fieldPos));
        }
      }
      extraPos += 4 + size;
    }
    entries.push({ name, method, compressedSize, uncompressedSize, localOffset });
    pos += 46 + nameLen + extraLen + commentLen;
  }
  return entries;
}

export function readZip(blob: Buffer): Map<string, Buffer> {
  const out = new Map<string, Buffer>();
  for (const e of readCentralDirectory(blob)) {
    if (blob.readUInt32LE(e.localOffset) !== LOC_SIG) {
      throw new ZipError(`bad local header signature for '${e.name}'`);
    }
    const nameLen = blob.readUInt16LE(e.localOffset + 26);
    const extraLen = blob.readUInt16LE(e.localOffset + 28);
    const dataStart = e.localOffset + 30 + nameLen + extraLen;
    const raw = blob.subarray(dataStart, dataStart + e.compressedSize);
    let data: Buffer;
    if (e.method === 0) {
      data = Buffer.from(raw);
    } else if (e.method === 8) {
      data = inflateRawSync(raw);
    } else {
      throw new ZipError(`unsupported compression method ${e.method} for '${e.name}'`);
    }
    if (data.length !== e.uncompressedSize) {
      throw new ZipError(`size mismatch for '${e.name}'`);
    }
    out.set(e.name, data);
  }
  return out;
}
