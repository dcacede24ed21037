/**
 * Reader for PyTorch zip-container checkpoints (.pth).
 *
 * Supports float32 tensors with contiguous row-major layout, which covers
 * ViT backbone state dicts. The object graph in `data.pkl` is walked with
 * the minimal pickle VM; tensor payloads live in `<archive>/data/<key>`.
 */

import { unpickle, GlobalRef, ReduceCall } from "./pickle.js";
import { readZip } from "./zip.js";

export class CheckpointError extends Error {}

export interface SourceTensor {
  shape: number[];
  data: Float32Array;
}

interface StorageRef {
  kind: "storage";
  dtype: string;
  key: string;
  numel: number;
}

interface TensorRec {
  kind: "tensor";
  storage: StorageRef;
  offset: number;
  shape: number[];
  stride: number[];
}

function contiguousStride(shape: number[]): number[] {
  const stride = new Array<number>(shape.length);
  let acc = 1;
  for (let i = shape.length - 1; i >= 0; i--) {
    stride[i] = acc;
    acc *= shape[i];
  }
  return stride;
}

function asTensorRec(value: unknown): TensorRec | null {
  const r = value as ReduceCall;
  if (
    r &&
    r.kind === "reduce" &&
    r.func.module.startsWith("torch") &&
    (r.func.name === "_rebuild_tensor_v2" || r.func.name === "_rebuild_tensor")
  ) {
    const [storage, offset, shape, stride] = r.args as [
      StorageRef,
      number,
      number[],
      number[],
    ];
    return { kind: "tensor", storage, offset, shape, stride };
  }
  return null;
}

export function parseCheckpoint(blob: Buffer): Map<string, SourceTensor> {
  const files = readZip(blob);
  let pickleName: string | undefined;
  for (const name of files.keys()) {
    if (name.endsWith("/data.pkl") || name === "data.pkl") pickleName = name;
  }
  if (!pickleName) {
    throw new CheckpointError("checkpoint contains no data.pkl (not a zip-format .pth?)");
  }
  const prefix = pickleName.slice(0, pickleName.length - "data.pkl".length);

  const persistentLoad = (pid: unknown): StorageRef => {
    const tup = pid as unknown[];
    if (!Array.isArray(tup) || tup[0] !== "storage") {
      throw new CheckpointError(`unsupported persistent id: ${JSON.stringify(pid)}`);
    }
    const storageType = tup[1] as GlobalRef;
    return {
      kind: "storage",
      dtype: storageType.name,
      key: String(tup[2]),
      numel: Number(tup[4]),
    };
  };

  const root = unpickle(files.get(pickleName)!, persistentLoad);
  let state: Map<unknown, unknown>;
  if (root instanceof Map) {
    // either the state dict itself or a wrapper dict holding it
    state = root;
    for (const key of ["state_dict", "model", "teacher"]) {
      const inner = root.get(key);
      if (inner instanceof Map) {
        state = inner;
        break;
      }
    }
  } else {
    throw new CheckpointError("checkpoint root is not a dict");
  }

  const out = new Map<string, SourceTensor>();
  for (const [key, value] of state) {
    const rec = asTensorRec(value);
    if (!rec) continue; // non-tensor entries (e.g. version counters)
    if (rec.storage.dtype !== "FloatStorage") {
      throw new CheckpointError(
        `tensor '${key}' has unsupported dtype ${rec.storage.dtype} (float32 only)`,
      );
    }
    const expected = contiguousStride(rec.shape);
    if (rec.shape.length > 0 && rec.stride.join(",") !== expected.join(",")) {
      throw new CheckpointError(`tensor '${key}' is not contiguous`);
    }
    const payload = files.get(`${prefix}data/${rec.storage.key}`);
    if (!payload) {
      throw new CheckpointError(`missing payload for storage '${rec.storage.key}'`);
    }
    const numel = rec.shape.reduce((a, b) => a * b, 1);
    const base = rec.offset * 4;
    const bytes = Uint8Array.prototype.slice.call(payload, base, base + numel * 4);
    out.set(String(key), { shape: rec.shape, data: new Float32Array(bytes.buffer) });
  }
  return out;
}
