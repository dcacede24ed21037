/**
 * Maps source checkpoint parameter names onto the engine's canonical
 * naming scheme and converts layouts:
 *
 *   - linear weights are stored [out, in] at the source, [in, out] here;
 *   - the fused qkv projection is split into separate q/k/v tensors;
 *   - the patch-embedding convolution kernel [d, 3, p, p] becomes a
 *     [3*p*p, d] matrix;
 *   - cls_token [1, 1, d] and pos_embed [1, n, d] drop their leading
 *     singleton axes (pos_embed stays at the source grid resolution).
 *
 * Families share the transformer-block naming; they differ in which
 * extra tensors (classification heads, distillation heads, pre-logits)
 * are expected and listed rather than silently dropped.
 */

import { SourceTensor } from "./torch.js";
import { NamedTensor } from "./pfwa.js";

export const MAPPING_VERSION = 1;

export const FAMILIES = ["dino", "deit", "in21k"] as const;
export type Family = (typeof FAMILIES)[number];

export class MappingError extends Error {}

export interface MappedModel {
  tensors: NamedTensor[];
  unmapped: string[];
  blocks: number;
}

function transpose2d(t: SourceTensor): { shape: number[]; data: Float32Array } {
  const [rows, cols] = t.shape;
  const out = new Float32Array(rows * cols);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      out[c * rows + r] = t.data[r * cols + c];
    }
  }
  return { shape: [cols, rows], data: out };
}

function sliceRows(t: SourceTensor, from: number, to: number): SourceTensor {
  const cols = t.shape.length === 2 ? t.shape[1] : 1;
  const shape = t.shape.length === 2 ? [to - from, cols] : [to - from];
  return { shape, data: t.data.slice(from * cols, to * cols) };
}

function countBlocks(source: Map<string, SourceTensor>): number {
  let blocks = 0;
  while (source.has(`blocks.${blocks}.norm1.weight`)) blocks++;
  if (blocks === 0) {
    throw new MappingError("no transformer blocks found (blocks.0.norm1.weight missing)");
  }
  return blocks;
}

export function mapCheckpoint(
  source: Map<string, SourceTensor>,
  family: Family,
): MappedModel {
  if (!FAMILIES.includes(family)) {
    throw new MappingError(`unknown family '${family}'`);
  }
  const blocks = countBlocks(source);
  const consumed = new Set<string>();
  const missing: string[] = [];
  const tensors: NamedTensor[] = [];

  const take = (name: string): SourceTensor | null => {
    const t = source.get(name);
    if (!t) {
      missing.push(name);
      return null;
    }
    consumed.add(name);
    return t;
  };
  const emit = (name: string, shape: number[], data: Float32Array) => {
    tensors.push({ name, shape, data });
  };

  const cls = take("cls_token");
  if (cls) emit("cls_token", [cls.shape[2]], cls.data);
  const pos = take("pos_embed");
  if (pos) emit("pos_embed", [pos.shape[1], pos.shape[2]], pos.data);

  const pw = take("patch_embed.proj.weight");
  if (pw) {
    const [d, c, p1, p2] = pw.shape;
    const flat = { shape: [d, c * p1 * p2], data: pw.data };
    const t = transpose2d(flat);
    emit("patch_embed.weight", t.shape, t.data);
  }
  const pb = take("patch_embed.proj.bias");
  if (pb) emit("patch_embed.bias", pb.shape, pb.data);

  for (let i = 0; i < blocks; i++) {
    const src = `blocks.${i}`;
    const dst = `blocks.${i}`;
    for (const [ln, canon] of [
      ["norm1", "norm1"],
      ["norm2", "norm2"],
    ] as const) {
      const g = take(`${src}.${ln}.weight`);
      if (g) emit(`${dst}.${canon}.gamma`, g.shape, g.data);
      const b = take(`${src}.${ln}.bias`);
      if (b) emit(`${dst}.${canon}.beta`, b.shape, b.data);
    }
    const qkvW = take(`${src}.attn.qkv.weight`);
    const qkvB = take(`${src}.attn.qkv.bias`);
    if (qkvW && qkvB) {
      const d = qkvW.shape[1];
      if (qkvW.shape[0] !== 3 * d) {
        throw new MappingError(
          `${src}.attn.qkv.weight: expected [3d, d], got [${qkvW.shape}]`,
        );
      }
      const names = ["q", "k", "v"] as const;
      for (let j = 0; j < 3; j++) {
        const w = transpose2d(sliceRows(qkvW, j * d, (j + 1) * d));
        emit(`${dst}.attn.w_${names[j]}`, w.shape, w.data);
      }
      for (let j = 0; j < 3; j++) {
        const b = sliceRows(qkvB, j * d, (j + 1) * d);
        emit(`${dst}.attn.b_${names[j]}`, b.shape, b.data);
      }
    }
    const ow = take(`${src}.attn.proj.weight`);
    if (ow) {
      const t = transpose2d(ow);
      emit(`${dst}.attn.w_o`, t.shape, t.data);
    }
    const ob = take(`${src}.attn.proj.bias`);
    if (ob) emit(`${dst}.attn.b_o`, ob.shape, ob.data);

    for (const fc of ["fc1", "fc2"] as const) {
      const w = take(`${src}.mlp.${fc}.weight`);
      if (w) {
        const t = transpose2d(w);
        emit(`${dst}.mlp.${fc}.weight`, t.shape, t.data);
      }
      const b = take(`${src}.mlp.${fc}.bias`);
      if (b) emit(`${dst}.mlp.${fc}.bias`, b.shape, b.data);
    }
  }

  const ng = take("norm.weight");
  if (ng) emit("norm.gamma", ng.shape, ng.data);
  const nb = take("norm.bias");
  if (nb) emit("norm.beta", nb.shape, nb.data);

  if (missing.length > 0) {
    throw new MappingError(
      `required tensors missing from checkpoint: ${missing.join(", ")}`,
    );
  }

  const unmapped = [...source.keys()].filter((k) => !consumed.has(k)).sort();
  return { tensors, unmapped, blocks };
}
