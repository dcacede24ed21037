import { describe, expect, it } from "vitest";

import { MappingError, mapCheckpoint } from "../src/namemap.js";
import { SourceTensor } from "../src/torch.js";

const D = 4;

function fill(shape: number[], start = 0): SourceTensor {
  const numel = shape.reduce((a, b) => a * b, 1);
  return { shape, data: Float32Array.from({ length: numel }, (_, i) => start + i) };
}

function tinySource(blocks = 2): Map<string, SourceTensor> {
  const src = new Map<string, SourceTensor>();
  src.set("cls_token", fill([1, 1, D]));
  src.set("pos_embed", fill([1, 5, D]));
  src.set("patch_embed.proj.weight", fill([D, 3, 2, 2]));
  src.set("patch_embed.proj.bias", fill([D]));
  for (let i = 0; i < blocks; i++) {
    const p = `blocks.${i}`;
    src.set(`${p}.norm1.weight`, fill([D]));
    src.set(`${p}.norm1.bias`, fill([D]));
    src.set(`${p}.attn.qkv.weight`, fill([3 * D, D]));
    src.set(`${p}.attn.qkv.bias`, fill([3 * D]));
    src.set(`${p}.attn.proj.weight`, fill([D, D]));
    src.set(`${p}.attn.proj.bias`, fill([D]));
    src.set(`${p}.norm2.weight`, fill([D]));
    src.set(`${p}.norm2.bias`, fill([D]));
    src.set(`${p}.mlp.fc1.weight`, fill([4 * D, D]));
    src.set(`${p}.mlp.fc1.bias`, fill([4 * D]));
    src.set(`${p}.mlp.fc2.weight`, fill([D, 4 * D]));
    src.set(`${p}.mlp.fc2.bias`, fill([D]));
  }
  src.set("norm.weight", fill([D]));
  src.set("norm.bias", fill([D]));
  return src;
}

describe("checkpoint name mapping", () => {
  it("emits the full canonical census per block", () => {
    const mapped = mapCheckpoint(tinySource(2), "dino");
    expect(mapped.blocks).toBe(2);
    const names = new Set(mapped.tensors.map((t) => t.name));
    for (let i = 0; i < 2; i++) {
      for (const suffix of [
        "norm1.gamma", "norm1.beta",
        "attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o",
        "attn.b_q", "attn.b_k", "attn.b_v", "attn.b_o",
        "norm2.gamma", "norm2.beta",
        "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias",
      ]) {
        expect(names.has(`blocks.${i}.${suffix}`)).toBe(true);
      }
    }
    expect(names.has("cls_token")).toBe(true);
    expect(names.has("norm.gamma")).toBe(true);
    // 4 stem tensors + 16 per block + 2 final norms
    expect(mapped.tensors.length).toBe(4 + 2 * 16 + 2);
  });

  it("squeezes token tensors and re-lays out the patch kernel", () => {
    const mapped = mapCheckpoint(tinySource(1), "dino");
    const byName = new Map(mapped.tensors.map((t) => [t.name, t]));
    expect(byName.get("cls_token")!.shape).toEqual([D]);
    expect(byName.get("pos_embed")!.shape).toEqual([5, D]);
    expect(byName.get("patch_embed.weight")!.shape).toEqual([3 * 2 * 2, D]);
  });

  it("splits the fused qkv projection and transposes weights", () => {
    const src = tinySource(1);
    const qkv = src.get("blocks.0.attn.qkv.weight")!;
    const mapped = mapCheckpoint(src, "dino");
    const byName = new Map(mapped.tensors.map((t) => [t.name, t]));
    const wq = byName.get("blocks.0.attn.w_q")!;
    const wv = byName.get("blocks.0.attn.w_v")!;
    expect(wq.shape).toEqual([D, D]);
    // transposed: canonical[in][out] === source[out][in]
    expect(wq.data[1 * D + 0]).toBe(qkv.data[0 * D + 1]);
    // v occupies the last third of the fused rows
    expect(wv.data[0]).toBe(qkv.data[2 * D * D]);
    const bq = byName.get("blocks.0.attn.b_q")!;
    const bv = byName.get("blocks.0.attn.b_v")!;
    expect(bq.data[0]).toBe(0);
    expect(bv.data[0]).toBe(2 * D);
  });

  it("lists unmapped extras instead of dropping them silently", () => {
    const src = tinySource(1);
    src.set("head.weight", fill([10, D]));
    src.set("head.bias", fill([10]));
    const mapped = mapCheckpoint(src, "deit");
    expect(mapped.unmapped).toEqual(["head.bias", "head.weight"]);
  });

  it("fails listing every missing required tensor", () => {
    const src = tinySource(1);
    src.delete("norm.bias");
    src.delete("blocks.0.mlp.fc2.weight");
    expect(() => mapCheckpoint(src, "dino")).toThrow(
      /blocks\.0\.mlp\.fc2\.weight.*norm\.bias|norm\.bias.*blocks\.0\.mlp\.fc2\.weight/s,
    );
  });

  it("rejects a checkpoint without transformer blocks", () => {
    expect(() => mapCheckpoint(new Map(), "dino")).toThrow(MappingError);
  });
});
