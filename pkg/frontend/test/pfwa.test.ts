import { describe, expect, it } from "vitest";

import { ArchiveError, NamedTensor, parseArchive, serializeArchive } from "../src/pfwa.js";

function tensor(name: string, shape: number[], values: number[]): NamedTensor {
  return { name, shape, data: Float32Array.from(values) };
}

describe("archive serialization", () => {
  it("round-trips names, shapes and values", () => {
    const tensors = [
      tensor("a.weight", [2, 3], [1, 2, 3, 4, 5, 6]),
      tensor("a.bias", [3], [0.5, -0.5, 0]),
      tensor("scalarish", [1], [42]),
    ];
    const back = parseArchive(serializeArchive(tensors));
    expect(back.map((t) => t.name)).toEqual(["a.weight", "a.bias", "scalarish"]);
    expect(back[0].shape).toEqual([2, 3]);
    expect(Array.from(back[0].data)).toEqual([1, 2, 3, 4, 5, 6]);
    expect(Array.from(back[1].data)).toEqual([0.5, -0.5, 0]);
  });

  it("re-serialization is byte-identical", () => {
    const tensors = [tensor("x", [4], [1.5, 2.5, 3.5, 4.5])];
    const first = serializeArchive(tensors);
    const second = serializeArchive(parseArchive(first));
    expect(second.equals(first)).toBe(true);
  });

  it("writes the documented preamble", () => {
    const blob = serializeArchive([tensor("x", [1], [0])]);
    expect(blob.subarray(0, 4).toString("ascii")).toBe("PFWA");
    expect(blob.readUInt32LE(4)).toBe(1); // version
    expect(Number(blob.readBigUInt64LE(8))).toBe(1); // tensor count
  });

  it("rejects bad magic", () => {
    const blob = serializeArchive([tensor("x", [1], [0])]);
    blob[0] = 0x00;
    expect(() => parseArchive(blob)).toThrow(ArchiveError);
  });

  it("rejects duplicate names", () => {
    const tensors = [tensor("x", [1], [0]), tensor("x", [1], [1])];
    expect(() => serializeArchive(tensors)).toThrow(/duplicate/);
  });

  it("rejects shape/data mismatches", () => {
    expect(() => serializeArchive([tensor("x", [3], [0, 1])])).toThrow(/shape/);
  });
});
