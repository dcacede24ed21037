/**
 * Orchestrates checkpoint conversion: parse the source .pth, rename and
 * re-layout its tensors, write the PFWA archive plus a JSON manifest
 * recording provenance (source hash, mapping version, unmapped extras).
 */

import { createHash } from "node:crypto";
import { readFileSync, writeFileSync } from "node:fs";

import { mapCheckpoint, Family, MAPPING_VERSION } from "./namemap.js";
import { serializeArchive } from "./pfwa.js";
import { parseCheckpoint } from "./torch.js";

export interface ExportManifest {
  family: Family;
  mapping_version: number;
  source_sha256: string;
  tensor_count: number;
  blocks: number;
  pos_embed_tokens: number;
  unmapped: string[];
}

export function exportCheckpoint(
  inPath: string,
  family: Family,
  outPath: string,
  manifestPath?: string,
): ExportManifest {
  const blob = readFileSync(inPath);
  const source = parseCheckpoint(blob);
  const mapped = mapCheckpoint(source, family);
  writeFileSync(outPath, serializeArchive(mapped.tensors));

  const posEmbed = mapped.tensors.find((t) => t.name === "pos_embed");
  const manifest: ExportManifest = {
    family,
    mapping_version: MAPPING_VERSION,
    source_sha256: createHash("sha256").update(blob).digest("hex"),
    tensor_count: mapped.tensors.length,
    blocks: mapped.blocks,
    pos_embed_tokens: posEmbed ? posEmbed.shape[0] : 0,
    unmapped: mapped.unmapped,
  };
  const dest = manifestPath ?? `${outPath}.manifest.json`;
  writeFileSync(dest, JSON.stringify(manifest, null, 2) + "\n");
  return manifest;
}
