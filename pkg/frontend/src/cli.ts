#!/usr/bin/env node
/**
 * Command line entry point.
 *
 *     pfwa-export export --family dino --in checkpoint.pth --out model.pfwa
 *                        [--manifest model.manifest.json]
 */

import { exportCheckpoint } from "./export.js";
import { FAMILIES, Family } from "./namemap.js";

function usage(): never {
  console.error(
    "usage: pfwa-export export --family <dino|deit|in21k> --in <ckpt.pth> " +
      "--out <model.pfwa> [--manifest <path>]",
  );
  process.exit(2);
}

export function main(argv: string[]): number {
  if (argv[0] !== "export") usage();
  const opts = new Map<string, string>();
  for (let i = 1; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || argv[i + 1] === undefined) usage();
    opts.set(argv[i].slice(2), argv[i + 1]);
  }
  const family = opts.get("family");
  const inPath = opts.get("in");
  const outPath = opts.get("out");
  if (!family || !inPath || !outPath) usage();
  if (!FAMILIES.includes(family as Family)) {
    console.error(`error: unknown family '${family}' (choose from ${FAMILIES.join(", ")})`);
    return 2;
  }
  try {
    const manifest = exportCheckpoint(
      inPath,
      family as Family,
      outPath,
      opts.get("manifest"),
    );
    console.log(
      `exported ${manifest.tensor_count} tensors (${manifest.blocks} blocks) to ${outPath}`,
    );
    if (manifest.unmapped.length > 0) {
      console.log(`unmapped extras: ${manifest.unmapped.join(", ")}`);
    }
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

if (process.argv[1] && process.argv[1].endsWith("cli.js")) {
  process.exit(main(process.argv.slice(2)));
}
