#!/usr/bin/env python3
"""Verify an exported archive against the source framework.

Usage: check_parity.py <model.pfwa> <image.npy> <ref_cls.npy>

Checks, exiting non-zero on failure:
  1. the archive loads into the engine's ViT-S/16 configuration;
  2. the CLS embedding on the fixed image matches the source framework's
     reference within max abs diff 1e-4;
  3. loading and re-saving the archive reproduces it byte for byte.
"""

import pathlib
import sys
import tempfile

import numpy as np

from peft_forge import vit
from peft_forge.archive import load_archive, save_archive
from peft_forge.vit import VIT_S_16


def main(argv):
    archive_path, image_path, ref_path = argv
    tensors = load_archive(archive_path)
    model = vit.load_weights(tensors, VIT_S_16)

    image = np.load(image_path)
    ref = np.load(ref_path)
    cls = vit.forward(model, image[None]).cls_embeddings.data[0]
    diff = float(np.abs(cls - ref).max())
    print(f"max abs diff vs source framework: {diff:.3e}")
    if diff > 1e-4:
        print("FAIL: embedding parity exceeds 1e-4")
        return 1

    with tempfile.NamedTemporaryFile(suffix=".pfwa") as tmp:
        save_archive(tmp.name, tensors)
        original = pathlib.Path(archive_path).read_bytes()
        rewritten = pathlib.Path(tmp.name).read_bytes()
    if original != rewritten:
        print("FAIL: archive does not round-trip byte for byte")
        return 1
    print("PASS: parity within 1e-4 and bit-exact round trip")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
