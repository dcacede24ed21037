#!/usr/bin/env python3
"""Generate a random ViT-S/16 checkpoint in DINO naming plus a reference
CLS embedding computed by the source framework (PyTorch) on a fixed image.

Outputs (in frontend/fixtures/):
    dino_vits16_random.pth  zip-format torch checkpoint, float32
    image.npy               fixed input image [3, 128, 128], float32 in [0, 1]
    ref_cls.npy             reference CLS embedding [384], float32
"""

import pathlib

import numpy as np
import torch
import torch.nn.functional as F

IMAGE_SIZE = 128
PATCH = 16
D = 384
L = 12
N_H = 6
D_MLP = 4 * D
N_TOKENS = (IMAGE_SIZE // PATCH) ** 2 + 1
EPS = 1e-6


def build_state_dict(gen):
    def randn(*shape):
        return torch.empty(*shape).normal_(0.0, 0.02, generator=gen)

    sd = {
        "cls_token": torch.zeros(1, 1, D),
        "pos_embed": randn(1, N_TOKENS, D),
        "patch_embed.proj.weight": randn(D, 3, PATCH, PATCH),
        "patch_embed.proj.bias": torch.zeros(D),
    }
    for i in range(L):
        p = f"blocks.{i}"
        sd[f"{p}.norm1.weight"] = torch.ones(D)
        sd[f"{p}.norm1.bias"] = torch.zeros(D)
        sd[f"{p}.attn.qkv.weight"] = randn(3 * D, D)
        sd[f"{p}.attn.qkv.bias"] = torch.zeros(3 * D)
        sd[f"{p}.attn.proj.weight"] = randn(D, D)
        sd[f"{p}.attn.proj.bias"] = torch.zeros(D)
        sd[f"{p}.norm2.weight"] = torch.ones(D)
        sd[f"{p}.norm2.bias"] = torch.zeros(D)
        sd[f"{p}.mlp.fc1.weight"] = randn(D_MLP, D)
        sd[f"{p}.mlp.fc1.bias"] = torch.zeros(D_MLP)
        sd[f"{p}.mlp.fc2.weight"] = randn(D, D_MLP)
        sd[f"{p}.mlp.fc2.bias"] = torch.zeros(D)
    sd["norm.weight"] = torch.ones(D)
    sd["norm.bias"] = torch.zeros(D)
    # classification head: present in the source file, not part of the backbone
    sd["head.weight"] = randn(1000, D)
    sd["head.bias"] = torch.zeros(1000)
    return sd


@torch.no_grad()
def reference_forward(sd, image):
    """Pre-norm ViT forward returning the final-norm CLS embedding."""
    x = F.conv2d(image, sd["patch_embed.proj.weight"],
                 sd["patch_embed.proj.bias"], stride=PATCH)
    x = x.flatten(2).transpose(1, 2)  # [1, n_patches, D]
    cls = sd["cls_token"].expand(x.shape[0], -1, -1)
    x = torch.cat([cls, x], dim=1) + sd["pos_embed"]

    for i in range(L):
        p = f"blocks.{i}"
        h = F.layer_norm(x, (D,), sd[f"{p}.norm1.weight"], sd[f"{p}.norm1.bias"], EPS)
        qkv = F.linear(h, sd[f"{p}.attn.qkv.weight"], sd[f"{p}.attn.qkv.bias"])
        q, k, v = qkv.chunk(3, dim=-1)

        def heads(t):
            b, n, _ = t.shape
            return t.reshape(b, n, N_H, D // N_H).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        attn = torch.softmax(q @ k.transpose(-2, -1) / (D // N_H) ** 0.5, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(x.shape[0], -1, D)
        x = x + F.linear(ctx, sd[f"{p}.attn.proj.weight"], sd[f"{p}.attn.proj.bias"])

        h = F.layer_norm(x, (D,), sd[f"{p}.norm2.weight"], sd[f"{p}.norm2.bias"], EPS)
        h = F.gelu(F.linear(h, sd[f"{p}.mlp.fc1.weight"], sd[f"{p}.mlp.fc1.bias"]))
        x = x + F.linear(h, sd[f"{p}.mlp.fc2.weight"], sd[f"{p}.mlp.fc2.bias"])

    x = F.layer_norm(x, (D,), sd["norm.weight"], sd["norm.bias"], EPS)
    return x[:, 0]


def main():
    out_dir = pathlib.Path(__file__).resolve().parent.parent / "fixtures"
    out_dir.mkdir(exist_ok=True)

    gen = torch.Generator().manual_seed(0)
    sd = build_state_dict(gen)

    rng = np.random.default_rng(0)
    image_np = rng.uniform(0, 1, size=(1, 3, IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)
    ref = reference_forward(sd, torch.from_numpy(image_np)).numpy().astype(np.float32)

    torch.save(sd, out_dir / "dino_vits16_random.pth")
    np.save(out_dir / "image.npy", image_np[0])
    np.save(out_dir / "ref_cls.npy", ref[0])
    print(f"fixture written to {out_dir} (ref norm {np.linalg.norm(ref):.4f})")


if __name__ == "__main__":
    main()
