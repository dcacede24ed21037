"""Pre-norm Vision Transformer backbone with PEFT hook points.

Parameter names follow the canonical scheme
``blocks.{i}.{attn|mlp|norm1|norm2}.{param}`` plus ``cls_token``,
``pos_embed``, ``patch_embed.*`` and the final ``norm.*``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class MissingTensorError(KeyError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int
    patch_size: int
    d: int
    L: int
    n_h: int
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d % self.n_h != 0:
            raise ConfigError(f"embedding dim {self.d} not divisible by {self.n_h} heads")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.n < 2:
            raise ConfigError("need at least one patch token")

    @property
    def d_e(self) -> int:
        return self.d // self.n_h

    @property
    def n(self) -> int:
        return (self.image_size // self.patch_size) ** 2 + 1

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def d_mlp(self) -> int:
        return self.d * self.mlp_ratio


TINY = ViTConfig(image_size=4, patch_size=2, d=8, L=2, n_h=2)
VIT_S_16 = ViTConfig(image_size=128, patch_size=16, d=384, L=12, n_h=6)
VIT_B_16 = ViTConfig(image_size=128, patch_size=16, d=768, L=12, n_h=12)


def parameter_shapes(cfg: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical name -> shape map for a config, in serialization order."""
    shapes: Dict[str, Tuple[int, ...]] = {
        "cls_token": (cfg.d,),
        "pos_embed": (cfg.n, cfg.d),
        "patch_embed.weight": (cfg.patch_dim, cfg.d),
        "patch_embed.bias": (cfg.d,),
    }
    for i in range(cfg.L):
        p = f"blocks.{i}"
        shapes[f"{p}.norm1.gamma"] = (cfg.d,)
        shapes[f"{p}.norm1.beta"] = (cfg.d,)
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{p}.attn.{w}"] = (cfg.d, cfg.d)
        for b in ("b_q", "b_k", "b_v", "b_o"):
            shapes[f"{p}.attn.{b}"] = (cfg.d,)
        shapes[f"{p}.norm2.gamma"] = (cfg.d,)
        shapes[f"{p}.norm2.beta"] = (cfg.d,)
        shapes[f"{p}.mlp.fc1.weight"] = (cfg.d, cfg.d_mlp)
        shapes[f"{p}.mlp.fc1.bias"] = (cfg.d_mlp,)
        shapes[f"{p}.mlp.fc2.weight"] = (cfg.d_mlp, cfg.d)
        shapes[f"{p}.mlp.fc2.bias"] = (cfg.d,)
    shapes["norm.gamma"] = (cfg.d,)
    shapes["norm.beta"] = (cfg.d,)
    return shapes


class ViTModel:
    """Named weight set over a config. Immutable after load except through
    designated trainable parameters."""

    def __init__(self, config: ViTConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def random_init(cls, config: ViTConfig, seed: int = 0) -> "ViTModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                data = np.ones(shape)
            elif leaf in ("beta", "bias") or leaf.startswith("b_") or name == "cls_token":
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, 0.02, size=shape)
            params[name] = Tensor(data.astype(np.float32), name=name)
        return cls(config, params)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "ViTModel":
        return ViTModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
             for k, v in self.params.items()},
        )


def interpolate_pos_embed(pos: np.ndarray, dst_tokens: int) -> np.ndarray:
    """Bicubic interpolation of grid positional embeddings (CLS row kept)."""
    src_grid = int(round(math.sqrt(pos.shape[0] - 1)))
    dst_grid = int(round(math.sqrt(dst_tokens - 1)))
    if src_grid * src_grid + 1 != pos.shape[0] or dst_grid * dst_grid + 1 != dst_tokens:
        raise ConfigError(
            f"positional embedding of {pos.shape[0]} tokens is not a square grid"
        )
    cls_row = pos[:1]
    grid = pos[1:].reshape(src_grid, src_grid, -1)
    zoom = dst_grid / src_grid
    out = ndimage.zoom(grid.astype(np.float64), (zoom, zoom, 1), order=3)
    return np.concatenate([cls_row, out.reshape(dst_grid * dst_grid, -1).astype(pos.dtype)])


def load_weights(archive: Dict[str, np.ndarray], config: ViTConfig) -> ViTModel:
    """Populate a model from a name -> array map, validating names and shapes.

    Positional embeddings stored at a different grid resolution are
    bicubically interpolated to the config's token count.
    """
    shapes = parameter_shapes(config)
    params = {}
    for name, shape in shapes.items():
        if name not in archive:
            raise MissingTensorError(f"archive is missing tensor '{name}'")
        arr = np.asarray(archive[name], dtype=np.float32)
        if name == "pos_embed" and arr.shape != shape:
            if arr.ndim == 2 and arr.shape[1] == config.d:
                arr = interpolate_pos_embed(arr, config.n)
            else:
                raise ConfigError(
                    f"tensor 'pos_embed' has shape {arr.shape}, expected {shape}"
                )
        if arr.shape != shape:
            raise ConfigError(f"tensor '{name}' has shape {arr.shape}, expected {shape}")
        params[name] = Tensor(arr, name=name)
    return ViTModel(config, params)


def count_parameters(model: ViTModel, filter: Optional[Callable[[str], bool]] = None) -> int:
    """Exact count of scalar parameters whose name matches the predicate."""
    return sum(t.size for name, t in model.params.items() if filter is None or filter(name))


# -- forward pass ------------------------------------------------------------


@dataclass
class ForwardHooks:
    """PEFT attachment points consumed by forward().

    All fields are parameter containers keyed by layer index; forward()
    applies whichever are present.
    """

    # elementwise pre-softmax score scaling: layer -> Tensor of shape
    # [n_h, n, n] (per-head) or [n, n] (shared across heads)
    attn_scale: Dict[int, Tensor] = field(default_factory=dict)
    # residual additions: layer -> (delta_attn [d], delta_mlp [d])
    dra: Dict[int, Tuple[Tensor, Tensor]] = field(default_factory=dict)
    # low-rank deltas: (layer, proj) -> (A [d,r], B [r,d]) with proj in q/k/v/o
    lora: Dict[Tuple[int, str], Tuple[Tensor, Tensor]] = field(default_factory=dict)
    # bottleneck after the MLP residual: layer -> (w_down, b_down, w_up, b_up)
    adapter: Dict[int, Tuple[Tensor, Tensor, Tensor, Tensor]] = field(default_factory=dict)
    # key/value prefixes in post-projection space: layer -> (pk [m,d], pv [m,d])
    kv_prefix: Dict[int, Tuple[Tensor, Tensor]] = field(default_factory=dict)
    # learnable tokens inserted after CLS before block 0
    prompt_shallow: Optional[Tensor] = None
    # per-layer tokens replacing the previous layer's prompt outputs
    prompt_deep: Dict[int, Tensor] = field(default_factory=dict)

    def max_layer(self) -> int:
        layers = [-1]
        layers += list(self.attn_scale) + list(self.dra) + list(self.adapter)
        layers += list(self.kv_prefix) + list(self.prompt_deep)
        layers += [l for (l, _) in self.lora]
        return max(layers)


@dataclass
class ForwardOutput:
    cls_embeddings: Tensor  # [b, d]
    # post-softmax attention per layer: [b, n_h, n_q, n_k] arrays
    attention: Optional[List[np.ndarray]] = None
    # block outputs (pre final norm), populated on request
    hidden: Optional[List[Tensor]] = None


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[b, 3, H, W] pixels -> [b, n_patches, 3*patch*patch] row-major patches."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def _broadcast_tokens(tok: Tensor, batch: int) -> Tensor:
    """[m, d] learnable tokens -> [batch, m, d] with gradient flow."""
    m, d = tok.shape
    return T.add(Tensor(np.zeros((batch, m, d), dtype=T.current_dtype())),
                 T.reshape(tok, (1, m, d)))


def forward(
    model: ViTModel,
    images,
    hooks: Optional[ForwardHooks] = None,
    trace: bool = False,
    collect_hidden: bool = False,
) -> ForwardOutput:
    """Run the backbone; returns the final-norm CLS embedding.

    With all hooks at their neutral values the output equals the plain
    forward pass.
    """
    cfg = model.config
    p = model.params
    hooks = hooks or ForwardHooks()
    if hooks.max_layer() >= cfg.L:
        raise ConfigError(f"hook references layer {hooks.max_layer()} but model has {cfg.L}")

    if isinstance(images, Tensor):
        images = images.data
    images = np.asarray(images, dtype=T.current_dtype())
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    if c != 3 or h != cfg.image_size or w != cfg.image_size:
        raise T.DimensionError(
            f"expected images of shape [b, 3, {cfg.image_size}, {cfg.image_size}], got {images.shape}"
        )

    patches = Tensor(patchify(images, cfg.patch_size))
    x = T.add(T.matmul(patches, p["patch_embed.weight"]), p["patch_embed.bias"])
    cls = _broadcast_tokens(T.reshape(p["cls_token"], (1, cfg.d)), b)
    x = T.concat([cls, x], axis=1)
    x = T.add(x, p["pos_embed"])

    n_prompt = 0
    if hooks.prompt_shallow is not None:
        n_prompt = hooks.prompt_shallow.shape[0]
        x = T.concat(
            [x[:, :1], _broadcast_tokens(hooks.prompt_shallow, b), x[:, 1:]], axis=1
        )

    attn_maps: List[np.ndarray] = [] if trace else None
    hidden: List[Tensor] = [] if collect_hidden else None
    scale = 1.0 / math.sqrt(cfg.d_e)

    for i in range(cfg.L):
        if i in hooks.prompt_deep:
            prm = hooks.prompt_deep[i]
            pb = _broadcast_tokens(prm, b)
            if n_prompt == 0:
                x = T.concat([x[:, :1], pb, x[:, 1:]], axis=1)
                n_prompt = prm.shape[0]
            else:
                x = T.concat([x[:, :1], pb, x[:, 1 + n_prompt:]], axis=1)
        nt = x.shape[1]
        pre = f"blocks.{i}"

        h1 = T.layer_norm(x, p[f"{pre}.norm1.gamma"], p[f"{pre}.norm1.beta"], cfg.ln_eps)
        qkv = {}
        for proj in ("q", "k", "v"):
            out = T.add(T.matmul(h1, p[f"{pre}.attn.w_{proj}"]), p[f"{pre}.attn.b_{proj}"])
            if (i, proj) in hooks.lora:
                A, B = hooks.lora[(i, proj)]
                out = T.add(out, T.matmul(T.matmul(h1, A), B))
            qkv[proj] = out

        def split_heads(t, tokens):
            return T.swapaxes(T.reshape(t, (b, tokens, cfg.n_h, cfg.d_e)), 1, 2)

        q = split_heads(qkv["q"], nt)
        k = split_heads(qkv["k"], nt)
        v = split_heads(qkv["v"], nt)

        if i in hooks.kv_prefix:
            pk, pv = hooks.kv_prefix[i]
            m = pk.shape[0]
            pk_h = T.swapaxes(T.reshape(_broadcast_tokens(pk, b), (b, m, cfg.n_h, cfg.d_e)), 1, 2)
            pv_h = T.swapaxes(T.reshape(_broadcast_tokens(pv, b), (b, m, cfg.n_h, cfg.d_e)), 1, 2)
            k = T.concat([pk_h, k], axis=2)
            v = T.concat([pv_h, v], axis=2)

        scores = T.mul(T.matmul(q, T.swapaxes(k, 2, 3)), scale)
        if i in hooks.attn_scale:
            scaler = hooks.attn_scale[i]
            if scaler.ndim == 2:  # shared across heads
                scaler = T.reshape(scaler, (1, 1) + scaler.shape)
            else:
                scaler = T.reshape(scaler, (1,) + scaler.shape)
            scores = T.mul(scores, scaler)
        attn = T.softmax_rows(scores)
        if trace:
            attn_maps.append(attn.data.copy())

        ctx = T.matmul(attn, v)  # [b, n_h, nt, d_e]
        ctx = T.reshape(T.swapaxes(ctx, 1, 2), (b, nt, cfg.d))
        attn_out = T.add(T.matmul(ctx, p[f"{pre}.attn.w_o"]), p[f"{pre}.attn.b_o"])
        if (i, "o") in hooks.lora:
            A, B = hooks.lora[(i, "o")]
            attn_out = T.add(attn_out, T.matmul(T.matmul(ctx, A), B))
        if i in hooks.dra:
            attn_out = T.add(attn_out, hooks.dra[i][0])
        x = T.add(x, attn_out)

        h2 = T.layer_norm(x, p[f"{pre}.norm2.gamma"], p[f"{pre}.norm2.beta"], cfg.ln_eps)
        mid = T.gelu(T.add(T.matmul(h2, p[f"{pre}.mlp.fc1.weight"]), p[f"{pre}.mlp.fc1.bias"]))
        mlp_out = T.add(T.matmul(mid, p[f"{pre}.mlp.fc2.weight"]), p[f"{pre}.mlp.fc2.bias"])
        if i in hooks.dra:
            mlp_out = T.add(mlp_out, hooks.dra[i][1])
        x = T.add(x, mlp_out)

        if i in hooks.adapter:
            wd, bd, wu, bu = hooks.adapter[i]
            bottleneck = T.gelu(T.add(T.matmul(x, wd), bd))
            x = T.add(x, T.add(T.matmul(bottleneck, wu), bu))

        if collect_hidden:
            hidden.append(x)

    x = T.layer_norm(x, p["norm.gamma"], p["norm.beta"], cfg.ln_eps)
    cls_emb = x[:, 0, :]
    return ForwardOutput(cls_embeddings=cls_emb, attention=attn_maps, hidden=hidden)
