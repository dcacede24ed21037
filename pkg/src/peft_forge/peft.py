"""Catalog of parameter-efficient fine-tuning methods.

Each method defines its added parameters, how they hook into the backbone
forward pass, and the exact set of trainable parameter names.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T, vit
from .tensor import Tensor
from .vit import ConfigError, ForwardHooks, ViTConfig, ViTModel, parameter_shapes

METHODS = (
    "full",
    "ln_tune",
    "attn_scale",
    "attn_scale_lite",
    "dra_only",
    "bias",
    "lora",
    "adapter",
    "ladder",
    "prompt_shallow",
    "prompt_deep",
    "ett_prefix",
)

# methods whose added parameters start at a neutral value, so the hooked
# forward pass equals the plain backbone at step 0
IDENTITY_AT_INIT = ("attn_scale", "attn_scale_lite", "dra_only", "lora", "adapter")


@dataclass(frozen=True)
class PEFTSpec:
    method: str
    reduction_dim: int = 8
    rank: int = 8
    prompt_len: int = 8
    # None means every layer
    insertion_mask: Optional[frozenset] = None
    # optional second method whose hooks/trainables are merged in
    combine: Optional[str] = None
    init_seed: int = 0
    # "prototype" or "random" prefix initialization for ett_prefix
    prefix_init: str = "prototype"

    def validate(self, cfg: ViTConfig) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown PEFT method '{self.method}'")
        if self.combine is not None and self.combine not in METHODS:
            raise ConfigError(f"unknown combined method '{self.combine}'")
        for v, label in ((self.reduction_dim, "reduction_dim"),
                         (self.rank, "rank"), (self.prompt_len, "prompt_len")):
            if v <= 0:
                raise ConfigError(f"{label} must be positive, got {v}")
        if self.insertion_mask is not None:
            bad = [i for i in self.insertion_mask if not 0 <= i < cfg.L]
            if bad:
                raise ConfigError(f"insertion_mask layers {bad} outside [0, {cfg.L})")

    def layers(self, cfg: ViTConfig) -> List[int]:
        if self.insertion_mask is None:
            return list(range(cfg.L))
        return sorted(self.insertion_mask)


@dataclass
class LadderNet:
    """Side network over gradient-detached backbone block outputs."""

    layers: List[int]
    params: Dict[str, Tensor]

    def feature(self, model: ViTModel, images, base_out=None) -> Tensor:
        """CLS feature: detached backbone embedding plus the ladder state."""
        if base_out is None:
            with T.no_grad():
                base_out = vit.forward(model, images, collect_hidden=True)
        b = base_out.cls_embeddings.shape[0]
        d = model.config.d
        state = Tensor(np.zeros((b, d), dtype=T.current_dtype()))
        for i in self.layers:
            h_cls = Tensor(base_out.hidden[i].data[:, 0, :])
            mid = T.gelu(T.add(T.matmul(T.add(h_cls, state),
                                        self.params[f"ladder.{i}.down.weight"]),
                               self.params[f"ladder.{i}.down.bias"]))
            up = T.add(T.matmul(mid, self.params[f"ladder.{i}.up.weight"]),
                       self.params[f"ladder.{i}.up.bias"])
            state = T.add(state, up)
        return T.add(Tensor(base_out.cls_embeddings.data), state)


@dataclass
class PEFTState:
    """Result of attaching a PEFT spec to a model."""

    spec: PEFTSpec
    model: ViTModel
    hooks: ForwardHooks
    trainable: Dict[str, Tensor]
    added: Dict[str, Tensor]
    ladder: Optional[LadderNet] = None

    def embed(self, images, trace: bool = False):
        """Support/query feature extractor under this PEFT configuration."""
        if self.ladder is not None:
            return self.ladder.feature(self.model, images)
        out = vit.forward(self.model, images, hooks=self.hooks, trace=trace)
        return out if trace else out.cls_embeddings

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable.values())


def _ln_names(cfg: ViTConfig, layers: List[int]) -> List[str]:
    names = []
    for i in layers:
        for blk in ("norm1", "norm2"):
            names += [f"blocks.{i}.{blk}.gamma", f"blocks.{i}.{blk}.beta"]
    if cfg.L - 1 in layers:
        names += ["norm.gamma", "norm.beta"]
    return names


def _bias_names(cfg: ViTConfig, layers: List[int]) -> List[str]:
    names = []
    for i in layers:
        names += [f"blocks.{i}.attn.b_{p}" for p in "qkvo"]
        names += [f"blocks.{i}.mlp.fc1.bias", f"blocks.{i}.mlp.fc2.bias"]
        names += [f"blocks.{i}.norm1.beta", f"blocks.{i}.norm2.beta"]
    if 0 in layers:
        names.append("patch_embed.bias")
    if cfg.L - 1 in layers:
        names.append("norm.beta")
    return names


def attach(
    spec: PEFTSpec,
    model: ViTModel,
    n_prefix: Optional[int] = None,
    prefix_values: Optional[np.ndarray] = None,
) -> PEFTState:
    """Build hooks, the trainable set, and the added-parameter store.

    ett_prefix needs the episode class count (`n_prefix`) and, for
    prototype initialization, the class-prototype embeddings.
    """
    cfg = model.config
    spec.validate(cfg)
    rng = np.random.default_rng(spec.init_seed)
    layers = spec.layers(cfg)
    hooks = ForwardHooks()
    trainable: Dict[str, Tensor] = {}
    added: Dict[str, Tensor] = {}
    ladder = None
    dt = T.current_dtype()

    def new_param(name, data):
        t = Tensor(np.asarray(data, dtype=dt), requires_grad=True, name=name)
        added[name] = t
        trainable[name] = t
        return t

    method = spec.method
    if method == "full":
        trainable.update(model.params)
    elif method == "ln_tune":
        for name in _ln_names(cfg, layers):
            trainable[name] = model.params[name]
    elif method == "bias":
        for name in _bias_names(cfg, layers):
            trainable[name] = model.params[name]
    elif method in ("attn_scale", "attn_scale_lite"):
        shape = (cfg.n_h, cfg.n, cfg.n) if method == "attn_scale" else (cfg.n, cfg.n)
        for i in layers:
            hooks.attn_scale[i] = new_param(f"attn_scale.{i}", np.ones(shape))
        _add_dra(hooks, trainable, added, cfg, layers, dt)
    elif method == "dra_only":
        _add_dra(hooks, trainable, added, cfg, layers, dt)
    elif method == "lora":
        for i in layers:
            for proj in "qkvo":
                A = new_param(f"lora.{i}.{proj}.A",
                              rng.normal(0, 0.02, size=(cfg.d, spec.rank)))
                B = new_param(f"lora.{i}.{proj}.B", np.zeros((spec.rank, cfg.d)))
                hooks.lora[(i, proj)] = (A, B)
    elif method == "adapter":
        r = spec.reduction_dim
        for i in layers:
            wd = new_param(f"adapter.{i}.down.weight", rng.normal(0, 0.02, size=(cfg.d, r)))
            bd = new_param(f"adapter.{i}.down.bias", np.zeros(r))
            wu = new_param(f"adapter.{i}.up.weight", np.zeros((r, cfg.d)))
            bu = new_param(f"adapter.{i}.up.bias", np.zeros(cfg.d))
            hooks.adapter[i] = (wd, bd, wu, bu)
    elif method == "ladder":
        r = spec.reduction_dim
        for i in layers:
            new_param(f"ladder.{i}.down.weight", rng.normal(0, 0.02, size=(cfg.d, r)))
            new_param(f"ladder.{i}.down.bias", np.zeros(r))
            new_param(f"ladder.{i}.up.weight", np.zeros((r, cfg.d)))
            new_param(f"ladder.{i}.up.bias", np.zeros(cfg.d))
        ladder = LadderNet(layers=layers, params=dict(added))
    elif method == "prompt_shallow":
        if spec.prompt_len >= cfg.n:
            raise ConfigError(
                f"prompt length {spec.prompt_len} exceeds context budget of {cfg.n} tokens"
            )
        hooks.prompt_shallow = new_param(
            "prompt", rng.normal(0, 0.02, size=(spec.prompt_len, cfg.d)))
    elif method == "prompt_deep":
        if spec.prompt_len >= cfg.n:
            raise ConfigError(
                f"prompt length {spec.prompt_len} exceeds context budget of {cfg.n} tokens"
            )
        for i in layers:
            hooks.prompt_deep[i] = new_param(
                f"prompt.{i}", rng.normal(0, 0.02, size=(spec.prompt_len, cfg.d)))
    elif method == "ett_prefix":
        if n_prefix is None:
            raise ConfigError("ett_prefix needs the episode class count (n_prefix)")
        if spec.prefix_init == "prototype":
            if prefix_values is None:
                raise ConfigError("prototype prefix init needs class prototypes")
            init = np.asarray(prefix_values, dtype=dt)
            if init.shape != (n_prefix, cfg.d):
                raise ConfigError(
                    f"prefix prototypes of shape {init.shape}, expected {(n_prefix, cfg.d)}"
                )
        else:
            init = rng.normal(0, 0.02, size=(n_prefix, cfg.d))
        for i in layers:
            pk = new_param(f"prefix.{i}.k", init.copy())
            pv = new_param(f"prefix.{i}.v", init.copy())
            hooks.kv_prefix[i] = (pk, pv)
        _add_dra(hooks, trainable, added, cfg, layers, dt)
    else:  # pragma: no cover
        raise ConfigError(f"unknown PEFT method '{method}'")

    if spec.combine is not None:
        sub = attach(dataclasses.replace(spec, method=spec.combine, combine=None),
                     model, n_prefix=n_prefix, prefix_values=prefix_values)
        _merge_hooks(hooks, sub.hooks)
        trainable.update(sub.trainable)
        added.update(sub.added)
        if sub.ladder is not None:
            ladder = sub.ladder

    return PEFTState(spec=spec, model=model, hooks=hooks, trainable=trainable,
                     added=added, ladder=ladder)


def _add_dra(hooks, trainable, added, cfg, layers, dt):
    for i in layers:
        da = Tensor(np.zeros(cfg.d, dtype=dt), requires_grad=True, name=f"dra.{i}.attn")
        dm = Tensor(np.zeros(cfg.d, dtype=dt), requires_grad=True, name=f"dra.{i}.mlp")
        for t in (da, dm):
            added[t.name] = t
            trainable[t.name] = t
        hooks.dra[i] = (da, dm)


def _merge_hooks(dst: ForwardHooks, src: ForwardHooks):
    for fld in ("attn_scale", "dra", "lora", "adapter", "kv_prefix", "prompt_deep"):
        d, s = getattr(dst, fld), getattr(src, fld)
        if set(d) & set(s):
            raise ConfigError(f"combined methods both hook '{fld}'")
        d.update(s)
    if src.prompt_shallow is not None:
        if dst.prompt_shallow is not None:
            raise ConfigError("combined methods both hook 'prompt_shallow'")
        dst.prompt_shallow = src.prompt_shallow


# -- parameter accounting ----------------------------------------------------


def count_report(spec: PEFTSpec, cfg: ViTConfig, n_prefix: int = 5) -> Dict[str, float]:
    """Exact added/trainable/total parameter counts and trainable ratio."""
    spec.validate(cfg)
    shapes = parameter_shapes(cfg)
    total = sum(int(np.prod(s)) for s in shapes.values())
    layers = spec.layers(cfg)
    nl = len(layers)

    def method_counts(method) -> Tuple[int, int]:
        """(added, trainable) for one method."""
        dra = 2 * cfg.d * nl
        if method == "full":
            return 0, total
        if method == "ln_tune":
            return 0, sum(int(np.prod(shapes[n])) for n in _ln_names(cfg, layers))
        if method == "bias":
            return 0, sum(int(np.prod(shapes[n])) for n in _bias_names(cfg, layers))
        if method == "attn_scale":
            a = cfg.n_h * cfg.n * cfg.n * nl + dra
            return a, a
        if method == "attn_scale_lite":
            a = cfg.n * cfg.n * nl + dra
            return a, a
        if method == "dra_only":
            return dra, dra
        if method == "lora":
            a = 4 * 2 * cfg.d * spec.rank * nl
            return a, a
        if method in ("adapter", "ladder"):
            a = (cfg.d * spec.reduction_dim + spec.reduction_dim
                 + spec.reduction_dim * cfg.d + cfg.d) * nl
            return a, a
        if method == "prompt_shallow":
            a = spec.prompt_len * cfg.d
            return a, a
        if method == "prompt_deep":
            a = spec.prompt_len * cfg.d * nl
            return a, a
        if method == "ett_prefix":
            a = 2 * n_prefix * cfg.d * nl + dra
            return a, a
        raise ConfigError(f"unknown PEFT method '{method}'")

    added, train = method_counts(spec.method)
    if spec.combine is not None:
        a2, t2 = method_counts(spec.combine)
        added += a2
        train += t2
    return {
        "added_params": added,
        "trainable_params": train,
        "total_params": total,
        "ratio": train / total,
    }
