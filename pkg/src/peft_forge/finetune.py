"""Episode-level fine-tuning: Adam over the trainable set under the
Linear / ProtoAug / ProtoNCC algorithms, learning-rate selection, and
per-episode reporting."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import peft, tensor as T, vit
from .episodes import AugmentConfig, Episode, augment
from .peft import PEFTSpec, PEFTState, attach
from .tensor import Tensor
from .vit import ConfigError, ViTModel

ALGORITHMS = ("linear", "proto_aug", "proto_ncc")
DISTANCES = ("sq_euclidean", "cosine")


class NumericalAbort(RuntimeError):
    """A non-finite gradient was encountered; the episode is abandoned."""


@dataclass
class FinetuneConfig:
    algorithm: str = "proto_ncc"
    steps: int = 40
    lr_grid: Tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)
    n_validation_tasks: int = 5
    distance: str = "sq_euclidean"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown fine-tuning algorithm '{self.algorithm}'")
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown distance '{self.distance}'")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.lr_grid:
            raise ConfigError("lr_grid must be non-empty")


@dataclass
class EpisodeReport:
    accuracy: float
    losses: List[float]
    setup_time: float
    step_times: List[float]
    total_time: float
    lr: float
    trainable_params: int
    failed: bool = False
    failure: str = ""

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


# -- prototype machinery -----------------------------------------------------


def prototypes(embeddings: Tensor, labels: np.ndarray, n_classes: int) -> Tensor:
    """Per-class mean embedding, differentiable w.r.t. the embeddings."""
    labels = np.asarray(labels)
    m = embeddings.shape[0]
    weights = np.zeros((n_classes, m), dtype=T.current_dtype())
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise ConfigError(f"class {c} has no support examples")
        weights[c, idx] = 1.0 / len(idx)
    return T.matmul(Tensor(weights), embeddings)


def proto_classify(query_emb: Tensor, protos: Tensor,
                   distance: str = "sq_euclidean") -> Tuple[Tensor, np.ndarray]:
    """Logits are negative distances to prototypes; prediction is argmax."""
    if query_emb.shape[-1] != protos.shape[-1]:
        raise T.DimensionError(
            f"embedding dims differ: {query_emb.shape} vs {protos.shape}"
        )
    if distance == "sq_euclidean":
        q2 = T.tsum(T.square(query_emb), axis=-1, keepdims=True)      # [q, 1]
        p2 = T.reshape(T.tsum(T.square(protos), axis=-1), (1, -1))    # [1, N]
        qp = T.matmul(query_emb, T.transpose(protos))                 # [q, N]
        logits = T.add(T.mul(T.add(q2, p2), -1.0), T.mul(qp, 2.0))
    elif distance == "cosine":
        qn = T.div(query_emb, T.tsqrt(T.tsum(T.square(query_emb), axis=-1, keepdims=True)))
        pn = T.div(protos, T.tsqrt(T.tsum(T.square(protos), axis=-1, keepdims=True)))
        cos = T.matmul(qn, T.transpose(pn))
        logits = T.add(cos, -1.0)  # -(1 - cos)
    else:
        raise ConfigError(f"unknown distance '{distance}'")
    return logits, np.argmax(logits.data, axis=-1)


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction over a named parameter set."""

    def __init__(self, params: Dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericalAbort(f"non-finite gradient in '{name}'")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# -- episode fine-tuning -----------------------------------------------------


def _frozen_prototypes(model: ViTModel, episode: Episode) -> np.ndarray:
    """Class-mean CLS embeddings of the hook-free backbone (no gradients)."""
    with T.no_grad():
        emb = vit.forward(model, episode.support_images).cls_embeddings
        return prototypes(emb, episode.support_labels, episode.n_classes).data.copy()


def _attach_for_episode(spec: PEFTSpec, model: ViTModel, episode: Episode) -> PEFTState:
    needs_prefix = spec.method == "ett_prefix" or spec.combine == "ett_prefix"
    if needs_prefix:
        values = None
        if spec.prefix_init == "prototype":
            values = _frozen_prototypes(model, episode)
        return attach(spec, model, n_prefix=episode.n_classes, prefix_values=values)
    return attach(spec, model)


def _episode_loss(state: PEFTState, episode: Episode, cfg: FinetuneConfig,
                  head: Optional[Dict[str, Tensor]], rng) -> Tensor:
    if cfg.algorithm == "linear":
        emb = state.embed(episode.support_images)
        logits = T.add(T.matmul(emb, head["weight"]), head["bias"])
        return T.cross_entropy(logits, episode.support_labels)
    # proto family: prototypes from the clean support, pseudo-query from an
    # augmented copy (ProtoNCC uses zero-strength augmentation).
    aug_cfg = cfg.augment if cfg.algorithm == "proto_aug" else AugmentConfig(0.0, 0)
    pseudo_query = augment(episode.support_images, aug_cfg, rng)
    sup_emb = state.embed(episode.support_images)
    protos = prototypes(sup_emb, episode.support_labels, episode.n_classes)
    qry_emb = state.embed(pseudo_query)
    logits, _ = proto_classify(qry_emb, protos, cfg.distance)
    return T.cross_entropy(logits, episode.support_labels)


def _evaluate(state: PEFTState, episode: Episode, cfg: FinetuneConfig,
              head: Optional[Dict[str, Tensor]]) -> float:
    with T.no_grad():
        if cfg.algorithm == "linear":
            emb = state.embed(episode.query_images)
            logits = T.add(T.matmul(emb, head["weight"]), head["bias"])
            preds = np.argmax(logits.data, axis=-1)
        else:
            sup_emb = state.embed(episode.support_images)
            protos = prototypes(sup_emb, episode.support_labels, episode.n_classes)
            qry_emb = state.embed(episode.query_images)
            _, preds = proto_classify(qry_emb, protos, cfg.distance)
    return float(np.mean(preds == episode.query_labels))


def finetune_episode(model: ViTModel, spec: PEFTSpec, episode: Episode,
                     cfg: FinetuneConfig, lr: Optional[float] = None,
                     rng: Optional[np.random.Generator] = None) -> EpisodeReport:
    """Fine-tune the trainable set on one episode and evaluate the query set.

    All episode-mutated state (trainable backbone parameters included) is
    restored afterwards; the shared model is bitwise unchanged on return.
    """
    cfg.validate()
    if lr is None:
        lr = cfg.lr_grid[0]
    if rng is None:
        rng = np.random.default_rng(episode.seed)
    t0 = time.perf_counter()
    state = _attach_for_episode(spec, model, episode)

    head = None
    if cfg.algorithm == "linear":
        hrng = np.random.default_rng(spec.init_seed)
        head = {
            "weight": Tensor(hrng.normal(0, 0.02, (model.config.d, episode.n_classes))
                             .astype(T.current_dtype()), requires_grad=True, name="head.weight"),
            "bias": Tensor(np.zeros(episode.n_classes, dtype=T.current_dtype()),
                           requires_grad=True, name="head.bias"),
        }

    # episode-private snapshot of any backbone parameters we will train
    snapshot = {name: t.data.copy() for name, t in state.trainable.items()
                if name in model.params}
    prev_flags = {name: model.params[name].requires_grad for name in snapshot}
    for name in snapshot:
        model.params[name].requires_grad = True

    train_set = dict(state.trainable)
    if head is not None:
        train_set.update(head)
    opt = Adam(train_set, cfg.beta1, cfg.beta2, cfg.adam_eps)

    losses: List[float] = []
    step_times: List[float] = []
    failed, failure = False, ""
    setup_time = time.perf_counter() - t0
    try:
        for _ in range(cfg.steps):
            ts = time.perf_counter()
            opt.zero_grad()
            loss = _episode_loss(state, episode, cfg, head, rng)
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
            step_times.append(time.perf_counter() - ts)
        accuracy = _evaluate(state, episode, cfg, head)
    except NumericalAbort as exc:
        failed, failure, accuracy = True, str(exc), 0.0
    finally:
        for name, data in snapshot.items():
            model.params[name].data = data
            model.params[name].grad = None
            model.params[name].requires_grad = prev_flags[name]
    return EpisodeReport(
        accuracy=accuracy,
        losses=losses,
        setup_time=setup_time,
        step_times=step_times,
        total_time=time.perf_counter() - t0,
        lr=lr,
        trainable_params=sum(t.size for t in train_set.values()),
        failed=failed,
        failure=failure,
    )


def select_lr(model: ViTModel, spec: PEFTSpec, validation_tasks: Sequence[Episode],
              cfg: FinetuneConfig) -> float:
    """Grid-search the learning rate on fixed validation tasks.

    Returns the argmax of mean validation query accuracy; ties break toward
    the smaller rate. A single-element grid is returned without any runs.
    """
    cfg.validate()
    grid = sorted(cfg.lr_grid)
    if len(grid) == 1:
        return grid[0]
    tasks = list(validation_tasks)[: cfg.n_validation_tasks]
    best_lr, best_acc = grid[0], -1.0
    for lr in grid:
        accs = [finetune_episode(model, spec, ep, cfg, lr=lr).accuracy for ep in tasks]
        mean = float(np.mean(accs)) if accs else 0.0
        if mean > best_acc:
            best_lr, best_acc = lr, mean
    return best_lr
