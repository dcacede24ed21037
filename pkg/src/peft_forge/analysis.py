"""Analytical instruments: head-correlation matrices, method-ranking
consistency, layer-position sweeps, and speedup benchmarking."""

from __future__ import annotations

import csv
import dataclasses
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import vit
from .episodes import Episode
from .finetune import FinetuneConfig, finetune_episode
from .peft import PEFTSpec
from .vit import ViTModel


class AnalysisError(ValueError):
    pass


# -- correlation statistics --------------------------------------------------


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise AnalysisError(f"need two equal-length vectors, got {x.shape} and {y.shape}")
    xc, yc = x - x.mean(), y - y.mean()
    vx, vy = (xc * xc).sum(), (yc * yc).sum()
    if vx == 0.0 or vy == 0.0:
        raise AnalysisError("correlation undefined for zero-variance input")
    return float((xc * yc).sum() / np.sqrt(vx * vy))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties assigned their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rho: Pearson correlation of average-tied ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise AnalysisError(f"mismatched vectors: {a.shape} vs {b.shape}")
    return pearson(_average_ranks(a), _average_ranks(b))


# -- attention-head similarity ------------------------------------------------


@dataclass
class CorrelationMatrix:
    layer: int
    matrix: np.ndarray  # [n_h, n_h], averaged over examples
    n_examples: int

    def check(self, tol: float = 1e-6):
        m = self.matrix
        if not np.allclose(m, m.T, atol=tol):
            raise AnalysisError("correlation matrix is not symmetric")
        if np.abs(np.diag(m) - 1.0).max() > tol:
            raise AnalysisError("correlation matrix diagonal is not 1")
        if m.min() < -1 - tol or m.max() > 1 + tol:
            raise AnalysisError("correlation entries outside [-1, 1]")


def head_correlation(model: ViTModel, images: np.ndarray, layer: int) -> CorrelationMatrix:
    """Pairwise Pearson correlation between flattened post-softmax attention
    maps of all head pairs in one layer, averaged over examples."""
    cfg = model.config
    if not 0 <= layer < cfg.L:
        raise AnalysisError(f"layer {layer} outside [0, {cfg.L})")
    out = vit.forward(model, images, trace=True)
    maps = out.attention[layer]  # [b, n_h, n, n]
    b, n_h = maps.shape[:2]
    acc = np.zeros((n_h, n_h), dtype=np.float64)
    for ex in range(b):
        flat = maps[ex].reshape(n_h, -1)
        for i in range(n_h):
            acc[i, i] += 1.0
            for j in range(i + 1, n_h):
                r = pearson(flat[i], flat[j])
                acc[i, j] += r
                acc[j, i] += r
    return CorrelationMatrix(layer=layer, matrix=acc / b, n_examples=b)


def head_correlation_bruteforce(model: ViTModel, images: np.ndarray,
                                layer: int) -> np.ndarray:
    """Direct-formula recomputation used as an equivalence oracle."""
    maps = vit.forward(model, images, trace=True).attention[layer]
    b, n_h = maps.shape[:2]
    acc = np.zeros((n_h, n_h))
    for ex in range(b):
        for i in range(n_h):
            for j in range(n_h):
                x = maps[ex, i].ravel().astype(np.float64)
                y = maps[ex, j].ravel().astype(np.float64)
                num = np.mean((x - x.mean()) * (y - y.mean()))
                acc[i, j] += num / (x.std() * y.std())
    return acc / b


# -- method-ranking consistency ----------------------------------------------


@dataclass
class RankTable:
    methods: List[str]
    # configuration name -> mean accuracy per method (aligned with `methods`)
    accuracies: Dict[str, List[float]]
    rankings: Dict[str, List[int]] = field(default_factory=dict)
    spearman_rho: Dict[Tuple[str, str], float] = field(default_factory=dict)


def rank_methods(results: Dict[str, Dict[str, float]]) -> RankTable:
    """Rank methods by mean accuracy per configuration and compute the
    pairwise Spearman correlation between configurations."""
    configs = sorted(results)
    if not configs:
        raise AnalysisError("no results to rank")
    methods = sorted(results[configs[0]])
    for c in configs:
        if sorted(results[c]) != methods:
            raise AnalysisError(
                f"configuration '{c}' reports a different method set"
            )
    table = RankTable(methods=methods,
                      accuracies={c: [results[c][m] for m in methods] for c in configs})
    for c in configs:
        accs = np.array(table.accuracies[c])
        # rank 1 = best
        order = np.argsort(-accs, kind="stable")
        ranks = np.empty(len(methods), dtype=int)
        ranks[order] = np.arange(1, len(methods) + 1)
        table.rankings[c] = list(ranks)
    for i, a in enumerate(configs):
        for b in configs[i + 1:]:
            rho = spearman(table.accuracies[a], table.accuracies[b])
            table.spearman_rho[(a, b)] = rho
    return table


# -- layer-position sweep -----------------------------------------------------


@dataclass
class SweepRow:
    position: int
    mean_accuracy: float
    episode_count: int


def layer_sweep(spec: PEFTSpec, model: ViTModel, episodes: Sequence[Episode],
                cfg: FinetuneConfig, lr: Optional[float] = None) -> List[SweepRow]:
    """Insert the PEFT in the final layer plus one earlier layer k and
    report mean query accuracy per position k."""
    L = model.config.L
    if L < 2:
        raise AnalysisError("layer sweep needs at least 2 layers")
    rows = []
    for k in range(L - 1):
        masked = dataclasses.replace(spec, insertion_mask=frozenset({k, L - 1}))
        accs = [finetune_episode(model, masked, ep, cfg, lr=lr).accuracy
                for ep in episodes]
        rows.append(SweepRow(position=k, mean_accuracy=float(np.mean(accs)),
                             episode_count=len(accs)))
    return rows


# -- speedup benchmarking -----------------------------------------------------


@dataclass
class BenchRow:
    method: str
    median_step_time: float
    setup_time: float
    speedup_vs_full: float


def bench_speedup(specs: Sequence[PEFTSpec], model: ViTModel,
                  episodes: Sequence[Episode], cfg: FinetuneConfig,
                  warmup: int = 1, lr: Optional[float] = None) -> List[BenchRow]:
    """Median per-step fine-tuning time per method; ratio against full
    fine-tuning. Warmup episodes are excluded from timing."""
    step_times: Dict[str, List[float]] = {}
    setup: Dict[str, List[float]] = {}
    for spec in specs:
        key = spec.method if spec.combine is None else f"{spec.method}+{spec.combine}"
        step_times[key], setup[key] = [], []
        for idx, ep in enumerate(episodes):
            rep = finetune_episode(model, spec, ep, cfg, lr=lr)
            if idx < warmup:
                continue
            step_times[key] += rep.step_times
            setup[key].append(rep.setup_time)
    full_median = None
    if "full" in step_times and step_times["full"]:
        full_median = statistics.median(step_times["full"])
    rows = []
    for key, times in step_times.items():
        med = statistics.median(times) if times else float("nan")
        ratio = full_median / med if full_median and med else float("nan")
        rows.append(BenchRow(method=key, median_step_time=med,
                             setup_time=float(np.mean(setup[key])) if setup[key] else 0.0,
                             speedup_vs_full=ratio))
    return rows


def write_csv(path, rows: Sequence) -> None:
    """One CSV row per measurement; rows are dataclass instances."""
    if not rows:
        raise AnalysisError("no rows to write")
    dicts = [dataclasses.asdict(r) for r in rows]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(dicts[0]))
        writer.writeheader()
        writer.writerows(dicts)


def write_json_summary(path, payload: dict) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)
        raise TypeError(f"cannot serialize {type(o)!r}")

    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True,
                                     default=default) + "\n")


def mean_ci95(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and 95% confidence half-width of the mean."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    if len(v) == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / np.sqrt(len(v)))
