"""Command-line front end for episodic fine-tuning experiments.

Configuration file schema (TOML)::

    seed = 0                       # mandatory (here, via --seed, or PEFT_FORGE_SEED)

    [backbone]
    size = "tiny"                  # tiny | vit_s_16 | vit_b_16
    weights = "random:0"           # "random:<seed>" or path to a .pfwa archive

    [dataset]
    source = "synth"               # "synth" or a class-per-subfolder image directory
    classes = 6                    # synth only
    per_class = 20                 # synth only
    separation = 4.0               # synth only
    name = "synthetic"             # domain label in reports

    [sampler]
    way_range = [5, 5]
    shot_range = [1, 5]
    query_range = [5, 5]
    tasks_per_domain = 10

    [peft]
    methods = ["ln_tune"]          # any of the registered method names
    rank = 8
    reduction_dim = 8
    prompt_len = 8
    insertion_mask = []            # empty = all layers

    [finetune]
    algorithm = "proto_ncc"        # linear | proto_aug | proto_ncc
    steps = 40
    lr_grid = [1e-4, 1e-3, 1e-2, 1e-1]
    n_validation_tasks = 5
    distance = "sq_euclidean"

    [output]
    dir = "results"

Flag overrides: --seed, --method, --episodes, --out. The environment
variable PEFT_FORGE_SEED overrides the file seed; --seed overrides both.

Exit codes: 0 success, 2 configuration error, 3 dataset error,
4 results-store error, 5 numerical failure, 1 internal error. Failures
print one machine-parseable line to stderr: ``error:<category>: <details>``.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import analysis, results as store, vit
from .archive import ArchiveError, load_archive
from .episodes import Dataset, DatasetError, SamplerConfig, episode_rng, load_image_folder, sample_episode, synth_dataset
from .finetune import FinetuneConfig, NumericalAbort, finetune_episode, select_lr
from .peft import METHODS, PEFTSpec, count_report
from .vit import TINY, VIT_B_16, VIT_S_16, ConfigError, ViTModel

BACKBONES = {"tiny": TINY, "vit_s_16": VIT_S_16, "vit_b_16": VIT_B_16}

DEFAULTS: Dict = {
    "backbone": {"size": "tiny", "weights": "random:0"},
    "dataset": {"source": "synth", "classes": 6, "per_class": 20,
                "separation": 4.0, "name": "synthetic"},
    "sampler": {"way_range": [5, 5], "shot_range": [1, 5],
                "query_range": [5, 5], "tasks_per_domain": 10},
    "peft": {"methods": ["ln_tune"], "rank": 8, "reduction_dim": 8,
             "prompt_len": 8, "insertion_mask": []},
    "finetune": {"algorithm": "proto_ncc", "steps": 40,
                 "lr_grid": [1e-4, 1e-3, 1e-2, 1e-1],
                 "n_validation_tasks": 5, "distance": "sq_euclidean"},
    "output": {"dir": "results"},
}


class CLIError(RuntimeError):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def load_config(path: Optional[str]) -> Dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as f:
                user = tomllib.load(f)
        except OSError as exc:
            raise CLIError("config", f"cannot read config file: {exc}", 2)
        except tomllib.TOMLDecodeError as exc:
            raise CLIError("config", f"malformed config file: {exc}", 2)
        for section, values in user.items():
            if isinstance(values, dict):
                cfg.setdefault(section, {}).update(values)
            else:
                cfg[section] = values
    return cfg


def resolve_seed(args, cfg: Dict) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PEFT_FORGE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CLIError("config", f"PEFT_FORGE_SEED is not an integer: {env!r}", 2)
    return cfg.get("seed")


def validate_config(cfg: Dict) -> List[str]:
    """Collect every problem, not just the first."""
    problems = []
    if not isinstance(cfg.get("seed"), int):
        problems.append("seed: mandatory integer (set in file, --seed, or PEFT_FORGE_SEED)")
    bb = cfg["backbone"]
    if bb["size"] not in BACKBONES:
        problems.append(f"backbone.size: unknown '{bb['size']}' (choose from {sorted(BACKBONES)})")
    w = bb["weights"]
    if w.startswith("random:"):
        if not w.split(":", 1)[1].isdigit():
            problems.append(f"backbone.weights: bad random spec '{w}' (expected random:<int>)")
    elif not Path(w).is_file():
        problems.append(f"backbone.weights: archive not found: '{w}'")
    ds = cfg["dataset"]
    if ds["source"] != "synth" and not Path(ds["source"]).is_dir():
        problems.append(f"dataset.source: directory not found: '{ds['source']}'")
    if ds["source"] == "synth":
        if ds["classes"] < 2:
            problems.append("dataset.classes: need at least 2 classes")
        if ds["per_class"] < 2:
            problems.append("dataset.per_class: need at least 2 images per class")
    sp = cfg["sampler"]
    for key in ("way_range", "shot_range", "query_range"):
        r = sp[key]
        if len(r) != 2 or r[0] > r[1] or r[0] < 1:
            problems.append(f"sampler.{key}: invalid range {r}")
    if sp["tasks_per_domain"] < 0:
        problems.append("sampler.tasks_per_domain: must be >= 0")
    pf = cfg["peft"]
    for m in pf["methods"]:
        if m not in METHODS:
            problems.append(f"peft.methods: unknown method '{m}' (choose from {sorted(METHODS)})")
    ft = cfg["finetune"]
    if ft["algorithm"] not in ("linear", "proto_aug", "proto_ncc"):
        problems.append(f"finetune.algorithm: unknown '{ft['algorithm']}'")
    if ft["steps"] < 0:
        problems.append("finetune.steps: must be >= 0")
    if not ft["lr_grid"] or any(lr <= 0 for lr in ft["lr_grid"]):
        problems.append(f"finetune.lr_grid: must be non-empty and positive, got {ft['lr_grid']}")
    return problems


def build_model(cfg: Dict) -> ViTModel:
    vcfg = BACKBONES[cfg["backbone"]["size"]]
    w = cfg["backbone"]["weights"]
    if w.startswith("random:"):
        return ViTModel.random_init(vcfg, seed=int(w.split(":", 1)[1]))
    return vit.load_weights(load_archive(w), vcfg)


def build_dataset(cfg: Dict) -> Dataset:
    ds = cfg["dataset"]
    image_size = BACKBONES[cfg["backbone"]["size"]].image_size
    if ds["source"] == "synth":
        return synth_dataset(ds["classes"], ds["per_class"], image_size,
                             separation=ds["separation"], rng=cfg["seed"],
                             name=ds["name"])
    return load_image_folder(ds["source"], resize_to=image_size)


def make_specs(cfg: Dict, method_override: Optional[str]) -> List[PEFTSpec]:
    pf = cfg["peft"]
    methods = [method_override] if method_override else pf["methods"]
    mask = frozenset(pf["insertion_mask"]) if pf["insertion_mask"] else None
    return [PEFTSpec(m, rank=pf["rank"], reduction_dim=pf["reduction_dim"],
                     prompt_len=pf["prompt_len"], insertion_mask=mask)
            for m in methods]


def make_finetune_config(cfg: Dict) -> FinetuneConfig:
    ft = cfg["finetune"]
    return FinetuneConfig(algorithm=ft["algorithm"], steps=ft["steps"],
                          lr_grid=tuple(ft["lr_grid"]),
                          n_validation_tasks=ft["n_validation_tasks"],
                          distance=ft["distance"])


def sampler_config(cfg: Dict) -> SamplerConfig:
    sp = cfg["sampler"]
    return SamplerConfig(way_range=tuple(sp["way_range"]),
                         shot_range=tuple(sp["shot_range"]),
                         query_range=tuple(sp["query_range"]),
                         tasks_per_domain=sp["tasks_per_domain"],
                         seed=cfg["seed"])


def out_dir(cfg: Dict, args) -> Path:
    d = Path(args.out) if args.out else Path(cfg["output"]["dir"])
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError("store", f"cannot create output directory '{d}': {exc}", 4)
    return d


def _episodes(cfg: Dict, dataset: Dataset, n: int, base: int = 0):
    scfg = sampler_config(cfg)
    seed = cfg["seed"]
    return [sample_episode(dataset, scfg, episode_rng(seed, base + i), seed=seed)
            for i in range(n)]


def _pick_lr(model, spec, cfg, dataset, ft_cfg) -> float:
    if len(ft_cfg.lr_grid) == 1:
        return ft_cfg.lr_grid[0]
    val = _episodes(cfg, dataset, ft_cfg.n_validation_tasks, base=100_000)
    return select_lr(model, spec, val, ft_cfg)


# -- subcommands --------------------------------------------------------------


def cmd_finetune(cfg: Dict, args) -> int:
    model = build_model(cfg)
    dataset = build_dataset(cfg)
    ft_cfg = make_finetune_config(cfg)
    n = args.episodes if args.episodes is not None else cfg["sampler"]["tasks_per_domain"]
    d = out_dir(cfg, args)
    h = store.config_hash(cfg)
    path = d / "results.jsonl"
    for spec in make_specs(cfg, args.method):
        lr = _pick_lr(model, spec, cfg, dataset, ft_cfg)
        accs = []
        for i, ep in enumerate(_episodes(cfg, dataset, n)):
            rep = finetune_episode(model, spec, ep, ft_cfg, lr=lr,
                                   rng=episode_rng(cfg["seed"], 500_000 + i))
            store.append_report(path, {
                "experiment_id": h[:12], "config_hash": h, "method": spec.method,
                "domain": dataset.name, "episode_index": i, "seed": cfg["seed"],
                "report": rep.to_dict(),
            })
            accs.append(rep.accuracy)
        mean = float(np.mean(accs)) if accs else float("nan")
        print(f"method={spec.method} episodes={n} lr={lr:g} mean_accuracy={mean:.4f}")
    print(f"results appended to {path}")
    return 0


def cmd_sweep_layers(cfg: Dict, args) -> int:
    model = build_model(cfg)
    dataset = build_dataset(cfg)
    ft_cfg = make_finetune_config(cfg)
    n = args.episodes if args.episodes is not None else cfg["sampler"]["tasks_per_domain"]
    d = out_dir(cfg, args)
    spec = make_specs(cfg, args.method)[0]
    episodes = _episodes(cfg, dataset, n)
    rows = analysis.layer_sweep(spec, model, episodes, ft_cfg,
                                lr=ft_cfg.lr_grid[0])
    path = d / "layer_sweep.csv"
    analysis.write_csv(path, rows)
    for r in rows:
        print(f"position={r.position} mean_accuracy={r.mean_accuracy:.4f}")
    print(f"sweep written to {path}")
    return 0


def cmd_analyze_heads(cfg: Dict, args) -> int:
    model = build_model(cfg)
    dataset = build_dataset(cfg)
    n_img = min(args.images, len(dataset.images))
    images = dataset.images[:n_img]
    d = out_dir(cfg, args)
    payload = {}
    for layer in range(model.config.L):
        cm = analysis.head_correlation(model, images, layer)
        cm.check(tol=1e-5)
        m = cm.matrix
        off = (m.sum() - np.trace(m)) / max(m.size - len(m), 1)
        payload[f"layer_{layer}"] = {"matrix": m.tolist(),
                                     "mean_off_diagonal": float(off)}
        print(f"layer={layer} mean_off_diagonal={off:.4f}")
    path = d / "head_correlation.json"
    analysis.write_json_summary(path, payload)
    print(f"correlations written to {path}")
    return 0


def cmd_bench_speed(cfg: Dict, args) -> int:
    model = build_model(cfg)
    dataset = build_dataset(cfg)
    ft_cfg = make_finetune_config(cfg)
    n = args.episodes if args.episodes is not None else cfg["sampler"]["tasks_per_domain"]
    d = out_dir(cfg, args)
    specs = make_specs(cfg, args.method)
    if all(s.method != "full" for s in specs):
        specs.insert(0, PEFTSpec("full"))
    episodes = _episodes(cfg, dataset, max(n, 2))
    rows = analysis.bench_speedup(specs, model, episodes, ft_cfg,
                                  warmup=1, lr=ft_cfg.lr_grid[0])
    path = d / "bench_speed.csv"
    analysis.write_csv(path, rows)
    for r in rows:
        print(f"method={r.method} median_step_time={r.median_step_time:.6f}s "
              f"speedup_vs_full={r.speedup_vs_full:.2f}x")
    print(f"benchmark written to {path}")
    return 0


def cmd_count_params(cfg: Dict, args) -> int:
    vcfg = BACKBONES[cfg["backbone"]["size"]]
    for spec in make_specs(cfg, args.method):
        rep = count_report(spec, vcfg)
        print(f"method={spec.method} trainable={rep['trainable_params']} "
              f"added={rep['added_params']} total={rep['total_params']} "
              f"ratio={rep['ratio']:.6f}")
    return 0


def cmd_sample_tasks(cfg: Dict, args) -> int:
    dataset = build_dataset(cfg)
    n = args.episodes if args.episodes is not None else cfg["sampler"]["tasks_per_domain"]
    for i, ep in enumerate(_episodes(cfg, dataset, n)):
        shots = [int((ep.support_labels == c).sum()) for c in range(ep.n_classes)]
        print(json.dumps({"episode": i, "way": ep.n_classes, "shots": shots,
                          "queries": len(ep.query_labels)}))
    return 0


def cmd_summarize(cfg: Dict, args) -> int:
    d = out_dir(cfg, args)
    path = d / "results.jsonl"
    if not path.is_file():
        raise CLIError("store", f"no results store at '{path}'", 4)
    records, skipped = store.read_reports(path)
    store.check_integrity(records)
    rows = store.summarize(records)
    csv_path = d / "summary.csv"
    store.write_summary_csv(csv_path, rows)
    print("domain,method,episodes,mean_accuracy,ci95")
    for r in rows:
        print(f"{r['domain']},{r['method']},{r['episodes']},"
              f"{r['mean_accuracy']},{r['ci95']}")
    if skipped:
        print(f"warning: skipped {skipped} malformed line(s)", file=sys.stderr)
    print(f"summary written to {csv_path}")
    return 0


COMMANDS = {
    "finetune": cmd_finetune,
    "sweep-layers": cmd_sweep_layers,
    "analyze-heads": cmd_analyze_heads,
    "bench-speed": cmd_bench_speed,
    "count-params": cmd_count_params,
    "sample-tasks": cmd_sample_tasks,
    "summarize": cmd_summarize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peft-forge",
        description="Episodic fine-tuning experiments with parameter-efficient methods.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--method", default=None, choices=sorted(METHODS))
        p.add_argument("--episodes", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if name == "analyze-heads":
            p.add_argument("--images", type=int, default=8)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg["seed"] = resolve_seed(args, cfg)
        problems = validate_config(cfg)
        if problems:
            raise CLIError("config", "; ".join(problems), 2)
        return COMMANDS[args.command](cfg, args)
    except CLIError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ArchiveError) as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(f"error:dataset: {exc}", file=sys.stderr)
        return 3
    except store.StoreError as exc:
        print(f"error:store: {exc}", file=sys.stderr)
        return 4
    except NumericalAbort as exc:
        print(f"error:numerical: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
