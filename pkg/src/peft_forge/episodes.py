"""Few-shot episode construction: samplers, synthetic data, augmentations,
and image-folder ingestion."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Immutable pool of labelled images ([3, s, s] float32 in [0, 1])."""

    images: np.ndarray  # [m, 3, s, s]
    labels: np.ndarray  # [m]
    name: str = "dataset"

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def class_indices(self) -> Dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in range(self.n_classes)}


@dataclass
class Episode:
    n_classes: int
    support_images: np.ndarray  # [ms, 3, s, s]
    support_labels: np.ndarray  # [ms] in [0, n_classes)
    query_images: np.ndarray
    query_labels: np.ndarray
    domain: str = "synthetic"
    seed: int = 0


@dataclass
class SamplerConfig:
    way_range: Tuple[int, int] = (5, 5)
    shot_range: Tuple[int, int] = (1, 5)
    query_range: Tuple[int, int] = (5, 5)
    tasks_per_domain: int = 50
    seed: int = 0

    def validate(self):
        for lo, hi, label in (
            (*self.way_range, "way_range"),
            (*self.shot_range, "shot_range"),
            (*self.query_range, "query_range"),
        ):
            if lo <= 0 or hi < lo:
                raise DatasetError(f"{label} ({lo}, {hi}) must be a non-empty positive range")


@dataclass
class AugmentConfig:
    jitter: float = 0.4       # per-channel multiplicative strength s in [0, 1)
    translate: int = 4        # max |offset| in pixels

    def validate(self, image_size: Optional[int] = None):
        if not 0 <= self.jitter < 1:
            raise DatasetError(f"jitter strength {self.jitter} outside [0, 1)")
        if self.translate < 0:
            raise DatasetError("translation must be non-negative")
        if image_size is not None and self.translate >= image_size / 2:
            raise DatasetError(
                f"translation {self.translate} too large for {image_size}px images"
            )


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-split per-episode stream from one explicit seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def sample_episode(dataset: Dataset, cfg: SamplerConfig, rng: np.random.Generator,
                   seed: int = 0) -> Episode:
    """Variable-way, variable-shot episode with per-class (imbalanced) shots."""
    cfg.validate()
    n_min, n_max = cfg.way_range
    if dataset.n_classes < n_max:
        raise DatasetError(
            f"dataset has {dataset.n_classes} classes, sampler needs {n_max}"
        )
    by_class = dataset.class_indices()
    need = cfg.shot_range[0] + 1
    small = [c for c, idx in by_class.items() if len(idx) < need]
    if small:
        raise DatasetError(f"classes {small} have fewer than {need} examples")

    way = int(rng.integers(n_min, n_max + 1))
    chosen = rng.choice(dataset.n_classes, size=way, replace=False)
    sup_idx, sup_lab, qry_idx, qry_lab = [], [], [], []
    for new_label, c in enumerate(chosen):
        pool = by_class[c].copy()
        rng.shuffle(pool)
        k = int(rng.integers(cfg.shot_range[0], cfg.shot_range[1] + 1))
        k = min(k, len(pool) - 1)
        q = int(rng.integers(cfg.query_range[0], cfg.query_range[1] + 1))
        q = min(q, len(pool) - k)
        sup_idx += list(pool[:k])
        sup_lab += [new_label] * k
        qry_idx += list(pool[k:k + q])
        qry_lab += [new_label] * q
    return Episode(
        n_classes=way,
        support_images=dataset.images[sup_idx].copy(),
        support_labels=np.array(sup_lab, dtype=np.int64),
        query_images=dataset.images[qry_idx].copy(),
        query_labels=np.array(qry_lab, dtype=np.int64),
        domain=dataset.name,
        seed=seed,
    )


def synth_dataset(n_classes: int, per_class: int, image_size: int,
                  separation: float, rng, name: str = "synthetic",
                  class_seed_offset: int = 0) -> Dataset:
    """Gaussian-blob classes: each class has a fixed location/color pattern;
    `separation` scales its amplitude against unit-free pixel noise."""
    if separation < 0:
        raise DatasetError("separation must be non-negative")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    noise_sd = 0.1
    images, labels = [], []
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    for c in range(n_classes):
        crng = np.random.default_rng(
            np.random.SeedSequence(entropy=12897, spawn_key=(class_seed_offset + c,)))
        cy, cx = crng.uniform(0, image_size, size=2)
        sigma = image_size / 3.0
        color = crng.uniform(-1, 1, size=3)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2)))
        pattern = color[:, None, None] * blob[None]
        for _ in range(per_class):
            noise = rng.normal(0, noise_sd, size=(3, image_size, image_size))
            img = 0.5 + separation * noise_sd * pattern + noise
            images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
            labels.append(c)
    return Dataset(images=np.stack(images), labels=np.array(labels, dtype=np.int64),
                   name=name)


def augment(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-channel multiplicative color jitter and integer translation.

    Identity when jitter=0 and translate=0; output stays in [0, 1].
    """
    cfg.validate(images.shape[-1])
    out = np.empty_like(images)
    s, t = cfg.jitter, cfg.translate
    for i, img in enumerate(images):
        factors = rng.uniform(1 - s, 1 + s, size=(3, 1, 1)).astype(images.dtype)
        dy, dx = (int(v) for v in rng.integers(-t, t + 1, size=2))
        jittered = img * factors
        shifted = np.zeros_like(jittered)
        size = img.shape[-1]
        ys = slice(max(dy, 0), min(size + dy, size))
        yd = slice(max(-dy, 0), min(size - dy, size))
        xs = slice(max(dx, 0), min(size + dx, size))
        xd = slice(max(-dx, 0), min(size - dx, size))
        shifted[:, ys, xs] = jittered[:, yd, xd]
        out[i] = np.clip(shifted, 0.0, 1.0)
    return out


def load_image_folder(path, resize_to: int, skip_unreadable: bool = True,
                      normalize: Optional[Tuple[Sequence[float], Sequence[float]]] = None
                      ) -> Dataset:
    """Class-per-subfolder image directory -> dataset of [0,1] CHW tensors.

    Files are ordered lexicographically by path; unreadable files are
    skipped with a warning (or raise, per `skip_unreadable`).
    """
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class subdirectories under {root}")
    images, labels = [], []
    for label, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((resize_to, resize_to), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:
                if skip_unreadable:
                    warnings.warn(f"skipping unreadable image {f}: {exc}")
                    continue
                raise DatasetError(f"unreadable image {f}: {exc}") from exc
            arr = arr.transpose(2, 0, 1)
            if normalize is not None:
                mean, std = (np.asarray(v, dtype=np.float32).reshape(3, 1, 1)
                             for v in normalize)
                arr = (arr - mean) / std
            images.append(arr)
            labels.append(label)
    if not images:
        raise DatasetError(f"no decodable images under {root}")
    return Dataset(images=np.stack(images), labels=np.array(labels, dtype=np.int64),
                   name=root.name)


def folder_manifest(path) -> Dict:
    """Manifest of an image-folder dataset: paths, labels, content checksum."""
    root = Path(path)
    samples = []
    digest = hashlib.sha256()
    for label, cdir in enumerate(sorted(d for d in root.iterdir() if d.is_dir())):
        for f in sorted(cdir.iterdir()):
            if not f.is_file():
                continue
            samples.append({"path": str(f.relative_to(root)), "label": label})
            digest.update(f.name.encode())
            digest.update(f.read_bytes())
    return {"root": str(root), "samples": samples, "checksum": digest.hexdigest()}
