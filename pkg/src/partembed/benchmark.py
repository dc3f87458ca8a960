"""Few-shot segmentation transfer benchmark.

For each category and pretraining variant, a small labeled set is drawn from
the training split, the network is fine-tuned on it, and mean IoU is measured
on the untouched test split. Two axes: the number of labeled shapes, and the
number of labeled points on a fixed set of shapes. Every (category, value,
repeat) cell uses the same labeled selection across variants, so variant
comparisons are paired.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .ingest import DatasetSplit
from .network import PenConfig, init_params, load_checkpoint
from .training import (TrainConfig, TrainShape, finetune_segmentation,
                       predict_segmentation)

VARIANTS = ("scratch", "autoencoder", "leaf", "hierarchy", "tags", "hierarchy_tags")

# variants whose checkpoint is shared across categories
_GLOBAL_CKPT = ("autoencoder", "leaf", "hierarchy")
# variants whose checkpoint is category-specific (tag supervision)
_PER_CATEGORY_CKPT = ("tags", "hierarchy_tags")

CSV_HEADER = ("category", "variant", "axis", "value", "repeat", "miou", "seconds")


@dataclass
class BenchmarkSpec:
    categories: tuple[str, ...]
    variants: tuple[str, ...] = VARIANTS
    shape_axis: tuple[int, ...] = (4, 8, 12, 20, 40, 60, 120)
    point_axis: tuple[int, ...] = (20, 40, 60, 100, 200, 500)
    point_axis_shapes: int = 8
    axes: tuple[str, ...] = ("shapes", "points")
    repeats: int = 5
    seed: int = 0
    eval_points: int = 2048

    def __post_init__(self):
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise InputError(f"unknown variants {sorted(unknown)}")
        if set(self.axes) - {"shapes", "points"}:
            raise InputError("axes must be drawn from ('shapes', 'points')")


@dataclass
class MetricsTable:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for row in self.rows:
                w.writerow([row[k] for k in CSV_HEADER])

    @staticmethod
    def from_csv(path) -> "MetricsTable":
        table = MetricsTable()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_HEADER:
                raise InputError(f"{path}: unexpected CSV header {reader.fieldnames}")
            for row in reader:
                table.add(category=row["category"], variant=row["variant"], axis=row["axis"],
                          value=int(row["value"]), repeat=int(row["repeat"]),
                          miou=float(row["miou"]), seconds=float(row["seconds"]))
        return table

    def mean_miou(self, category: str, variant: str, axis: str, value: int) -> float:
        vals = [r["miou"] for r in self.rows
                if r["category"] == category and r["variant"] == variant
                and r["axis"] == axis and r["value"] == value]
        if not vals:
            raise InputError(f"no rows for {category}/{variant}/{axis}={value}")
        return float(np.mean(vals))

    def summary(self) -> dict:
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault((r["category"], r["variant"], r["axis"], r["value"]), []).append(r["miou"])
        return {
            "cells": [
                {"category": c, "variant": v, "axis": a, "value": x,
                 "mean_miou": float(np.mean(vals)), "std_miou": float(np.std(vals)),
                 "repeats": len(vals)}
                for (c, v, a, x), vals in sorted(groups.items())
            ]
        }


def miou(pred: np.ndarray, gt: np.ndarray, n_labels: int) -> float:
    """Mean intersection-over-union across label ids 0..n_labels-1 for one
    shape. Labels absent from both prediction and ground truth count as IoU 1
    (an empty union is a perfect match). Points with ground truth -1 are
    ignored."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise InputError("pred and gt must parallel each other")
    if len(pred) and (pred.min() < 0 or pred.max() >= n_labels or gt.max() >= n_labels):
        raise InputError(f"label id outside the {n_labels}-label set")
    valid = gt >= 0
    vals = []
    for c in range(n_labels):
        p = (pred == c) & valid
        g = gt == c
        union = int(np.sum(p | g))
        inter = int(np.sum(p & g))
        vals.append(1.0 if union == 0 else inter / union)
    return float(np.mean(vals))


def select_labeled_shapes(pool: Sequence[TrainShape], x: int,
                          rng: np.random.Generator) -> list[TrainShape]:
    """Draw x distinct shapes from the fine-tuning pool."""
    if x > len(pool):
        raise ConfigurationError(f"requested {x} labeled shapes, pool has {len(pool)}")
    idx = rng.choice(len(pool), size=x, replace=False)
    return [pool[i] for i in idx]


def select_labeled_points(shapes: Sequence[TrainShape], y: int,
                          rng: np.random.Generator) -> list[TrainShape]:
    """Copies of the shapes keeping only y labeled points each (the rest get
    label -1). Labeled sets are nested across increasing y for one generator
    sequence, since each shape draws a single permutation prefix."""
    out = []
    for s in shapes:
        n = len(s.cloud)
        keep = rng.permutation(n)[:min(y, n)]
        labels = np.full(n, -1, dtype=np.int64)
        labels[keep] = s.cloud.semantic_label[keep]
        cloud = s.cloud.take(np.arange(n))
        cloud.semantic_label = labels
        out.append(TrainShape(record=s.record, cloud=cloud,
                              dist_matrix=s.dist_matrix, tag_ids=s.tag_ids))
    return out


def resolve_checkpoints(spec: BenchmarkSpec, checkpoints: dict) -> dict:
    """Load every checkpoint the requested variants need, before any training
    runs. Global variants need one path; tag variants map category to path
    and silently skip categories without one (tags exist only for some).
    Missing or unreadable files raise naming everything missing at once."""
    loaded: dict = {}
    problems = []
    for variant in spec.variants:
        if variant == "scratch":
            continue
        if variant in _GLOBAL_CKPT:
            path = checkpoints.get(variant)
            if path is None or not Path(path).exists():
                problems.append(f"{variant}: missing checkpoint {path!r}")
                continue
            loaded[variant] = load_checkpoint(path)
        else:
            per_cat = checkpoints.get(variant) or {}
            if not isinstance(per_cat, dict):
                problems.append(f"{variant}: expected a category->path mapping")
                continue
            for cat, path in per_cat.items():
                if not Path(path).exists():
                    problems.append(f"{variant}/{cat}: missing checkpoint {path!r}")
                    continue
                loaded[(variant, cat)] = load_checkpoint(path)
    if problems:
        raise ConfigurationError("; ".join(problems))
    return loaded


def _category_classes(shapes: Sequence[TrainShape]) -> int:
    top = 0
    for s in shapes:
        if s.cloud.semantic_label is None:
            raise InputError(f"shape {s.record.shape_id} lacks semantic labels")
        top = max(top, int(s.cloud.semantic_label.max()))
    return top + 1


def _assemble_params(variant: str, ckpt, cat_cfg: PenConfig, rng_init) -> dict:
    """Fine-tuning parameter set: pretrained tensors where the variant has
    them, fresh initialization elsewhere (always the segmentation head; also
    the embedding decoder for the reconstruction baseline, which never
    trained one)."""
    fresh = init_params(cat_cfg, rng_init)
    if ckpt is None:
        return fresh
    loaded_params, _, _ = ckpt
    keep = ("enc", "lift") if variant == "autoencoder" else ("enc", "lift", "dec", "embed")
    out = {}
    for name, tensor in fresh.items():
        src = loaded_params.get(name)
        if src is not None and name.startswith(keep):
            if src.shape != tensor.shape:
                raise ConfigurationError(
                    f"{variant}: checkpoint tensor '{name}' has shape {src.shape}, "
                    f"fine-tuning config needs {tensor.shape}")
            out[name] = src.copy()
        else:
            out[name] = tensor
    return out


def _fresh_prefixes(variant: str) -> tuple[str, ...]:
    return ("seg", "dec", "embed") if variant == "autoencoder" else ("seg",)


def run_benchmark(shapes: Sequence[TrainShape], split: DatasetSplit, spec: BenchmarkSpec,
                  tc: TrainConfig, base_cfg: PenConfig, checkpoints: dict,
                  out_csv=None, out_summary=None) -> MetricsTable:
    """Run the transfer matrix and return one row per (category, variant,
    axis, value, repeat). ``checkpoints`` maps variant names to .npz paths
    (tag variants: {category: path}); all are validated up front."""
    loaded = resolve_checkpoints(spec, checkpoints)
    by_id = {s.record.shape_id: s for s in shapes}
    train_ids = [i for i in split.train if i in by_id]
    test_ids = [i for i in split.test if i in by_id]

    table = MetricsTable()
    for ci, cat in enumerate(spec.categories):
        pool = [by_id[i] for i in train_ids if by_id[i].category == cat]
        test = [by_id[i] for i in test_ids if by_id[i].category == cat]
        if not pool or not test:
            raise ConfigurationError(f"category {cat!r}: empty fine-tune pool or test set")
        assert not {s.record.shape_id for s in pool} & {s.record.shape_id for s in test}
        n_classes = _category_classes(pool + test)

        eval_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xE7A1, ci)))
        eval_idx = [np.sort(eval_rng.permutation(len(s.cloud))[:spec.eval_points]) for s in test]
        eval_pts = np.stack([s.cloud.points[idx] for s, idx in zip(test, eval_idx)])
        eval_gt = [s.cloud.semantic_label[idx] for s, idx in zip(test, eval_idx)]

        for axis in spec.axes:
            values = spec.shape_axis if axis == "shapes" else spec.point_axis
            for value in values:
                for r in range(spec.repeats):
                    select_rng = np.random.default_rng(
                        np.random.SeedSequence((spec.seed, 0x5E1, ci, 0 if axis == "shapes" else 1,
                                                value, r)))
                    if axis == "shapes":
                        labeled = select_labeled_shapes(pool, value, select_rng)
                    else:
                        fixed = select_labeled_shapes(pool, spec.point_axis_shapes, select_rng)
                        labeled = select_labeled_points(fixed, value, select_rng)
                    assert not {s.record.shape_id for s in labeled} & \
                        {s.record.shape_id for s in test}

                    for vi, variant in enumerate(spec.variants):
                        ckpt = loaded.get(variant) if variant in _GLOBAL_CKPT \
                            else loaded.get((variant, cat))
                        if variant != "scratch" and ckpt is None:
                            if variant in _PER_CATEGORY_CKPT:
                                continue  # category without tags
                            raise ConfigurationError(f"no checkpoint for variant {variant!r}")
                        t0 = time.perf_counter()
                        cfg_src = base_cfg if ckpt is None else ckpt[1]
                        cat_cfg = replace(cfg_src, n_classes=n_classes, n_tags=0, with_ae=False)
                        rng_init = np.random.default_rng(
                            np.random.SeedSequence((spec.seed, 0x171, ci, vi, value, r)))
                        params = _assemble_params(variant, ckpt, cat_cfg, rng_init)
                        ftc = replace(tc, seed=tc.seed + 1000 * r + value)
                        finetune_segmentation(params, cat_cfg, labeled, ftc,
                                              fresh_prefixes=_fresh_prefixes(variant),
                                              staged=(variant != "scratch"))
                        pred = predict_segmentation(params, cat_cfg, eval_pts,
                                                    microbatch=tc.microbatch)
                        scores = [miou(pred[i], eval_gt[i], n_classes) for i in range(len(test))]
                        table.add(category=cat, variant=variant, axis=axis, value=value,
                                  repeat=r, miou=float(np.mean(scores)),
                                  seconds=round(time.perf_counter() - t0, 3))
    if out_csv is not None:
        table.to_csv(out_csv)
    if out_summary is not None:
        Path(out_summary).write_text(json.dumps(table.summary(), indent=2, sort_keys=True) + "\n")
    return table
