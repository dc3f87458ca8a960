"""Training loops: metric pretraining, tag and segmentation fine-tuning,
and the reconstruction baseline.

All loops share the same skeleton: shuffle shapes, subsample a fixed number
of points per shape each step, run the batch through the network in
microbatch chunks (gradients are sums over shapes, so chunking is exact),
take one Adam step per batch, and watch a validation loss for plateaus.
Validation fixtures (point subsets, triplets) are frozen once per run so the
validation loss is a pure function of the parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, SamplingError, TrainingError
from .geometry import PointCloud, normalize_cloud, sample_surface
from .hierarchy import leaves
from .ingest import (ShapeRecord, TagVocabulary, label_points_with_tags,
                     tag_sufficiency)
from .network import (AdamState, PenConfig, adam_step, ae_backward, ae_forward,
                      backward_embed, backward_trunk, chamfer_batch_and_grad,
                      forward_embed, forward_trunk, head_backward, head_forward,
                      seg_loss_and_grad, tag_loss_and_grad, triplet_loss_and_grad)
from .triplets import (LeafIndex, TripletBatch, build_pair_distribution,
                       leaf_tree_distances, sample_triplets)


@dataclass
class TrainConfig:
    """Knobs for every loop. Defaults follow the full-scale recipe: Adam at
    0.01 divided by 10 on validation plateau, 32-shape batches, 2500-point
    subsamples, a constant number of triplets per shape."""

    lr: float = 0.01
    decay_factor: float = 10.0
    plateau_patience: int = 5
    plateau_rel_threshold: float = 1e-4
    min_lr: float = 1e-5
    stop_decays_below: int = 2
    batch_shapes: int = 32
    subsample_points: int = 2500
    triplets_per_shape: int = 512
    margin: float = 0.2
    max_epochs: int = 100
    seed: int = 0
    strategy: str = "hierarchy"
    microbatch: int = 8
    trunk_lr_scale: float = 0.1
    freeze_trunk: bool = False
    head_epochs: int = 10          # stage one of staged fine-tuning

    def __post_init__(self):
        for name in ("batch_shapes", "subsample_points", "triplets_per_shape",
                     "max_epochs", "microbatch"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        if self.decay_factor <= 1.0:
            raise InputError("decay_factor must exceed 1")


class PlateauScheduler:
    """Divide the learning rate when the watched loss stops improving.

    An epoch improves when its loss beats the best seen by more than the
    relative threshold. ``patience`` non-improving epochs trigger one decay;
    ``observe`` returns True once ``stop_decays_below`` decays have landed
    below ``min_lr``.
    """

    def __init__(self, lr: float, decay_factor: float = 10.0, patience: int = 5,
                 rel_threshold: float = 1e-4, min_lr: float = 1e-5,
                 stop_decays_below: int = 2):
        self.lr = lr
        self.decay_factor = decay_factor
        self.patience = patience
        self.rel_threshold = rel_threshold
        self.min_lr = min_lr
        self.stop_decays_below = stop_decays_below
        self.best = np.inf
        self.bad_epochs = 0
        self.decays = 0
        self.decays_below = 0

    def observe(self, loss: float) -> bool:
        # against inf the relative margin is nan; any finite loss improves
        bar = self.best - self.rel_threshold * abs(self.best) if np.isfinite(self.best) else self.best
        if loss < bar:
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr /= self.decay_factor
            self.decays += 1
            self.bad_epochs = 0
            if self.lr < self.min_lr:
                self.decays_below += 1
                if self.decays_below >= self.stop_decays_below:
                    return True
        return False


@dataclass
class TrainShape:
    """A shape prepared for training: normalized cloud plus cached leaf
    tree-distance matrix (rows/cols follow the tree's leaf list)."""

    record: ShapeRecord
    cloud: PointCloud
    dist_matrix: np.ndarray
    tag_ids: Optional[np.ndarray] = None

    @property
    def category(self) -> str:
        return self.record.category


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    decays: int = 0
    epochs: int = 0
    best_epoch: int = -1
    best_val: float = np.inf
    stop_reason: str = ""
    seconds: float = 0.0


def prepare_shapes(records: Sequence[ShapeRecord], n_points: int = 10000,
                   seed: int = 0,
                   vocab_by_category: Optional[dict[str, TagVocabulary]] = None
                   ) -> list[TrainShape]:
    """Sample, normalize and annotate every record. One generator seeded once
    drives all sampling, so the same records and seed give the same clouds."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC10D)))
    out = []
    for rec in records:
        cloud = normalize_cloud(sample_surface(rec.mesh, n=n_points, rng=rng))
        vocab = (vocab_by_category or {}).get(rec.category)
        tags = label_points_with_tags(cloud, rec, vocab) if vocab is not None else None
        if tags is not None:
            cloud.tag_id = tags
        dist = leaf_tree_distances(rec.hierarchy, np.array(leaves(rec.hierarchy)))
        out.append(TrainShape(record=rec, cloud=cloud, dist_matrix=dist, tag_ids=tags))
    return out


def _check_same_size(shapes: Sequence[TrainShape]):
    sizes = {len(s.cloud) for s in shapes}
    if len(sizes) > 1:
        raise InputError(f"shapes must share a point count, got {sorted(sizes)}")


def _subsample(shape: TrainShape, n: int, rng: np.random.Generator) -> np.ndarray:
    total = len(shape.cloud)
    if n >= total:
        return np.arange(total)
    return rng.choice(total, size=n, replace=False)


def _subsample_labeled(shape: TrainShape, n: int, rng: np.random.Generator) -> np.ndarray:
    """Subsample that always includes the labeled points when they fit, so a
    sparsely labeled cloud never yields a batch with nothing to supervise."""
    total = len(shape.cloud)
    if n >= total:
        return np.arange(total)
    lab = np.flatnonzero(shape.cloud.semantic_label >= 0)
    if len(lab) >= n:
        return rng.choice(lab, size=n, replace=False)
    unlab = np.flatnonzero(shape.cloud.semantic_label < 0)
    fill = rng.choice(unlab, size=n - len(lab), replace=False)
    return np.concatenate([lab, fill])


def _shape_triplets(shape: TrainShape, sub_idx: np.ndarray, k: int,
                    rng: np.random.Generator, strategy: str) -> TripletBatch:
    sub = shape.cloud.take(sub_idx)
    counts = np.bincount(sub.leaf_id, minlength=len(shape.record.hierarchy))
    try:
        dist = build_pair_distribution(shape.record.hierarchy, counts, strategy=strategy,
                                       dist_matrix=shape.dist_matrix)
    except SamplingError as exc:
        raise TrainingError(f"shape {shape.record.shape_id}: no valid triplets ({exc})") from exc
    index = LeafIndex.build(sub, len(shape.record.hierarchy))
    return sample_triplets(dist, index, k, rng)


def _accumulate(total: dict, part: dict) -> None:
    for k, v in part.items():
        if k in total:
            total[k] += v
        else:
            total[k] = v


def _lr_mult(params: dict, head_prefixes: tuple[str, ...], trunk_scale: float,
             frozen_prefixes: tuple[str, ...] = ()) -> dict[str, float]:
    mult = {}
    for name in params:
        if name.startswith(frozen_prefixes):
            mult[name] = 0.0
        elif name.startswith(head_prefixes):
            mult[name] = 1.0
        else:
            mult[name] = trunk_scale
    return mult


_TRUNK_PREFIXES = ("enc", "lift")
_EMBED_PREFIXES = ("enc", "lift", "dec", "embed")


# ---------------------------------------------------------------------------
# Metric pretraining
# ---------------------------------------------------------------------------

def _triplet_forward_backward(params, cfg, pts, batches, margin, want_grads=True):
    embed, trace = forward_embed(params, cfg, pts)
    loss, g_embed = triplet_loss_and_grad(embed, batches, margin)
    if not want_grads:
        return loss, None
    return loss, backward_embed(params, cfg, trace, g_embed)


def _frozen_val_triplets(shapes, tc: TrainConfig, rng) -> list[tuple[np.ndarray, TripletBatch]]:
    out = []
    for shape in shapes:
        sub_idx = _subsample(shape, tc.subsample_points, rng)
        out.append((sub_idx, _shape_triplets(shape, sub_idx, tc.triplets_per_shape, rng, tc.strategy)))
    return out


def _val_triplet_loss(params, cfg, shapes, fixtures, tc: TrainConfig) -> float:
    total = 0.0
    for lo in range(0, len(shapes), tc.microbatch):
        chunk = list(range(lo, min(lo + tc.microbatch, len(shapes))))
        pts = np.stack([shapes[i].cloud.points[fixtures[i][0]] for i in chunk])
        batches = [fixtures[i][1] for i in chunk]
        loss, _ = _triplet_forward_backward(params, cfg, pts, batches, tc.margin, want_grads=False)
        total += loss
    return total / len(shapes)


def pretrain_metric(params: dict, cfg: PenConfig, train_shapes: Sequence[TrainShape],
                    val_shapes: Sequence[TrainShape], tc: TrainConfig) -> TrainReport:
    """Triplet metric pretraining. Mutates ``params`` and leaves them at the
    best-validation epoch's values."""
    if not train_shapes or not val_shapes:
        raise InputError("need nonempty train and validation shape lists")
    _check_same_size(list(train_shapes) + list(val_shapes))
    t0 = time.perf_counter()
    ss = np.random.SeedSequence((tc.seed, 0x7E1))
    rng_train, rng_val = (np.random.default_rng(s) for s in ss.spawn(2))
    fixtures = _frozen_val_triplets(val_shapes, tc, rng_val)

    sched = PlateauScheduler(tc.lr, tc.decay_factor, tc.plateau_patience,
                             tc.plateau_rel_threshold, tc.min_lr, tc.stop_decays_below)
    state = AdamState()
    report = TrainReport()
    best_params = None
    n = len(train_shapes)
    for epoch in range(tc.max_epochs):
        order = rng_train.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, tc.batch_shapes):
            batch = order[lo:lo + tc.batch_shapes]
            grads: dict[str, np.ndarray] = {}
            batch_loss = 0.0
            for mlo in range(0, len(batch), tc.microbatch):
                chunk = batch[mlo:mlo + tc.microbatch]
                subs = [_subsample(train_shapes[i], tc.subsample_points, rng_train) for i in chunk]
                batches = [_shape_triplets(train_shapes[i], subs[j], tc.triplets_per_shape,
                                           rng_train, tc.strategy)
                           for j, i in enumerate(chunk)]
                pts = np.stack([train_shapes[i].cloud.points[subs[j]] for j, i in enumerate(chunk)])
                loss, g = _triplet_forward_backward(params, cfg, pts, batches, tc.margin)
                batch_loss += loss
                _accumulate(grads, g)
            adam_step(params, grads, state, sched.lr)
            epoch_loss += batch_loss
        report.train_losses.append(epoch_loss / n)
        val = _val_triplet_loss(params, cfg, val_shapes, fixtures, tc)
        report.val_losses.append(val)
        report.lr_history.append(sched.lr)
        report.epochs = epoch + 1
        if val < report.best_val:
            report.best_val = val
            report.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
        if sched.observe(val):
            report.stop_reason = "lr_floor"
            break
    else:
        report.stop_reason = "max_epochs"
    report.decays = sched.decays
    if best_params is not None:
        params.update(best_params)
    report.seconds = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# Tag fine-tuning
# ---------------------------------------------------------------------------

def finetune_tags(params: dict, cfg: PenConfig, train_shapes: Sequence[TrainShape],
                  val_shapes: Sequence[TrainShape], tc: TrainConfig) -> TrainReport:
    """Stage-wise tag fine-tuning: the tag head is trained at full rate, the
    embedding trunk at ``trunk_lr_scale`` (or frozen). Loss is the summed
    one-vs-rest cross-entropy; validation is its per-shape mean."""
    if cfg.n_tags <= 0:
        raise InputError("config has no tag head")
    for s in list(train_shapes) + list(val_shapes):
        if s.tag_ids is None:
            raise TrainingError(f"shape {s.record.shape_id} has no tag labels")
    ok, coverage = tag_sufficiency([s.tag_ids for s in train_shapes])
    if not ok:
        raise TrainingError(
            f"insufficient tags: mean tagged fraction {coverage:.4f} does not clear 0.01")
    _check_same_size(list(train_shapes) + list(val_shapes))
    t0 = time.perf_counter()
    ss = np.random.SeedSequence((tc.seed, 0x7A6))
    rng_train, rng_val = (np.random.default_rng(s) for s in ss.spawn(2))
    val_subs = [_subsample(s, tc.subsample_points, rng_val) for s in val_shapes]

    mult = _lr_mult(params, head_prefixes=("tag",),
                    trunk_scale=0.0 if tc.freeze_trunk else tc.trunk_lr_scale,
                    frozen_prefixes=("seg", "ae"))

    def batch_loss_grads(shapes, subs, want_grads=True):
        pts = np.stack([s.cloud.points[subs[j]] for j, s in enumerate(shapes)])
        tags = np.stack([s.tag_ids[subs[j]] for j, s in enumerate(shapes)])
        embed, trace = forward_embed(params, cfg, pts)
        logits, head_trace = head_forward(params, cfg, "tag", embed, cfg.n_tags)
        loss, g_logits = tag_loss_and_grad(logits, tags)
        if not want_grads:
            return loss, None
        grads, g_embed = head_backward(params, cfg, "tag", cfg.n_tags, head_trace, g_logits)
        _accumulate(grads, backward_embed(params, cfg, trace, g_embed))
        return loss, grads

    sched = PlateauScheduler(tc.lr, tc.decay_factor, tc.plateau_patience,
                             tc.plateau_rel_threshold, tc.min_lr, tc.stop_decays_below)
    state = AdamState()
    report = TrainReport()
    best_params = None
    n = len(train_shapes)
    for epoch in range(tc.max_epochs):
        order = rng_train.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, tc.batch_shapes):
            batch = order[lo:lo + tc.batch_shapes]
            grads: dict[str, np.ndarray] = {}
            for mlo in range(0, len(batch), tc.microbatch):
                chunk = batch[mlo:mlo + tc.microbatch]
                shapes = [train_shapes[i] for i in chunk]
                subs = [_subsample(s, tc.subsample_points, rng_train) for s in shapes]
                loss, g = batch_loss_grads(shapes, subs)
                epoch_loss += loss
                _accumulate(grads, g)
            adam_step(params, grads, state, sched.lr, lr_mult=mult)
        report.train_losses.append(epoch_loss / n)
        val = 0.0
        for lo in range(0, len(val_shapes), tc.microbatch):
            chunk = list(range(lo, min(lo + tc.microbatch, len(val_shapes))))
            loss, _ = batch_loss_grads([val_shapes[i] for i in chunk],
                                       [val_subs[i] for i in chunk], want_grads=False)
            val += loss
        val /= len(val_shapes)
        report.val_losses.append(val)
        report.lr_history.append(sched.lr)
        report.epochs = epoch + 1
        if val < report.best_val:
            report.best_val = val
            report.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
        if sched.observe(val):
            report.stop_reason = "lr_floor"
            break
    else:
        report.stop_reason = "max_epochs"
    report.decays = sched.decays
    if best_params is not None:
        params.update(best_params)
    report.seconds = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# Reconstruction pretraining (baseline)
# ---------------------------------------------------------------------------

def pretrain_autoencoder(params: dict, cfg: PenConfig, train_shapes: Sequence[TrainShape],
                         val_shapes: Sequence[TrainShape], tc: TrainConfig) -> TrainReport:
    """Chamfer reconstruction pretraining of the trunk. Only the trunk and
    the reconstruction decoder receive gradients; the embedding decoder is
    untouched and stays at its initialization."""
    if not cfg.with_ae:
        raise InputError("config has no reconstruction decoder")
    _check_same_size(list(train_shapes) + list(val_shapes))
    t0 = time.perf_counter()
    ss = np.random.SeedSequence((tc.seed, 0xAE))
    rng_train, rng_val = (np.random.default_rng(s) for s in ss.spawn(2))
    val_subs = [_subsample(s, tc.subsample_points, rng_val) for s in val_shapes]

    def chunk_loss_grads(shapes, subs, want_grads=True):
        pts = np.stack([s.cloud.points[subs[j]] for j, s in enumerate(shapes)])
        trace = forward_trunk(params, cfg, pts)
        recon, ae_trace = ae_forward(params, cfg, trace.global_feat)
        loss, g_recon = chamfer_batch_and_grad(recon, list(pts))
        if not want_grads:
            return loss * len(shapes), None
        grads, g_global = ae_backward(params, cfg, ae_trace, g_recon)
        backward_trunk(params, cfg, trace, None, g_global, grads)
        # chamfer_batch averages over the chunk; rescale to per-shape sums
        for k in grads:
            grads[k] *= len(shapes)
        return loss * len(shapes), grads

    sched = PlateauScheduler(tc.lr, tc.decay_factor, tc.plateau_patience,
                             tc.plateau_rel_threshold, tc.min_lr, tc.stop_decays_below)
    state = AdamState()
    report = TrainReport()
    best_params = None
    n = len(train_shapes)
    for epoch in range(tc.max_epochs):
        order = rng_train.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, tc.batch_shapes):
            batch = order[lo:lo + tc.batch_shapes]
            grads: dict[str, np.ndarray] = {}
            for mlo in range(0, len(batch), tc.microbatch):
                chunk = batch[mlo:mlo + tc.microbatch]
                shapes = [train_shapes[i] for i in chunk]
                subs = [_subsample(s, tc.subsample_points, rng_train) for s in shapes]
                loss, g = chunk_loss_grads(shapes, subs)
                epoch_loss += loss
                _accumulate(grads, g)
            # loss/grads are per-shape sums; divide by the batch size for the mean
            for k in grads:
                grads[k] /= len(batch)
            adam_step(params, grads, state, sched.lr)
        report.train_losses.append(epoch_loss / n)
        val = 0.0
        for lo in range(0, len(val_shapes), tc.microbatch):
            chunk = list(range(lo, min(lo + tc.microbatch, len(val_shapes))))
            loss, _ = chunk_loss_grads([val_shapes[i] for i in chunk],
                                       [val_subs[i] for i in chunk], want_grads=False)
            val += loss
        val /= len(val_shapes)
        report.val_losses.append(val)
        report.lr_history.append(sched.lr)
        report.epochs = epoch + 1
        if val < report.best_val:
            report.best_val = val
            report.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
        if sched.observe(val):
            report.stop_reason = "lr_floor"
            break
    else:
        report.stop_reason = "max_epochs"
    report.decays = sched.decays
    if best_params is not None:
        params.update(best_params)
    report.seconds = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# Segmentation fine-tuning
# ---------------------------------------------------------------------------

def finetune_segmentation(params: dict, cfg: PenConfig, train_shapes: Sequence[TrainShape],
                          tc: TrainConfig, fresh_prefixes: tuple[str, ...] = ("seg",),
                          staged: bool = True) -> TrainReport:
    """Few-shot segmentation fine-tuning on a handful of labeled shapes.

    Staged mode trains the freshly initialized modules alone for
    ``head_epochs`` epochs, then everything, with pretrained tensors stepped
    at ``trunk_lr_scale``. Unstaged mode (training from scratch) runs a
    single stage with every tensor at full rate. Epoch counts are fixed: the
    labeled sets are too small to carve a validation split from.
    """
    if cfg.n_classes <= 0:
        raise InputError("config has no segmentation head")
    for s in train_shapes:
        if s.cloud.semantic_label is None:
            raise TrainingError(f"shape {s.record.shape_id} has no semantic labels")
        top = int(s.cloud.semantic_label.max())
        if top >= cfg.n_classes:
            raise InputError(
                f"shape {s.record.shape_id}: label {top} outside the {cfg.n_classes}-class set")
    _check_same_size(train_shapes)
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence((tc.seed, 0x5E6)))

    def batch_loss_grads(shapes, subs, want_grads=True):
        pts = np.stack([s.cloud.points[subs[j]] for j, s in enumerate(shapes)])
        labels = np.stack([s.cloud.semantic_label[subs[j]] for j, s in enumerate(shapes)])
        embed, trace = forward_embed(params, cfg, pts)
        logits, head_trace = head_forward(params, cfg, "seg", embed, cfg.n_classes)
        loss, g_logits = seg_loss_and_grad(logits, labels)
        if not want_grads:
            return loss, None
        grads, g_embed = head_backward(params, cfg, "seg", cfg.n_classes, head_trace, g_logits)
        _accumulate(grads, backward_embed(params, cfg, trace, g_embed))
        return loss, grads

    report = TrainReport()
    state = AdamState()
    n = len(train_shapes)

    def run_stage(epochs: int, mult: Optional[dict[str, float]], lr: float):
        for _ in range(epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            n_batches = 0
            for lo in range(0, n, tc.batch_shapes):
                batch = order[lo:lo + tc.batch_shapes]
                grads: dict[str, np.ndarray] = {}
                losses = []
                for mlo in range(0, len(batch), tc.microbatch):
                    chunk = batch[mlo:mlo + tc.microbatch]
                    shapes = [train_shapes[i] for i in chunk]
                    subs = [_subsample_labeled(s, tc.subsample_points, rng) for s in shapes]
                    loss, g = batch_loss_grads(shapes, subs)
                    # seg loss is a per-point mean inside the chunk; weight chunks
                    w = len(chunk) / len(batch)
                    losses.append(loss * w)
                    for k in g:
                        g[k] *= w
                    _accumulate(grads, g)
                adam_step(params, grads, state, lr, lr_mult=mult)
                epoch_loss += sum(losses)
                n_batches += 1
            report.train_losses.append(epoch_loss / max(n_batches, 1))
            report.lr_history.append(lr)
            report.epochs += 1

    if staged:
        head_only = {name: (1.0 if name.startswith(fresh_prefixes) else 0.0) for name in params}
        run_stage(tc.head_epochs, head_only, tc.lr)
        full = {name: (1.0 if name.startswith(fresh_prefixes) else tc.trunk_lr_scale)
                for name in params}
        run_stage(tc.max_epochs, full, tc.lr)
    else:
        run_stage(tc.max_epochs, None, tc.lr)
    report.stop_reason = "fixed_epochs"
    report.seconds = time.perf_counter() - t0
    return report


def embed_shapes(params: dict, cfg: PenConfig, shapes: Sequence[TrainShape],
                 microbatch: int = 8) -> np.ndarray:
    """Embeddings for whole prepared shapes, (S, N, embed_dim)."""
    _check_same_size(shapes)
    outs = []
    for lo in range(0, len(shapes), microbatch):
        pts = np.stack([s.cloud.points for s in shapes[lo:lo + microbatch]])
        embed, _ = forward_embed(params, cfg, pts)
        outs.append(embed)
    return np.concatenate(outs, axis=0)


def predict_segmentation(params: dict, cfg: PenConfig, points: np.ndarray,
                         microbatch: int = 8) -> np.ndarray:
    """Argmax class per point for a (S, N, 3) batch of clouds."""
    if cfg.n_classes <= 0:
        raise InputError("config has no segmentation head")
    outs = []
    for lo in range(0, len(points), microbatch):
        embed, _ = forward_embed(params, cfg, points[lo:lo + microbatch])
        logits, _ = head_forward(params, cfg, "seg", embed, cfg.n_classes)
        outs.append(logits.argmax(axis=2))
    return np.concatenate(outs, axis=0)
