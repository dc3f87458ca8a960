"""Command-line entry point: synth, mine, pretrain, finetune, benchmark,
export-embeddings.

Every command is deterministic given its flags and seed, writes its outputs
under the given path, and drops a run.json manifest next to them. Exit codes:
0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import VARIANTS, BenchmarkSpec, run_benchmark
from .errors import ConfigurationError, InputError, PartembedError
from .geometry import icp_align, read_ply, sample_surface, write_ply
from .ingest import (DEFAULT_STOP_PATTERNS, DatasetSplit, FilterPolicy,
                     TagVocabulary, extract_tags, load_corpus, mine_directory,
                     parse_json_shape, split_dataset)
from .network import (PenConfig, forward_embed, init_params, load_checkpoint,
                      save_checkpoint)
from .synth import DEFAULT_TAG_PROB, NoiseConfig, generate_corpus
from .training import (TrainConfig, finetune_segmentation, finetune_tags,
                       prepare_shapes, pretrain_autoencoder, pretrain_metric)

_TUPLE_CFG_FIELDS = ("point_widths", "lift_widths", "decoder_widths", "ae_hidden")


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------

def _parse_kv(items, cast):
    """['a=1', 'b=2'] -> {'a': cast('1'), 'b': cast('2')}"""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = cast(v)
    return out


def _parse_csv(text, cast=str):
    return tuple(cast(x) for x in text.split(",") if x)


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def _pen_config(path_or_none, **overrides) -> PenConfig:
    raw = _load_json(path_or_none) if path_or_none else {}
    raw.update(overrides)
    for key in _TUPLE_CFG_FIELDS:
        if key in raw:
            raw[key] = tuple(raw[key])
    try:
        return PenConfig(**raw)
    except TypeError as exc:
        raise ConfigurationError(f"bad architecture config: {exc}") from exc


def _train_config(path_or_none, **overrides) -> TrainConfig:
    raw = _load_json(path_or_none) if path_or_none else {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**raw)
    except TypeError as exc:
        raise ConfigurationError(f"bad training config: {exc}") from exc


def _write_run_manifest(out_dir: Path, args: argparse.Namespace,
                        inputs: list, outputs: list, started: float) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    blob = json.dumps(flags, sort_keys=True, default=str)
    manifest = {
        "command": args.command,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "flags": json.loads(blob),
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_dataset(data_dir):
    """Records plus (split, vocabularies, synonyms) from the directory's
    manifest when one exists; missing pieces are derived deterministically."""
    data_dir = Path(data_dir)
    records = load_corpus(data_dir)
    if not records:
        raise InputError(f"no shape JSON files under {data_dir}")
    manifest = {}
    mpath = data_dir / "manifest.json"
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
    synonyms = manifest.get("synonyms", {})
    if "split" in manifest:
        split = DatasetSplit.from_json(manifest["split"])
    else:
        split = split_dataset([r.shape_id for r in records], seed=0)
    vocabs = {}
    if "vocabularies" in manifest:
        for cat, v in manifest["vocabularies"].items():
            vocabs[cat] = TagVocabulary(category=cat, tags=tuple(v["tags"]),
                                        synonyms=v.get("synonyms", {}),
                                        counts=v.get("counts", {}))
    else:
        for cat in sorted({r.category for r in records}):
            vocabs[cat] = extract_tags(records, cat, synonyms=synonyms)
    return records, split, vocabs


def _split_shapes(shapes, split: DatasetSplit):
    by_id = {s.record.shape_id: s for s in shapes}
    train = [by_id[i] for i in split.train if i in by_id]
    val = [by_id[i] for i in split.validation if i in by_id]
    test = [by_id[i] for i in split.test if i in by_id]
    return train, val, test


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    cfg = _load_json(args.config) if args.config else {}
    counts = _parse_kv(args.counts, int) or cfg.get("counts")
    if not counts:
        raise ConfigurationError("no categories: pass --counts cat=N or a --config with counts")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    tag_prob = {**DEFAULT_TAG_PROB, **cfg.get("tag_prob", {}),
                **_parse_kv(args.tag_prob, float)}
    noise = None
    if "noise" in cfg:
        noise = NoiseConfig(**cfg["noise"])
    out = Path(args.out)
    records = generate_corpus(counts, seed=seed, tag_prob=tag_prob, noise=noise, out_dir=out)
    print(f"wrote {len(records)} shapes in {len(counts)} categories to {out}")
    _write_run_manifest(out, args, inputs=[args.config] if args.config else [],
                        outputs=[out], started=started)
    return 0


def cmd_mine(args) -> int:
    started = time.time()
    out = Path(args.out)
    synonyms = _load_json(args.synonyms) if args.synonyms else None
    stop = _parse_csv(args.stop_patterns) if args.stop_patterns else DEFAULT_STOP_PATTERNS
    policy = FilterPolicy(min_leaves=args.min_leaves, max_leaves=args.max_leaves)
    records, report = mine_directory(args.in_dir, out, synonyms=synonyms,
                                     stop_patterns=stop, policy=policy, seed=args.seed)
    target = None
    if args.align_to:
        target, _ = read_ply(args.align_to)
    rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0xC1)))
    if args.clouds or target is not None:
        cloud_dir = out / "clouds"
        cloud_dir.mkdir(parents=True, exist_ok=True)
        from .ingest import label_points_with_tags, write_shape_json
        for rec in records:
            cloud = sample_surface(rec.mesh, n=args.points, rng=rng)
            if target is not None:
                result = icp_align(cloud, target)
                cloud.points = result.transform.apply(cloud.points)
                rec.mesh.vertices = result.transform.apply(rec.mesh.vertices)
                write_shape_json(rec, out / rec.category / f"{rec.shape_id}.json")
            vocab = report.vocabularies.get(rec.category)
            if vocab is not None and vocab.tags:
                cloud.tag_id = label_points_with_tags(cloud, rec, vocab)
            write_ply(cloud_dir / f"{rec.shape_id}.ply", cloud)

    print(f"kept {report.kept} shapes")
    for reason, count in sorted(report.reject_counts.items()):
        print(f"rejected {reason}: {count}")
    for cat in sorted(report.vocabularies):
        v = report.vocabularies[cat]
        s = report.sufficiency[cat]
        verdict = "sufficient" if s["sufficient"] else "insufficient"
        print(f"{cat}: tags={list(v.tags)} coverage={s['coverage']:.4f} ({verdict})")
    _write_run_manifest(out, args, inputs=[args.in_dir], outputs=[out], started=started)
    return 0


def cmd_pretrain(args) -> int:
    started = time.time()
    records, split, vocabs = _load_dataset(args.data)
    cfg = _pen_config(args.arch, with_ae=(args.strategy == "autoencoder"))
    tc = _train_config(args.train, seed=args.seed, max_epochs=args.epochs,
                       strategy=args.strategy if args.strategy != "autoencoder" else "hierarchy")
    shapes = prepare_shapes(records, n_points=args.points, seed=args.seed,
                            vocab_by_category=vocabs)
    train, val, _ = _split_shapes(shapes, split)
    rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0x11717)))
    params = init_params(cfg, rng)
    if args.strategy == "autoencoder":
        report = pretrain_autoencoder(params, cfg, train, val, tc)
    else:
        report = pretrain_metric(params, cfg, train, val, tc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"stage": "pretrain", "strategy": args.strategy, "seed": args.seed,
            "epochs": report.epochs, "best_val": report.best_val,
            "best_epoch": report.best_epoch, "stop_reason": report.stop_reason}
    save_checkpoint(out, params, cfg, meta)
    print(f"pretrained ({args.strategy}) for {report.epochs} epochs, "
          f"best val {report.best_val:.6f} at epoch {report.best_epoch}; wrote {out}")
    _write_run_manifest(out.parent, args, inputs=[args.data], outputs=[out], started=started)
    return 0


def cmd_finetune(args) -> int:
    started = time.time()
    records, split, vocabs = _load_dataset(args.data)
    records = [r for r in records if r.category == args.category]
    if not records:
        raise ConfigurationError(f"no shapes of category {args.category!r} in {args.data}")
    tc = _train_config(args.train, seed=args.seed, max_epochs=args.epochs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.objective == "tags":
        vocab = vocabs.get(args.category)
        if vocab is None or not vocab.tags:
            raise ConfigurationError(f"category {args.category!r} has no tag vocabulary")
        shapes = prepare_shapes(records, n_points=args.points, seed=args.seed,
                                vocab_by_category={args.category: vocab})
        shapes = [s for s in shapes if s.tag_ids is not None and (s.tag_ids >= 0).any()]
        if len(shapes) < 3:
            raise ConfigurationError(f"category {args.category!r}: too few tagged shapes")
        train, val, _ = _split_shapes(shapes, split)
        if not train or not val:
            n_val = max(1, len(shapes) // 5)
            val, train = shapes[:n_val], shapes[n_val:]
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0xF17A6)))
        if args.checkpoint:
            params, cfg, _ = load_checkpoint(args.checkpoint)
            if cfg.n_tags != len(vocab.tags):
                cfg = replace(cfg, n_tags=len(vocab.tags))
                fresh = init_params(cfg, rng)
                params = {k: params.get(k, v) for k, v in fresh.items()}
        else:
            cfg = _pen_config(args.arch, n_tags=len(vocab.tags))
            params = init_params(cfg, rng)
        report = finetune_tags(params, cfg, train, val, tc)
        meta = {"stage": "finetune_tags", "category": args.category, "seed": args.seed,
                "tags": list(vocab.tags), "epochs": report.epochs,
                "best_val": report.best_val}
    else:
        shapes = prepare_shapes(records, n_points=args.points, seed=args.seed)
        for s in shapes:
            if s.cloud.semantic_label is None:
                raise ConfigurationError(
                    f"shape {s.record.shape_id} lacks semantic labels; cannot fine-tune")
        train, _, _ = _split_shapes(shapes, split)
        if args.labeled_shapes:
            rng_sel = np.random.default_rng(np.random.SeedSequence((args.seed, 0x5E1EC7)))
            idx = rng_sel.choice(len(train), size=min(args.labeled_shapes, len(train)),
                                 replace=False)
            train = [train[i] for i in idx]
        n_classes = 1 + max(int(s.cloud.semantic_label.max()) for s in shapes)
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0xF15E6)))
        if args.checkpoint:
            params0, cfg0, _ = load_checkpoint(args.checkpoint)
            cfg = replace(cfg0, n_classes=n_classes, n_tags=0, with_ae=False)
            fresh = init_params(cfg, rng)
            params = {k: params0.get(k, v) for k, v in fresh.items()}
            staged = True
        else:
            cfg = _pen_config(args.arch, n_classes=n_classes)
            params = init_params(cfg, rng)
            staged = False
        report = finetune_segmentation(params, cfg, train, tc, staged=staged)
        meta = {"stage": "finetune_segmentation", "category": args.category,
                "seed": args.seed, "epochs": report.epochs, "n_classes": n_classes}
    save_checkpoint(out, params, cfg, meta)
    print(f"fine-tuned ({args.objective}) on {args.category}: {report.epochs} epochs; wrote {out}")
    _write_run_manifest(out.parent, args, inputs=[args.data, args.checkpoint or ""],
                        outputs=[out], started=started)
    return 0


def _parse_checkpoint_flags(items) -> dict:
    """['hierarchy=ck.npz', 'tags=chair=ck.npz'] -> nested mapping."""
    out: dict = {}
    for item in items or []:
        parts = item.split("=")
        if len(parts) == 2:
            out[parts[0]] = parts[1]
        elif len(parts) == 3:
            out.setdefault(parts[0], {})[parts[1]] = parts[2]
        else:
            raise ConfigurationError(f"expected variant=path or variant=category=path, got {item!r}")
    return out


def cmd_benchmark(args) -> int:
    started = time.time()
    records, split, _ = _load_dataset(args.data)
    shapes = prepare_shapes(records, n_points=args.points, seed=args.seed)
    for s in shapes:
        if s.cloud.semantic_label is None:
            raise ConfigurationError(f"shape {s.record.shape_id} lacks semantic labels")
    categories = _parse_csv(args.categories) if args.categories else \
        tuple(sorted({r.category for r in records}))
    spec = BenchmarkSpec(
        categories=categories,
        variants=_parse_csv(args.variants) if args.variants else VARIANTS,
        shape_axis=_parse_csv(args.x, int) if args.x else BenchmarkSpec.shape_axis,
        point_axis=_parse_csv(args.points_grid, int) if args.points_grid
        else BenchmarkSpec.point_axis,
        axes=_parse_csv(args.axes) if args.axes else ("shapes", "points"),
        repeats=args.repeats,
        seed=args.seed,
        eval_points=args.eval_points,
    )
    tc = _train_config(args.train, seed=args.seed, max_epochs=args.epochs)
    base_cfg = _pen_config(args.arch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = run_benchmark(shapes, split, spec, tc, base_cfg,
                          _parse_checkpoint_flags(args.checkpoint),
                          out_csv=out / "metrics.csv", out_summary=out / "summary.json")
    print(f"wrote {len(table.rows)} rows to {out / 'metrics.csv'}")
    for cell in table.summary()["cells"]:
        print(f"{cell['category']:>10} {cell['variant']:>15} {cell['axis']}={cell['value']:<4} "
              f"mIoU {cell['mean_miou']:.4f} ± {cell['std_miou']:.4f}")
    _write_run_manifest(out, args, inputs=[args.data], outputs=[out / "metrics.csv"],
                        started=started)
    return 0


def _pca_rgb(embed: np.ndarray) -> np.ndarray:
    """Project embeddings onto their top three principal axes and map each
    channel to 0..255. Component signs are fixed so output is deterministic."""
    x = embed - embed.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:3]
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    signs[signs == 0] = 1.0
    proj = x @ (comps * signs[:, None]).T
    if proj.shape[1] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.round((proj - lo) / span * 255).astype(np.int64)


def cmd_export_embeddings(args) -> int:
    started = time.time()
    params, cfg, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.shape:
        records = [parse_json_shape(Path(p).read_text()) for p in args.shape]
    else:
        records = load_corpus(args.data)
        if args.ids:
            wanted = set(_parse_csv(args.ids))
            records = [r for r in records if r.shape_id in wanted]
    if not records:
        raise ConfigurationError("no shapes to export")
    shapes = prepare_shapes(records, n_points=args.points, seed=args.seed)
    written = []
    for s in shapes:
        embed, _ = forward_embed(params, cfg, s.cloud.points[None])
        rows = embed[0]
        path = out / f"{s.record.shape_id}.ply"
        write_ply(path, s.cloud, embeddings=rows, rgb=_pca_rgb(rows))
        written.append(path)
    print(f"exported {len(written)} embedding clouds to {out}")
    _write_run_manifest(out, args, inputs=[args.checkpoint], outputs=written, started=started)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="partembed",
        description="Mine part hierarchies from scene files, train point "
                    "embeddings with tree-aware triplets, benchmark few-shot "
                    "segmentation transfer.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON with counts/seed/tag_prob/noise")
    s.add_argument("--counts", nargs="*", metavar="CAT=N")
    s.add_argument("--tag-prob", nargs="*", metavar="CAT=P", dest="tag_prob")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mine", help="parse, filter and tag a directory of scene files")
    s.add_argument("--in", required=True, dest="in_dir")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=10000)
    s.add_argument("--synonyms", help="JSON file mapping raw names to canonical tags")
    s.add_argument("--stop-patterns", help="comma-separated junk name tokens")
    s.add_argument("--min-leaves", type=int, default=2)
    s.add_argument("--max-leaves", type=int, default=500)
    s.add_argument("--align-to", help="PLY target cloud for ICP canonical alignment")
    s.add_argument("--clouds", action=argparse.BooleanOptionalAction, default=True,
                   help="write sampled point clouds (PLY) next to the shapes")
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("pretrain", help="triplet metric or reconstruction pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--strategy", choices=("hierarchy", "leaf", "autoencoder"),
                   default="hierarchy")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=10000)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--arch", help="architecture config JSON")
    s.add_argument("--train", help="training config JSON")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="tag or segmentation fine-tuning")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--objective", choices=("tags", "segmentation"), required=True)
    s.add_argument("--category", required=True)
    s.add_argument("--checkpoint", help="pretrained checkpoint to start from")
    s.add_argument("--labeled-shapes", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=10000)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--arch", help="architecture config JSON")
    s.add_argument("--train", help="training config JSON")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("benchmark", help="few-shot transfer benchmark")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--categories")
    s.add_argument("--variants")
    s.add_argument("--x", help="labeled-shape counts, e.g. 4,8")
    s.add_argument("--points-grid", dest="points_grid")
    s.add_argument("--axes", help="shapes,points")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=10000)
    s.add_argument("--eval-points", type=int, default=2048, dest="eval_points")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--checkpoint", action="append", metavar="VARIANT=PATH",
                   help="repeatable; tag variants use VARIANT=CATEGORY=PATH")
    s.add_argument("--arch", help="architecture config JSON for scratch")
    s.add_argument("--train", help="training config JSON")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("export-embeddings", help="write per-point embeddings as PLY")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="mined/synthetic shape directory")
    s.add_argument("--shape", nargs="*", help="explicit shape JSON files")
    s.add_argument("--ids", help="comma-separated shape ids to keep")
    s.add_argument("--points", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PartembedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
