"""Command-line entry point: prepare data, generate pseudo semantic
embeddings, train, evaluate, and run the ablation grid.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfg_mod
from . import data as data_mod
from .config import ConfigError
from .embeddings import pseudo_embed, save_semantic_matrix
from .evaluation import evaluate, export_projection, write_projection_csv
from .intent import assign_intent
from .model import load_checkpoint
from .training import fit, resolve_semantic_matrix

DEFAULT_ABLATION_GRID = {
    "full": {},
    "w_ca": {"fusion.strategy": "cross_attention"},
    "w_ca_no_align": {"fusion.strategy": "cross_attention", "loss.lambda_align": 0.0},
    "no_align": {"loss.lambda_align": 0.0},
    "concat": {"fusion.strategy": "concat"},
    "weighted": {"fusion.strategy": "weighted"},
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _resolve_out_dir(arg: str | None, command: str) -> Path:
    if arg:
        out = Path(arg)
    else:
        root = os.environ.get("RECDIFF_OUT")
        if not root:
            raise ConfigError("no output directory: pass --out-dir or set RECDIFF_OUT")
        out = Path(root) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_prepare(args) -> int:
    if args.kind not in data_mod.PROMPT_TEMPLATES:
        raise ConfigError(f"unknown dataset kind {args.kind!r} "
                          f"(valid: {', '.join(sorted(data_mod.PROMPT_TEMPLATES))})")
    out_dir = _resolve_out_dir(args.out_dir, "prepare")
    max_len = args.max_len if args.max_len else data_mod.DEFAULT_MAX_LEN[args.kind]

    rows = data_mod.load_interactions(args.input, fmt=args.format)
    ds = data_mod.build_dataset(rows, min_count=args.min_count, max_len=max_len)
    strata = data_mod.compute_strata(ds, tail_fraction=args.tail_fraction,
                                     cold_threshold=args.cold_threshold)
    attributes = {}
    if args.attributes:
        with open(args.attributes, "r", encoding="utf-8") as fh:
            attributes = json.load(fh)
    prompts = data_mod.build_prompt_records(ds, args.kind, attributes)

    dataset_path = out_dir / "dataset.json"
    strata_path = out_dir / "strata.json"
    prompts_path = out_dir / "prompts.jsonl"
    data_mod.save_dataset(ds, dataset_path)
    data_mod.save_strata(strata, strata_path)
    data_mod.write_prompt_records(prompts, prompts_path)

    manifest = {
        "command": "prepare",
        "args": {"input": str(args.input), "kind": args.kind, "min_count": args.min_count,
                 "max_len": max_len, "tail_fraction": args.tail_fraction,
                 "cold_threshold": args.cold_threshold},
        "users": ds.num_users,
        "items": ds.num_items,
        "actions": sum(len(s) for s in ds.sequences),
        "tail_items": sum(strata.item_is_tail),
        "cold_users": sum(strata.user_is_cold),
        "checksums": {p.name: _sha256_file(p) for p in (dataset_path, strata_path, prompts_path)},
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"prepared {ds.num_users} users, {ds.num_items} items -> {out_dir}")
    return 0


def cmd_embed_pseudo(args) -> int:
    records = data_mod.load_prompt_records(args.prompts)
    if not records:
        raise ConfigError(f"prompt file {args.prompts} is empty")
    expected = list(range(len(records)))
    if [r.item_index for r in records] != expected:
        raise ConfigError("prompt records must cover item indices 0..N-1 exactly once")
    rows = np.stack([pseudo_embed(r.prompt, args.dim, args.seed) for r in records])
    save_semantic_matrix(rows, args.out, source_tag="pseudo")
    print(f"wrote {rows.shape[0]}x{rows.shape[1]} pseudo semantic matrix -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = cfg_mod.load_config(args.config, overrides=args.override)
    out_dir = _resolve_out_dir(args.out_dir or cfg.output.dir, "train")
    if not cfg.data.dataset_path:
        raise ConfigError("data.dataset_path must point at a prepared dataset file")
    ds = data_mod.load_dataset(cfg.data.dataset_path)
    cfg_mod.write_config_snapshot(cfg, out_dir / "config.snapshot.json")
    semantic = resolve_semantic_matrix(cfg, ds)
    result = fit(ds, cfg, semantic=semantic, out_dir=out_dir)
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
          f"val NDCG@10 {result.best_val_ndcg10:.4f}")
    print(f"checkpoint -> {result.checkpoint_path}")
    return 0


def _evaluate_checkpoint(checkpoint_path, dataset_path, out_dir: Path,
                         mask_train: bool, tail_fraction, cold_threshold,
                         projection: str | None) -> dict:
    model, prototypes, _ = load_checkpoint(checkpoint_path)
    ds = data_mod.load_dataset(dataset_path)
    ecfg = model.cfg.eval
    strata = data_mod.compute_strata(
        ds,
        tail_fraction=tail_fraction if tail_fraction is not None else ecfg.tail_fraction,
        cold_threshold=cold_threshold if cold_threshold is not None else ecfg.cold_threshold)
    report = evaluate(model, ds, strata, prototypes=prototypes, ks=ecfg.ks,
                      mask_train_items=mask_train or ecfg.mask_train_items,
                      compute_silhouette=ecfg.silhouette)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report.format_table(), encoding="utf-8")
    cfg_mod.write_config_snapshot(model.cfg, out_dir / "config.snapshot.json")
    if projection:
        import torch
        from .model import pad_batch
        model.eval()
        encs = []
        with torch.no_grad():
            fused = model.fused_item_embeddings()
            for start in range(0, ds.num_users, 512):
                chunk = range(start, min(start + 512, ds.num_users))
                seqs = [ds.train_prefix(u) + [ds.valid_item(u)] for u in chunk]
                indices, lengths = pad_batch(seqs, ds.padding_index)
                _, h = model.encode(indices, lengths, fused=fused)
                encs.append(h.cpu().numpy())
        points = np.concatenate(encs, axis=0).astype(np.float64)
        coords = export_projection(points)
        labels = assign_intent(points, prototypes)[0] if prototypes is not None else None
        write_projection_csv(coords, labels, projection)
    return report.to_dict()


def cmd_evaluate(args) -> int:
    out_dir = _resolve_out_dir(args.out, "evaluate")
    report = _evaluate_checkpoint(args.checkpoint, args.data, out_dir,
                                  mask_train=args.mask_train,
                                  tail_fraction=args.tail_fraction,
                                  cold_threshold=args.cold_threshold,
                                  projection=args.projection)
    overall = report["subsets"]["overall"]
    print(f"overall HR@10 {overall['hr'].get('10')} NDCG@10 {overall['ndcg'].get('10')}")
    print(f"report -> {out_dir / 'report.json'}")
    return 0


def cmd_ablate(args) -> int:
    raw = cfg_mod.load_config_dict(args.config)
    if args.override:
        raw = cfg_mod.apply_overrides(raw, args.override)
    base_cfg = cfg_mod.config_from_dict(raw)
    out_dir = _resolve_out_dir(args.out_dir or base_cfg.output.dir, "ablate")

    if args.grid:
        with open(args.grid, "r", encoding="utf-8") as fh:
            grid = json.load(fh)
        if not isinstance(grid, dict) or not grid:
            raise ConfigError(f"grid file {args.grid} must map variant names to override tables")
    else:
        grid = {name: dict(overrides) for name, overrides in DEFAULT_ABLATION_GRID.items()}
    if args.variants:
        wanted = [v.strip() for v in args.variants.split(",") if v.strip()]
        unknown = [v for v in wanted if v not in grid]
        if unknown:
            raise ConfigError(f"unknown ablation variants {unknown} "
                              f"(valid: {', '.join(sorted(grid))})")
        grid = {name: grid[name] for name in wanted}

    if not base_cfg.data.dataset_path:
        raise ConfigError("data.dataset_path must point at a prepared dataset file")
    ds = data_mod.load_dataset(base_cfg.data.dataset_path)
    cfg_mod.write_config_snapshot(base_cfg, out_dir / "config.snapshot.json")

    results = {}
    for name, overrides in grid.items():
        variant_raw = cfg_mod.apply_overrides(raw, [f"{k}={json.dumps(v)}"
                                                    for k, v in overrides.items()])
        try:
            cfg = cfg_mod.config_from_dict(variant_raw)
            variant_dir = out_dir / name
            variant_dir.mkdir(parents=True, exist_ok=True)
            cfg_mod.write_config_snapshot(cfg, variant_dir / "config.snapshot.json")
            semantic = resolve_semantic_matrix(cfg, ds)
            fit_result = fit(ds, cfg, semantic=semantic, out_dir=variant_dir)
            strata = data_mod.compute_strata(ds, tail_fraction=cfg.eval.tail_fraction,
                                             cold_threshold=cfg.eval.cold_threshold)
            report = evaluate(fit_result.model, ds, strata, prototypes=fit_result.prototypes,
                              ks=cfg.eval.ks, mask_train_items=cfg.eval.mask_train_items,
                              compute_silhouette=cfg.eval.silhouette)
            overall = report.subsets["overall"]
            results[name] = {"status": "ok", "hr10": overall.hr.get(10),
                             "ndcg10": overall.ndcg.get(10),
                             "best_epoch": fit_result.best_epoch}
        except Exception as exc:  # record and continue with the rest of the grid
            results[name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}

    with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = [f"{'variant':<16}{'HR@10':>10}{'NDCG@10':>10}"]
    for name, row in results.items():
        if row["status"] == "ok":
            lines.append(f"{name:<16}{row['hr10']:>10.4f}{row['ndcg10']:>10.4f}")
        else:
            lines.append(f"{name:<16}{'failed':>10}  {row['error']}")
    table = "\n".join(lines) + "\n"
    (out_dir / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="recdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("prepare", help="filter, split, and stratify raw interactions")
    p.add_argument("--input", required=True)
    p.add_argument("--kind", required=True,
                   help=f"dataset kind: {', '.join(sorted(data_mod.PROMPT_TEMPLATES))}")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--attributes", default=None, help="JSON map item_id -> attribute table")
    p.add_argument("--tail-fraction", type=float, default=0.2)
    p.add_argument("--cold-threshold", type=int, default=5)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("embed-pseudo", help="deterministic offline semantic embeddings")
    p.add_argument("--prompts", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed_pseudo)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[],
                   help="dotted config override, e.g. loss.lambda_cl=0")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank held-out items and write a stratified report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-train", action="store_true")
    p.add_argument("--tail-fraction", type=float, default=None)
    p.add_argument("--cold-threshold", type=int, default=None)
    p.add_argument("--projection", default=None, help="write a 2-D PCA CSV to this path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate the fusion/loss ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[])
    p.add_argument("--out-dir", default=None)
    p.add_argument("--variants", default=None, help="comma-separated subset of the grid")
    p.add_argument("--grid", default=None, help="JSON file: variant name -> override table")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except _UsageError as exc:
        print(f"recdiff: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"recdiff: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"recdiff: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
