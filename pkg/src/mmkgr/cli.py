"""Command-line operator surface.

Commands: synth, train-structure, pretrain, finetune, evaluate, ablate,
sweep, count-params. Every command writes into --out: the effective
config (config.ini), a manifest of produced files, its outputs, and a
timing.txt (wall-clock; the one file exempt from byte-identical
reruns). Exit code is nonzero on any error.

Seeding: [run] seed is the master. Stages draw from disjoint streams:
synth uses the seed directly, the structure encoder adds 1000, model
init adds 2000, the training loop adds 3000 (each plus its section's
own seed key, so sections can be offset independently).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import KGTransformer, ModelConfig, count_parameters
from .config import ConfigError, RunConfig, add_config_flags, config_from_args
from .data import (IdMap, MultimodalKG, build_vocabulary, load_descriptions,
                   load_triples, load_visual_features, save_descriptions,
                   save_triples, save_visual_features)
from .evaluate import FilterIndex, evaluate_ranks
from .fusion import (ABLATION_VARIANTS, FusionConfig, StructureSource,
                     TransformerTailScorer, ablation_config, all_subset_configs)
from .structure import (evaluate_structure_model, export_table, import_table,
                        project_to_dim, train_structure_encoder)
from .synth import generate_synthetic_mkg
from .training import (TrainConfig, finetune_queries, pretrain_queries,
                       run_training)

STRUCTURE_STREAM = 1000
MODEL_STREAM = 2000
TRAIN_STREAM = 3000

TRIPLE_FILES = {"train": "triples.train.tsv", "dev": "triples.dev.tsv",
                "test": "triples.test.tsv"}
DESC_FILE = "descriptions.tsv"
VISUAL_FILE = "visual_features.txt"


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def load_mkg(data_dir) -> MultimodalKG:
    data_dir = Path(data_dir)
    entities, relations = IdMap(), IdMap()
    train, entities, relations = load_triples(data_dir / TRIPLE_FILES["train"],
                                              entities, relations)
    dev, _, _ = load_triples(data_dir / TRIPLE_FILES["dev"], entities, relations,
                             frozen=True)
    test, _, _ = load_triples(data_dir / TRIPLE_FILES["test"], entities, relations,
                              frozen=True)
    mkg = MultimodalKG(
        num_entities=len(entities),
        num_relations=len(relations),
        train=train, dev=dev, test=test,
        entity_names=list(entities.names),
        relation_names=list(relations.names),
    )
    desc_path = data_dir / DESC_FILE
    if desc_path.exists():
        mkg.descriptions = load_descriptions(desc_path, entities)
    visual_path = data_dir / VISUAL_FILE
    if visual_path.exists():
        mkg.visual_attrs = load_visual_features(visual_path, entities)
    return mkg


def _patch_dims(mkg: MultimodalKG, cfg: RunConfig) -> tuple[int, int]:
    for attr in mkg.visual_attrs.values():
        return attr.images[0].shape
    return cfg.synth.num_patches, cfg.synth.patch_dim


def build_model(cfg: RunConfig, mkg: MultimodalKG, structure_dim: int = 0) -> KGTransformer:
    vocab = build_vocabulary(mkg)
    num_patches, patch_dim = _patch_dims(mkg, cfg)
    mcfg = ModelConfig.for_vocab(
        vocab,
        dim=cfg.model.dim,
        heads=cfg.model.heads,
        text_layers=cfg.model.text_layers,
        vision_layers=cfg.model.vision_layers,
        fusion_layers=cfg.model.fusion_layers,
        ffn_dim=cfg.model.ffn_dim,
        max_seq_len=cfg.model.max_seq_len,
        max_patches=max(cfg.model.max_patches, num_patches),
        patch_dim=patch_dim,
        structure_dim=structure_dim,
        seed=cfg.seed + MODEL_STREAM + cfg.model.seed,
    )
    return KGTransformer(mcfg)


def load_structure_source(cfg: RunConfig, mkg, model, table_path) -> StructureSource:
    table = import_table(table_path, expected_num_entities=mkg.num_entities)
    return StructureSource(table.matrix, model)


def structure_table_for(cfg: RunConfig, mkg, table_path):
    """Import a table and reconcile its width with the model config."""
    table = import_table(table_path, expected_num_entities=mkg.num_entities)
    if table.dim != cfg.model.dim and cfg.structure.projection != "trainable":
        raise CommandError(
            f"table width {table.dim} != model dim {cfg.model.dim}; retrain the "
            "structure table or set [structure] projection = trainable"
        )
    structure_dim = table.dim if table.dim != cfg.model.dim else 0
    return table, structure_dim


class OutputDir:
    """Output directory with config, manifest and timing bookkeeping."""

    def __init__(self, path, cfg: RunConfig):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.files: list[str] = []
        self._t0 = time.perf_counter()
        cfg.save(self.path / "config.ini")
        self.add("config.ini")

    def add(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.path / name

    def finish(self):
        manifest = self.add("manifest.txt")
        with open(manifest, "w", encoding="utf-8") as fh:
            fh.write("\n".join(sorted(self.files)) + "\n")
        elapsed = time.perf_counter() - self._t0
        with open(self.path / "timing.txt", "w", encoding="utf-8") as fh:
            fh.write(f"wall_seconds {elapsed:.3f}\n")


def _write_kv(path, pairs: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(pairs):
            value = pairs[key]
            if isinstance(value, float):
                fh.write(f"{key} {value:.10f}\n")
            else:
                fh.write(f"{key} {value}\n")


def _write_loss_curve(path, history: list[float]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(history):
            writer.writerow([i, "%.17g" % loss])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = config_from_args(args)
    mkg = generate_synthetic_mkg(cfg.synth, cfg.seed)
    out = OutputDir(args.out, cfg)
    for split, fname in TRIPLE_FILES.items():
        save_triples(out.add(fname), getattr(mkg, split), mkg)
    save_descriptions(out.add(DESC_FILE), mkg)
    save_visual_features(out.add(VISUAL_FILE), mkg)
    _write_kv(out.add("dataset.kv"), {
        "num_entities": mkg.num_entities,
        "num_relations": mkg.num_relations,
        "num_train": len(mkg.train),
        "num_dev": len(mkg.dev),
        "num_test": len(mkg.test),
        "config_hash": cfg.hash(),
    })
    out.finish()
    return 0


def cmd_train_structure(args) -> int:
    cfg = config_from_args(args)
    mkg = load_mkg(args.data)
    scfg = dataclasses.replace(
        cfg.structure.encoder_config(),
        seed=cfg.seed + STRUCTURE_STREAM + cfg.structure.seed,
    )
    table, history, model = train_structure_encoder(
        mkg.train, mkg.num_entities, mkg.num_relations, scfg
    )
    if cfg.structure.projection == "orthonormal":
        table = project_to_dim(table, cfg.model.dim)
    out = OutputDir(args.out, cfg)
    export_table(table, out.add("structure_table.tns"))
    _write_loss_curve(out.add("loss_curve.csv"), history)
    report = evaluate_structure_model(model, mkg.dev or mkg.train, mkg.all_triples())
    _write_kv(out.add("metrics.kv"), {
        "final_loss": history[-1],
        "dev_hits10_filtered": report.hits_filtered[10],
        "dev_mr_filtered": report.mr_filtered,
        "table_dim": table.dim,
        "gram_error": float(table.gram_error or 0.0),
        "config_hash": cfg.hash(),
    })
    out.finish()
    return 0


def _train_command(args, stage: str) -> int:
    cfg = config_from_args(args)
    mkg = load_mkg(args.data)
    structure_dim = 0
    table = None
    if args.structure:
        table, structure_dim = structure_table_for(cfg, mkg, args.structure)
    elif cfg.fusion.any_enabled:
        raise CommandError(
            "fusion pathways are enabled but no --structure table was given"
        )
    if stage == "finetune" and args.init:
        model = KGTransformer.load(args.init)
        if structure_dim and model.cfg.structure_dim != structure_dim:
            raise CommandError("checkpoint was trained with a different structure width")
    else:
        model = build_model(cfg, mkg, structure_dim)
    structure = StructureSource(table.matrix, model) if table is not None else None
    vocab = build_vocabulary(mkg)
    queries = (pretrain_queries(mkg, vocab) if stage == "pretrain"
               else finetune_queries(mkg, vocab))
    epochs = (cfg.train.pretrain_epochs if stage == "pretrain"
              else cfg.train.finetune_epochs)
    tcfg = TrainConfig(epochs=epochs, batch_size=cfg.train.batch_size,
                       lr=cfg.train.lr, seed=cfg.seed + TRAIN_STREAM)
    history = run_training(model, mkg, queries, structure, cfg.fusion, tcfg)
    out = OutputDir(args.out, cfg)
    model.save(out.add("checkpoint.tns"))
    _write_loss_curve(out.add("loss_curve.csv"), history)
    _write_kv(out.add("metrics.kv"), {
        "steps": len(history),
        "final_loss": history[-1] if history else float("nan"),
        "config_hash": cfg.hash(),
    })
    out.finish()
    return 0


def cmd_pretrain(args) -> int:
    return _train_command(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train_command(args, "finetune")


def _evaluate_model(cfg: RunConfig, mkg, model, table, fusion: FusionConfig,
                    triples=None):
    vocab = build_vocabulary(mkg)
    structure = StructureSource(table.matrix, model) if table is not None else None
    scorer = TransformerTailScorer(model, mkg, vocab, structure, fusion)
    findex = FilterIndex.from_mkg(mkg)
    score_heads = scorer if cfg.eval.head_prediction else None
    return evaluate_ranks(scorer, triples if triples is not None else mkg.test,
                          findex, config_hash=cfg.hash(), seed=cfg.seed,
                          score_heads=score_heads)


def cmd_evaluate(args) -> int:
    cfg = config_from_args(args)
    mkg = load_mkg(args.data)
    model = KGTransformer.load(args.checkpoint)
    table = None
    if args.structure:
        table, _ = structure_table_for(cfg, mkg, args.structure)
    elif cfg.fusion.any_enabled:
        raise CommandError(
            "fusion pathways are enabled but no --structure table was given"
        )
    report = _evaluate_model(cfg, mkg, model, table, cfg.fusion)
    out = OutputDir(args.out, cfg)
    report.write_files(
        out.add("report.txt"), out.add("metrics.kv"),
        out.add("ranks.csv") if cfg.eval.dump_ranks else None,
    )
    out.finish()
    return 0


def _train_and_eval_variant(cfg: RunConfig, mkg, table, structure_dim,
                            fusion: FusionConfig, with_pretrain: bool):
    model = build_model(cfg, mkg, structure_dim if fusion.any_enabled else 0)
    structure = (StructureSource(table.matrix, model)
                 if (table is not None and fusion.any_enabled) else None)
    vocab = build_vocabulary(mkg)
    tcfg = TrainConfig(batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                       seed=cfg.seed + TRAIN_STREAM, epochs=0)
    if with_pretrain and cfg.train.pretrain_epochs > 0:
        pcfg = dataclasses.replace(tcfg, epochs=cfg.train.pretrain_epochs)
        run_training(model, mkg, pretrain_queries(mkg, vocab), structure, fusion, pcfg)
    fcfg = dataclasses.replace(tcfg, epochs=cfg.train.finetune_epochs)
    run_training(model, mkg, finetune_queries(mkg, vocab), structure, fusion, fcfg)
    return _evaluate_model(cfg, mkg, model, table if fusion.any_enabled else None, fusion)


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    mkg = load_mkg(args.data)
    table, structure_dim = structure_table_for(cfg, mkg, args.structure)
    if args.all_subsets:
        variants = all_subset_configs(cfg.fusion)
    else:
        variants = {name: ablation_config(cfg.fusion, name)
                    for name in ABLATION_VARIANTS}
    out = OutputDir(args.out, cfg)
    rows = []
    for name, fusion in variants.items():
        report = _train_and_eval_variant(cfg, mkg, table, structure_dim, fusion,
                                         args.with_pretrain)
        rows.append([
            name,
            int(fusion.ws_text), int(fusion.ws_vision),
            int(fusion.ac_text), int(fusion.ac_vision),
            "%.4f" % report.mr_filtered,
            "%.6f" % report.hits_filtered[1],
            "%.6f" % report.hits_filtered[3],
            "%.6f" % report.hits_filtered[10],
        ])
    with open(out.add("ablation.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "ws_text", "ws_vision", "ac_text", "ac_vision",
                         "mr_filtered", "hits1_filtered", "hits3_filtered",
                         "hits10_filtered"])
        writer.writerows(rows)
    out.finish()
    return 0


def _sweep_combos(cfg: RunConfig, grid: list[float], mode: str):
    base = (cfg.fusion.ws_text_weight, cfg.fusion.ws_vision_weight,
            cfg.fusion.ac_text_weight, cfg.fusion.ac_vision_weight)
    combos: list[tuple[float, float, float, float]] = []
    if mode == "product":
        from itertools import product

        combos = list(product(grid, grid, grid, grid))
    else:  # axis: vary one weight at a time around the configured defaults
        for slot in range(4):
            for value in grid:
                combo = list(base)
                combo[slot] = value
                combos.append(tuple(combo))
    seen = set()
    unique = []
    for combo in combos:
        if combo not in seen:
            seen.add(combo)
            unique.append(combo)
    return unique


def cmd_sweep(args) -> int:
    cfg = config_from_args(args)
    mkg = load_mkg(args.data)
    table, structure_dim = structure_table_for(cfg, mkg, args.structure)
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    if not grid:
        raise CommandError("empty sweep grid")
    combos = _sweep_combos(cfg, grid, args.mode)
    out = OutputDir(args.out, cfg)
    with open(out.add("sweep.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ws_text_weight", "ws_vision_weight", "ac_text_weight",
                         "ac_vision_weight", "hits1_filtered", "hits10_filtered"])
        for ws_t, ws_v, ac_t, ac_v in combos:
            fusion = dataclasses.replace(
                cfg.fusion, ws_text_weight=ws_t, ws_vision_weight=ws_v,
                ac_text_weight=ac_t, ac_vision_weight=ac_v,
            )
            report = _train_and_eval_variant(cfg, mkg, table, structure_dim,
                                             fusion, args.with_pretrain)
            writer.writerow([repr(ws_t), repr(ws_v), repr(ac_t), repr(ac_v),
                             "%.6f" % report.hits_filtered[1],
                             "%.6f" % report.hits_filtered[10]])
    out.finish()
    return 0


def cmd_count_params(args) -> int:
    cfg = config_from_args(args)
    mkg = load_mkg(args.data)
    structure_dim = 0
    table = None
    if args.structure:
        table, structure_dim = structure_table_for(cfg, mkg, args.structure)
    model = build_model(cfg, mkg, structure_dim)
    groups = count_parameters(model)
    trainable = sum(g["trainable"] for g in groups.values())
    frozen = sum(g["frozen"] for g in groups.values())
    projection = groups.get("structure_proj", {}).get("trainable", 0)
    table_size = int(table.matrix.size) if table is not None else 0
    out = OutputDir(args.out, cfg)
    lines = ["parameter counts (element totals)", ""]
    for group in sorted(groups):
        g = groups[group]
        lines.append(f"  {group:<18} trainable={g['trainable']:<8} frozen={g['frozen']}")
    lines += [
        "",
        f"  trainable total:        {trainable}",
        f"  fusion projection part: {projection}",
        f"  frozen structure table: {table_size} (kept outside the model)",
    ]
    with open(out.add("params.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_kv(out.add("params.kv"), {
        "trainable_total": trainable,
        "trainable_backbone": trainable - projection,
        "trainable_fusion_projection": projection,
        "frozen_model": frozen,
        "frozen_structure_table": table_size,
        "config_hash": cfg.hash(),
    })
    out.finish()
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmkgr",
        description="desk-scale multimodal KG reasoning with structure-guided fusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        add_config_flags(p)
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(fn=fn)
        return p

    command("synth", cmd_synth, help="generate a synthetic multimodal KG")

    p = command("train-structure", cmd_train_structure,
                help="train the structure encoder and export its table")
    p.add_argument("--data", required=True)

    p = command("pretrain", cmd_pretrain, help="stage-one entity/description training")
    p.add_argument("--data", required=True)
    p.add_argument("--structure", help="structure table file")

    p = command("finetune", cmd_finetune, help="stage-two reasoning training")
    p.add_argument("--data", required=True)
    p.add_argument("--structure", help="structure table file")
    p.add_argument("--init", help="checkpoint to start from")

    p = command("evaluate", cmd_evaluate, help="rank test queries and report metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--structure", help="structure table file")

    p = command("ablate", cmd_ablate, help="train/evaluate the fusion ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--structure", required=True)
    p.add_argument("--all-subsets", action="store_true",
                   help="run all 16 flag subsets instead of the 10 named rows")
    p.add_argument("--with-pretrain", action="store_true")

    p = command("sweep", cmd_sweep, help="sweep the fusion weights")
    p.add_argument("--data", required=True)
    p.add_argument("--structure", required=True)
    p.add_argument("--grid", default="0.001,0.01,0.1,1")
    p.add_argument("--mode", choices=("axis", "product"), default="axis")
    p.add_argument("--with-pretrain", action="store_true")

    p = command("count-params", cmd_count_params, help="parameter accounting")
    p.add_argument("--data", required=True)
    p.add_argument("--structure", help="structure table file")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CommandError, ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
