"""Command-line driver.

    geoprompt generate-data  --out DIR
    geoprompt train-stage1   --manifest CSV --out DIR
    geoprompt train-stage2   --manifest CSV --stage1 CKPT --out DIR
    geoprompt extract        --checkpoint CKPT --manifest CSV --split SPLIT --out DIR
    geoprompt evaluate       --query DUMP --database DUMP --manifest CSV --out DIR
    geoprompt ablate-freeze  --manifest CSV --layers 0,2,4 --out DIR
    geoprompt run            --out DIR

Every command accepts ``--config``, ``--profile``, ``--seed`` and ``--out`` and
writes ``resolved_config.ini`` to its output directory. Failures print one JSON
line to stderr and exit non-zero. ``GEOPROMPT_LOG_LEVEL`` sets log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import report as report_mod
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .geodata import ManifestError, generate_synthetic_city, load_manifest, split_validation
from .retrieval import (DumpFormatError, RecallReport, evaluate_dumps, extract_embeddings,
                        read_dump, write_dump)
from .training import (InvariantError, build_text_cache, config_echo, init_towers, load_stage1,
                       load_stage2, prepare_data, run_stage1, run_stage2, save_stage1,
                       save_stage2)

logger = logging.getLogger("geoprompt")


class CommandError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _out(path: str | os.PathLike) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo(cfg: ExperimentConfig, out: Path) -> None:
    tmp = out / "resolved_config.ini.tmp"
    tmp.write_text(dump_config(cfg), encoding="utf-8")
    os.replace(tmp, out / "resolved_config.ini")


def _manifest(cfg: ExperimentConfig, manifest: Optional[str]) -> Path:
    path = manifest or cfg.data.manifest
    if not path:
        raise CommandError("missing_manifest", "no manifest given (--manifest or [data] manifest)")
    if not Path(path).is_file():
        raise CommandError("missing_manifest", f"manifest not found: {path}")
    return Path(path)


def _ckpt_config(cfg: ExperimentConfig) -> Dict:
    return config_echo(image_encoder=cfg.image_encoder, text_encoder=cfg.text_encoder,
                       losses=cfg.losses, partition=cfg.partition, stage1=cfg.stage1,
                       stage2=cfg.stage2, profile=cfg.profile)


# --------------------------------------------------------------------------- commands


def cmd_generate_data(cfg: ExperimentConfig, out: str | os.PathLike) -> Path:
    out = _out(out)
    _echo(cfg, out)
    manifest, _ = generate_synthetic_city(cfg.city, cfg.partition, out)
    return manifest


def cmd_train_stage1(cfg: ExperimentConfig, manifest: str | os.PathLike,
                     out: str | os.PathLike) -> Path:
    out = _out(out)
    _echo(cfg, out)
    data = prepare_data(manifest, cfg.partition, cfg.evaluation.val_fraction, cfg.seed)
    towers = init_towers(cfg.image_encoder, cfg.text_encoder, data.num_classes, cfg.seed)
    res = run_stage1(data, towers, cfg.stage1, cfg.losses, log_path=out / "stage1_log.csv")
    ckpt = out / "stage1.ckpt"
    save_stage1(ckpt, towers, data.classes, _ckpt_config(cfg), cfg.seed)
    if res.epoch_losses:
        logger.info("stage 1 done: loss %.4f -> %.4f", res.epoch_losses[0], res.epoch_losses[-1])
    return ckpt


def cmd_train_stage2(cfg: ExperimentConfig, manifest: str | os.PathLike,
                     stage1: Optional[str | os.PathLike], out: str | os.PathLike,
                     resume: Optional[str | os.PathLike] = None) -> Path:
    out = _out(out)
    _echo(cfg, out)
    if cfg.stage2.use_prompts and not stage1:
        raise CommandError("missing_stage1",
                           "stage 2 with use_prompts=true needs a stage-1 checkpoint (--stage1)")
    data = prepare_data(manifest, cfg.partition, cfg.evaluation.val_fraction, cfg.seed)
    cache, cache_hash = None, None
    if stage1:
        towers, classes, ck = load_stage1(stage1, cfg.image_encoder, cfg.text_encoder)
        if classes != data.classes:
            raise CommandError("class_mismatch", "stage-1 classes differ from the manifest's")
        encoder = towers.image
        if cfg.stage2.use_prompts:
            cache = build_text_cache(towers.bank, towers.text, data.num_classes, ck["hash"])
            cache_hash = cache.hash
    else:
        encoder = init_towers(cfg.image_encoder, cfg.text_encoder, data.num_classes,
                              cfg.seed).image
    heads, start = None, 0
    if resume:
        encoder, heads, start, _ = load_stage2(resume, cfg.image_encoder)
    res = run_stage2(data, encoder, cache, cfg.partition, cfg.stage2, cfg.losses,
                     log_path=out / "stage2_log.csv", heads=heads, start_epoch=start,
                     thresholds_n=cfg.evaluation.thresholds_n,
                     radius=cfg.evaluation.positive_radius_m)
    with report_mod.atomic_path(out / "stage2_val.csv") as tmp:
        tmp.write_text("epoch,r_at_1\n" + "".join(
            f"{e},{r:.6f}\n" for e, r in enumerate(res.val_r1, start=start)), encoding="utf-8")
    ckpt = out / "stage2.ckpt"
    save_stage2(ckpt, res, data.classes, _ckpt_config(cfg), cfg.seed, cache_hash)
    return ckpt


def _split_records(cfg: ExperimentConfig, records, split: str):
    if split in ("val", "test"):
        val, test = split_validation([r for r in records if r.split == "query"],
                                     cfg.evaluation.val_fraction, cfg.seed)
        return val if split == "val" else test
    if split not in ("database", "query", "train"):
        raise CommandError("bad_split", f"unknown split {split!r}")
    return [r for r in records if r.split == split]


def cmd_extract(cfg: ExperimentConfig, checkpoint: str | os.PathLike, manifest: str | os.PathLike,
                split: str, out: str | os.PathLike) -> Path:
    out = _out(out)
    _echo(cfg, out)
    records = _split_records(cfg, load_manifest(manifest), split)
    dump = extract_embeddings(checkpoint, records)
    path = out / f"{split}.pgeo"
    write_dump(dump, path)
    return path


def cmd_evaluate(cfg: ExperimentConfig, query: str | os.PathLike, database: str | os.PathLike,
                 manifest: str | os.PathLike, out: str | os.PathLike,
                 dataset: str = "val", strips: bool = True) -> RecallReport:
    out = _out(out)
    _echo(cfg, out)
    q, db = read_dump(query), read_dump(database)
    records = load_manifest(manifest)
    rep = evaluate_dumps(q, db, records, cfg.evaluation.thresholds_n,
                         cfg.evaluation.positive_radius_m, dataset)
    report_mod.render_report([rep], records, out, strips=strips)
    return rep


def cmd_ablate_freeze(cfg: ExperimentConfig, manifest: str | os.PathLike,
                      layers: Optional[Sequence[int]], out: str | os.PathLike,
                      stage1: Optional[str | os.PathLike] = None) -> List[RecallReport]:
    """Stage 2 once per frozen-layer count, all from the same stage-1 towers."""
    out = _out(out)
    _echo(cfg, out)
    depth = cfg.image_encoder.depth
    layers = list(layers) if layers else [0, depth // 2, depth]
    if any(not 0 <= k <= depth for k in layers):
        raise CommandError("bad_layers", f"layer counts must lie in [0, {depth}]")
    if cfg.stage2.use_prompts and not stage1:
        stage1 = cmd_train_stage1(cfg, manifest, out / "stage1")
    reports = []
    records = load_manifest(manifest)
    for k in layers:
        run_cfg = dataclasses.replace(
            cfg, stage2=dataclasses.replace(cfg.stage2, frozen_layer_count=k))
        ckpt = cmd_train_stage2(run_cfg, manifest, stage1, out / f"frozen_{k}")
        qd = cmd_extract(run_cfg, ckpt, manifest, "val", out / f"frozen_{k}")
        dbd = cmd_extract(run_cfg, ckpt, manifest, "database", out / f"frozen_{k}")
        rep = evaluate_dumps(read_dump(qd), read_dump(dbd), records,
                             cfg.evaluation.thresholds_n, cfg.evaluation.positive_radius_m,
                             f"val_frozen_{k}")
        rep.frozen_layer_count = k
        rep.trainable_params = load_checkpoint(ckpt)["extra"].get("trainable_params")
        reports.append(rep)
    report_mod.render_report(reports, records, out, strips=False)
    return reports


def cmd_run(cfg: ExperimentConfig, out: str | os.PathLike) -> RecallReport:
    """Generate data, train both stages, extract and evaluate on the validation queries."""
    out = _out(out)
    _echo(cfg, out)
    manifest = cmd_generate_data(cfg, out / "data")
    stage1 = cmd_train_stage1(cfg, manifest, out / "stage1") if cfg.stage2.use_prompts else None
    ckpt = cmd_train_stage2(cfg, manifest, stage1, out / "stage2")
    qd = cmd_extract(cfg, ckpt, manifest, "val", out / "embeddings")
    dbd = cmd_extract(cfg, ckpt, manifest, "database", out / "embeddings")
    return cmd_evaluate(cfg, qd, dbd, manifest, out / "report")


# --------------------------------------------------------------------------- argv


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line, machine-readable
        _fail("usage", message, 2)


def _fail(code: str, message: str, status: int = 1):
    sys.stderr.write(json.dumps({"error": code, "message": str(message).replace("\n", " ")}) + "\n")
    sys.exit(status)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI experiment config")
    common.add_argument("--profile", choices=["paper", "desk"])
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="output directory")

    p = _Parser(prog="geoprompt", description="Prompt-assisted visual geo-localization")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate-data", parents=[common])
    s1 = sub.add_parser("train-stage1", parents=[common])
    s1.add_argument("--manifest")
    s2 = sub.add_parser("train-stage2", parents=[common])
    s2.add_argument("--manifest")
    s2.add_argument("--stage1", help="stage-1 checkpoint (required when prompts are enabled)")
    s2.add_argument("--resume", help="stage-2 checkpoint to continue from")
    ex = sub.add_parser("extract", parents=[common])
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--manifest")
    ex.add_argument("--split", required=True,
                    help="database, query, train, or val/test (query subsets)")
    ev = sub.add_parser("evaluate", parents=[common])
    ev.add_argument("--query", required=True)
    ev.add_argument("--database", required=True)
    ev.add_argument("--manifest")
    ev.add_argument("--dataset", default="val")
    ab = sub.add_parser("ablate-freeze", parents=[common])
    ab.add_argument("--manifest")
    ab.add_argument("--stage1")
    ab.add_argument("--layers", help="comma-separated frozen layer counts")
    sub.add_parser("run", parents=[common])
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("GEOPROMPT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.profile, args.seed)
        cmd = args.command
        if cmd == "generate-data":
            result = cmd_generate_data(cfg, args.out)
        elif cmd == "train-stage1":
            result = cmd_train_stage1(cfg, _manifest(cfg, args.manifest), args.out)
        elif cmd == "train-stage2":
            result = cmd_train_stage2(cfg, _manifest(cfg, args.manifest), args.stage1, args.out,
                                      args.resume)
        elif cmd == "extract":
            result = cmd_extract(cfg, args.checkpoint, _manifest(cfg, args.manifest), args.split,
                                 args.out)
        elif cmd == "evaluate":
            rep = cmd_evaluate(cfg, args.query, args.database, _manifest(cfg, args.manifest),
                               args.out, args.dataset)
            result = " ".join(f"R@{n}={v:.4f}" for n, v in rep.r_at_n.items())
        elif cmd == "ablate-freeze":
            layers = [int(x) for x in args.layers.split(",")] if args.layers else None
            reps = cmd_ablate_freeze(cfg, _manifest(cfg, args.manifest), layers, args.out,
                                     args.stage1)
            result = " ".join(f"k={r.frozen_layer_count}:R@1={r.r_at_n[1]:.4f}" for r in reps)
        else:
            rep = cmd_run(cfg, args.out)
            result = " ".join(f"R@{n}={v:.4f}" for n, v in rep.r_at_n.items())
    except CommandError as exc:
        _fail(exc.code, str(exc))
    except ConfigError as exc:
        _fail("config", str(exc))
    except (CheckpointError, DumpFormatError) as exc:
        _fail("format", str(exc))
    except ManifestError as exc:
        _fail("manifest", str(exc))
    except InvariantError as exc:
        _fail("invariant", str(exc))
    except (FileNotFoundError, ValueError, OSError) as exc:
        _fail("input", str(exc))
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
