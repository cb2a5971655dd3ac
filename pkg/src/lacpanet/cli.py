"""Command-line entry point: generate, train, eval, inspect-attention, gradcheck."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradsuite
from . import model as M
from . import phantom as P
from . import trainer as Tr
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_override

logger = logging.getLogger("lacpanet")


class CommandError(Exception):
    """Expected failure; reported without a traceback."""


def _run_config(args) -> RunConfig:
    overrides = dict(parse_override(item) for item in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return RunConfig.load(args.config, overrides)


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _model_config_for(cfg: RunConfig, manifest: P.DatasetManifest) -> M.ModelConfig:
    data = P.PhantomConfig(**{k: v for k, v in manifest.config.items()}) if manifest.config else cfg.data
    return dataclasses.replace(cfg.model, volume_shape=data.volume_shape, n_phases=data.n_phases,
                               n_classes=data.n_classes)


def _load_manifest(dataset: str) -> P.DatasetManifest:
    path = Path(dataset) / "manifest.json"
    if not path.is_file():
        raise CommandError(f"no dataset manifest at {path}")
    return P.read_manifest(path)


def cmd_generate(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    try:
        manifest = P.generate_dataset(cfg.data, cfg.seed, out)
        (out / "generator.cfg").write_text(cfg.to_text())
    except OSError as exc:
        raise CommandError(f"cannot write dataset to {out}: {exc}") from exc
    except ValueError as exc:
        raise CommandError(f"invalid generator settings: {exc}") from exc
    summary = manifest.summary()
    print(f"dataset written to {out} (seed {cfg.seed}, config {manifest.config_hash[:12]})")
    for split in P.SPLITS:
        counts = summary[split]
        print(f"  {split:<5s} {sum(counts):4d} cases  per class {counts}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    manifest = _load_manifest(args.dataset)
    model_cfg = _model_config_for(cfg, manifest)
    train_cases = [P.load_case(args.dataset, e) for e in manifest.split("train")]
    val_cases = [P.load_case(args.dataset, e) for e in manifest.split("val")]
    if not train_cases:
        raise CommandError("training split is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = Tr.train(train_cases, model_cfg, cfg.train, val_cases=val_cases)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(ckpt, result.params, model_cfg)
    report = {
        "config": cfg.to_pairs(),
        "model_config": model_cfg.to_dict(),
        "dataset_config_hash": manifest.config_hash,
        "epoch_losses": result.epoch_losses,
        "lr_trace": result.lr_trace,
        "steps": result.steps,
        "checkpoint": ckpt.name,
        "metrics": {"train": Tr.evaluate(result.params, model_cfg, train_cases).to_dict()},
    }
    if val_cases:
        report["metrics"]["val"] = Tr.evaluate(result.params, model_cfg, val_cases).to_dict()
    if result.best_params is not None:
        best = out / "checkpoint_best_val.bin"
        save_checkpoint(best, result.best_params, model_cfg, {"epoch": result.best_val_epoch})
        report["best_val"] = {"checkpoint": best.name, "epoch": result.best_val_epoch,
                              "weighted_auc": result.best_val_auc}
    _dump_json(out / "run_report.json", report)
    print(f"trained {result.steps} steps; final epoch loss {result.epoch_losses[-1]:.5f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _load_model(path: str) -> tuple[M.ModelParams, M.ModelConfig]:
    try:
        params, config, _ = load_checkpoint(path)
    except (OSError, CheckpointFormatError) as exc:
        raise CommandError(f"cannot read checkpoint {path}: {exc}") from exc
    if config is None:
        raise CommandError(f"checkpoint {path} carries no model configuration")
    return params, config


def cmd_eval(args) -> int:
    params, config = _load_model(args.checkpoint)
    manifest = _load_manifest(args.dataset)
    entries = manifest.split(args.split)
    if not entries:
        raise CommandError(f"split {args.split!r} is empty")
    cases = [P.load_case(args.dataset, e) for e in entries]
    report = Tr.evaluate(params, config, cases)
    names = list(P.SUBTYPE_NAMES) if config.n_classes == len(P.SUBTYPE_NAMES) else None
    print(f"split {args.split}: {len(cases)} cases")
    print(f"weighted AUC {report.weighted_auc:.4f}  precision {report.weighted_precision:.4f}  "
          f"recall {report.weighted_recall:.4f}  F1 {report.weighted_f1:.4f}")
    print(report.table(names))
    if report.auc_excluded:
        print(f"classes excluded from AUC (no positives or no negatives): {report.auc_excluded}")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"metrics_{args.split}.json")
    _dump_json(out, {"split": args.split, "n_cases": len(cases), **report.to_dict()})
    return 0


def attention_csv(matrix: np.ndarray, labels) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["query\\key", *labels, "row_sum"])
    for name, row in zip(labels, matrix):
        writer.writerow([name, *[f"{v:.6g}" for v in row], f"{row.sum():.6g}"])
    return buf.getvalue()


def cmd_inspect_attention(args) -> int:
    params, config = _load_model(args.checkpoint)
    manifest = _load_manifest(args.dataset)
    entry = next((e for e in manifest.entries if e.case_id == args.case), None)
    if entry is None:
        raise CommandError(f"unknown case id {args.case!r}")
    case = P.load_case(args.dataset, entry)
    _, record = M.forward(case.volumes, case.mask, params, config, case.case_id)
    labels = list(M.PHASE_NAMES) if config.n_phases == len(M.PHASE_NAMES) else [f"phase{i}" for i in range(config.n_phases)]
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"attention_{case.case_id}"
    out.mkdir(parents=True, exist_ok=True)
    payload = {"case_id": case.case_id, "label": case.label, "phases": labels}
    for scale, matrix in (("low", record.a_low), ("high", record.a_high)):
        if matrix is None:
            continue
        text = attention_csv(matrix, labels)
        (out / f"attention_{scale}.csv").write_text(text)
        payload[f"a_{scale}"] = matrix.tolist()
        payload[f"row_sums_{scale}"] = matrix.sum(axis=1).tolist()
        print(f"{scale}-level attention (rows = query, columns = key):")
        print(text, end="")
    _dump_json(out / "attention.json", payload)
    return 0


def cmd_gradcheck(args) -> int:
    shape = tuple(int(s) for s in args.shape.split(","))
    model_cfg = gradsuite.desk_model_config(volume_shape=shape, base_channels=args.channels)
    rows = gradsuite.run_suite(instances=args.instances, seed=args.seed or 0, model_config=model_cfg)
    for row in rows:
        print(row.row())
    failed = [r.op_name for r in rows if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(rows)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lacpanet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", help="key=value configuration file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("generate", help="write a synthetic phantom dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a dataset's train split")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=P.SPLITS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-attention", help="export both attention matrices of one case")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_attention)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, needs_config=False)
    p.add_argument("--shape", default="8,8,4", help="desk volume extents H,W,D")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--instances", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, P.VolumeFormatError, Tr.NonFiniteGradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
