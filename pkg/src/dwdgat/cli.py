"""Command-line front end: generate, fuse, train, report.

Exit codes: 0 success, 2 configuration error, 3 data or runtime error.
Output directories default to ``$DWDGAT_OUT`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import datagen, fusion, trainer
from .errors import ConfigError, DataError, NumericError
from .gga import GRAPH_MODES

log = logging.getLogger("dwdgat")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
MANIFEST = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    dataset_sha256: str | None
    outputs: dict[str, str] = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""

    def write(self, run_dir: Path) -> Path:
        path = run_dir / MANIFEST
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_root() -> Path:
    return Path(os.environ.get("DWDGAT_OUT", "runs"))


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def _read_cohort(path):
    if not Path(path).is_file():
        raise DataError(f"dataset {path} not found")
    return datagen.read_dataset(path)


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    doc = _load_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    doc = {**datagen.PROFILES[args.profile], **doc}
    spec = datagen.CohortSpec.from_dict(doc)
    out = Path(args.out or _out_root() / f"dataset-seed{spec.seed}")
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    cohort = datagen.generate_cohort(spec)
    path = out / "dataset.bin"
    digest = datagen.write_dataset(cohort, path)
    RunManifest("generate", spec.to_dict(), spec.seed, digest, {"dataset": path.name}, started, _now()).write(out)
    print(f"wrote {len(cohort.samples)} samples to {path} (sha256 {digest[:12]})")
    return EXIT_OK


def cmd_fuse(args) -> int:
    cohort = _read_cohort(args.dataset)
    out = Path(args.out or _out_root() / f"fused-{Path(args.dataset).stem}")
    fused_dir = out / "fused"
    fused_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    R = cohort.n_rois
    for s in cohort.samples:
        x = fusion.fuse_sample(s, cohort.template, R)
        fusion.write_fused_csv(fused_dir / f"{s.sample_id}.csv", x, fusion.fused_columns_for(s))
    RunManifest(
        "fuse", {"n_rois": R}, 0, datagen.dataset_hash(args.dataset), {"fused": "fused/"}, started, _now()
    ).write(out)
    print(f"fused {len(cohort.samples)} samples into {fused_dir}")
    return EXIT_OK


def train_config(args, data) -> trainer.TrainConfig:
    doc = _load_json(args.config)
    doc.setdefault("n_rois", data.x1.shape[1])
    doc.setdefault("n_features", data.x1.shape[2] - 1)
    doc.setdefault("n_classes", data.n_classes)
    for key in ("seed", "folds", "epochs", "graph_mode"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    return trainer.profile_config(args.profile, **doc)


def cmd_train(args) -> int:
    cohort = _read_cohort(args.dataset)
    doc = _load_json(args.config)
    data = trainer.prepare(cohort, doc.get("similarity", "centrality"))
    config = train_config(args, data)
    out = Path(args.out or _out_root() / f"train-{config.graph_mode}-seed{config.seed}")
    started = _now()
    result = trainer.run_experiment(config, data, parallel_folds=args.parallel_folds)
    paths = trainer.write_outputs(result, data, out)
    RunManifest(
        "train",
        config.to_dict(),
        config.seed,
        datagen.dataset_hash(args.dataset),
        {k: p.name for k, p in paths.items()},
        started,
        _now(),
    ).write(out)
    print(format_summary(json.loads(paths["metrics"].read_text())))
    return EXIT_OK


def format_summary(doc: dict) -> str:
    lines = [f"graph mode: {doc['graph_mode']}", f"{'metric':<20}{'mean':>10}{'std':>10}"]
    for key in trainer.METRIC_KEYS:
        s = doc["summary"][key]
        lines.append(f"{key:<20}{100 * s['mean']:>9.2f}%{100 * s['std']:>9.2f}%")
    return "\n".join(lines)


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    metrics = run / "metrics.json"
    if not metrics.is_file():
        raise DataError(f"{run} has no metrics.json")
    try:
        doc = json.loads(metrics.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{metrics} is corrupt: {exc}") from None
    print(format_summary(doc))
    if args.cost:
        est = trainer.estimate_cost(trainer.TrainConfig.from_dict(doc["config"]))
        print(f"classifier forward: {est.classifier_flops / 1e9:.3f} GFLOPs, "
              f"{est.classifier_activation_bytes / 2**20:.1f} MiB activations")
        print(f"generator forward:  {est.generator_flops / 1e9:.3f} GFLOPs, "
              f"{est.generator_activation_bytes / 2**20:.1f} MiB activations")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dwdgat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    g.add_argument("--config", help="JSON cohort spec (counts, rho, signal, seed, ...)")
    g.add_argument("--profile", choices=sorted(datagen.PROFILES), default="desk")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="run directory")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fuse", help="write one fused ROI matrix per sample")
    f.add_argument("dataset")
    f.add_argument("--out")
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("train", help="grouped cross-validation of the full pipeline")
    t.add_argument("dataset")
    t.add_argument("--config", help="JSON training config; flags override it")
    t.add_argument("--profile", choices=sorted(trainer.PROFILES), default="desk")
    t.add_argument("--graph-mode", choices=GRAPH_MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--folds", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--parallel-folds", type=int, default=1)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="summarise a finished run")
    r.add_argument("run_dir")
    r.add_argument("--cost", action="store_true", help="also print the forward cost estimate")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
