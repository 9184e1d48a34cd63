"""``dat-forge`` command line: one command per pipeline stage, one directory per config hash."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Callable, Sequence

from datforge import pipeline
from datforge.config import RunConfig, load_config
from datforge.errors import ConfigError, DatForgeError, MissingArtifactError
from datforge.evalkit import emit_report, metric_rows, read_audit_csv, read_metrics_csv, write_audit_csv, write_metrics_csv
from datforge.oracle import load_pseudo_labels, patch_accuracy

RUN_ROOT_ENV = "DATFORGE_RUN_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("datforge")


class Run:
    """Resolved locations for one configuration."""

    def __init__(self, config: RunConfig, root: Path):
        self.config = config
        self.dir = root / config.run_id()
        p = config.paths
        self.data = Path(p.data) if p.data else self.dir / "data"
        self.oracle = Path(p.oracle) if p.oracle else self.dir / "oracle"
        self.labeller = Path(p.labeller) if p.labeller else self.dir / "labeller"
        self.pseudo_labels = Path(p.pseudo_labels) if p.pseudo_labels else self.dir / "pseudo_labels.json"
        self.student = Path(p.student) if p.student else self.dir / "student"

    def marker(self, command: str) -> Path:
        return self.dir / ".complete" / command

    def begin(self, command: str, force: bool) -> None:
        if self.marker(command).exists() and not force:
            raise ConfigError("--force", f"run {self.dir.name} already completed {command!r}; pass --force to redo it")
        self.dir.mkdir(parents=True, exist_ok=True)
        resolved = json.dumps(self.config.model_dump(mode="json"), indent=1, sort_keys=True) + "\n"
        (self.dir / "config.json").write_text(resolved, encoding="utf-8")

    def finish(self, command: str) -> None:
        self.marker(command).parent.mkdir(parents=True, exist_ok=True)
        self.marker(command).write_text("ok\n", encoding="utf-8")


def _fresh(path: Path) -> Path:
    if path.is_dir():
        shutil.rmtree(path)
    elif path.exists():
        path.unlink()
    return path


def cmd_gen_data(run: Run) -> dict:
    manifests = pipeline.gen_data(run.config, _fresh(run.data))
    return {"datasets": {m.name: m.count for m in manifests}}


def cmd_pretrain_oracle(run: Run) -> dict:
    out = {}
    val = pipeline.load_world(run.data, "val")
    for tier in run.config.oracle.tiers:
        enc = pipeline.pretrain(run.config, run.data, tier)
        enc.save(_fresh(run.oracle / tier))
        acc = [patch_accuracy(enc, v, run.config.data.class_count) for v in val]
        out[tier] = {"parameters": enc.parameter_count(), "digest": enc.digest(),
                     "world_val_patch_accuracy": round(min(acc), 4)}
    return out


def cmd_train_labeller(run: Run) -> dict:
    enc = pipeline.load_oracle(run.oracle, run.config.labeller.tier)
    model = pipeline.train_labeller(run.config, run.data, enc)
    model.save(_fresh(run.labeller))
    src = pipeline.evaluate_params_labeller(model, pipeline.load_split(run.data, "source_val"))
    return {"labeller": model.name, "source_val_map50": src["map"]}


def cmd_gen_labels(run: Run) -> dict:
    model = pipeline.load_labeller(run.labeller)
    labels = pipeline.gen_labels(run.config, run.data, model, run.pseudo_labels)
    return {"pseudo_labels": str(run.pseudo_labels), "boxes": sum(len(v) for v in labels.values())}


def cmd_train_student(run: Run) -> dict:
    cfg = run.config
    inputs = pipeline.student_inputs(cfg, run.data, run.oracle, run.pseudo_labels)
    trainer = pipeline.make_trainer(cfg, inputs)
    _fresh(run.student)
    eval_set = pipeline.load_split(run.data, "target_val") if cfg.student.eval_every else None
    rows = pipeline.train_student(cfg, trainer, run.student, eval_set)
    if rows:
        write_metrics_csv(run.student / "metrics.csv", rows)
    return {"iterations": trainer.iteration, "checkpoint": str(run.student / "checkpoint")}


def cmd_evaluate(run: Run) -> dict:
    cfg = run.config
    dataset = pipeline.load_split(run.data, cfg.evaluate.split)
    if cfg.evaluate.model == "student":
        params, det, iteration = pipeline.load_teacher(run.student)
        result = pipeline.evaluate_params(params, det, dataset)
    else:
        model = pipeline.load_labeller(run.labeller)
        result, iteration = pipeline.evaluate_params_labeller(model, dataset), model.config.iterations
    rows = metric_rows(cfg.run_id(), iteration, result, dataset.class_names)
    write_metrics_csv(run.dir / "metrics.csv", rows)
    return {"model": cfg.evaluate.model, "split": cfg.evaluate.split, "map50": result["map"],
            "per_class_ap": result["per_class_ap"]}


def cmd_audit_labels(run: Run) -> dict:
    cfg = run.config
    dataset = pipeline.load_split(run.data, "target_train")
    if cfg.audit.model == "labeller":
        if not run.pseudo_labels.exists():
            raise MissingArtifactError(f"pseudo-label file at {run.pseudo_labels}", "gen-labels")
        labels, _ = load_pseudo_labels(run.pseudo_labels)
    else:
        params, det, _ = pipeline.load_teacher(run.student)
        labels = pipeline.teacher_pseudo_labels(params, det, dataset)
    report = pipeline.audit(labels, dataset, cfg.audit.iou, cfg.audit.delta)
    write_audit_csv(run.dir / "audit.csv", report)
    return {"model": cfg.audit.model, "ratios": {r.class_name: round(r.ratio, 4) for r in report.rows}}


def cmd_report(run: Run) -> dict:
    metrics_path, audit_path = run.dir / "metrics.csv", run.dir / "audit.csv"
    if not metrics_path.exists() and not audit_path.exists():
        raise MissingArtifactError(f"metrics.csv or audit.csv in {run.dir}", "evaluate")
    metrics = read_metrics_csv(metrics_path) if metrics_path.exists() else None
    audit = read_audit_csv(audit_path) if audit_path.exists() else None
    written = emit_report(run.dir / "report", metrics, audit)
    return {"files": [str(p) for p in written]}


COMMANDS: dict[str, Callable[[Run], dict]] = {
    "gen-data": cmd_gen_data,
    "pretrain-oracle": cmd_pretrain_oracle,
    "train-labeller": cmd_train_labeller,
    "gen-labels": cmd_gen_labels,
    "train-student": cmd_train_student,
    "evaluate": cmd_evaluate,
    "audit-labels": cmd_audit_labels,
    "report": cmd_report,
}


def run_root(explicit: str | None = None) -> Path:
    return Path(explicit or os.environ.get(RUN_ROOT_ENV) or "runs")


def run_command(name: str, config: RunConfig, root: Path | None = None, force: bool = False) -> dict:
    """Execute one stage; raises structured errors, returns a JSON-able summary."""
    if name not in COMMANDS:
        raise ConfigError("command", f"unknown command {name!r}; expected one of {sorted(COMMANDS)}")
    run = Run(config, run_root() if root is None else Path(root))
    run.begin(name, force)
    summary = COMMANDS[name](run)
    run.finish(name)
    return {"command": name, "run_dir": str(run.dir), **summary}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors share exit code 1 with config errors
        self.print_usage(sys.stderr)
        _diagnose("UsageError", message)
        raise SystemExit(EXIT_USAGE)


def _diagnose(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dat-forge", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, applied after the file; repeatable")
    parser.add_argument("--run-root", help=f"directory holding run directories (default ${RUN_ROOT_ENV} or ./runs)")
    parser.add_argument("--force", action="store_true", help="redo a stage this run already completed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        summary = run_command(args.command, config, run_root(args.run_root), args.force)
    except ConfigError as exc:
        _diagnose("ConfigError", str(exc), key=str(exc.key))
        return EXIT_USAGE
    except MissingArtifactError as exc:
        _diagnose("MissingArtifactError", str(exc), producer=exc.producer)
        return EXIT_RUNTIME
    except DatForgeError as exc:
        _diagnose(type(exc).__name__, str(exc))
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        _diagnose(type(exc).__name__, str(exc))
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
