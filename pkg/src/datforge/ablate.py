"""Batch runner for the label-source x alignment grid and the encoder-size grid.

Shared stages (data, both encoder tiers, both labellers, their pseudo-labels)
run once. Per seed, the student is trained through the warm-up phase with and
without alignment; each warm-up checkpoint then branches into one
continuation per label source, which is valid because label sources only
act from ``n_init_pl`` on.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from datforge import pipeline
from datforge.config import BENCHMARK, RunConfig, apply_overrides, build_config, load_config
from datforge.errors import DatForgeError
from datforge.evalkit import AuditReport, AuditRow, MetricRow, emit_report, metric_rows, write_audit_csv

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (1, 2, 3)


@dataclass
class SeedResult:
    seed: int
    source_only: float  # target mAP at n_init_pl, no alignment
    source_only_sim: float  # target mAP at n_init_pl, with alignment
    mean_teacher: float
    dino_large: float
    mean_teacher_sim: float
    dino_large_sim: float
    dino_small_sim: float
    per_class: dict = field(default_factory=dict)


@dataclass
class GridResult:
    seeds: list[SeedResult]
    labeller_map: dict  # tier -> target-val mAP
    labeller_source_map: dict  # tier -> source-val mAP
    audit_source_only: AuditReport
    audit_labeller: AuditReport
    metrics: list[MetricRow]
    seconds: float

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(s, name) for s in self.seeds]))

    def summary(self) -> dict:
        keys = ("source_only", "source_only_sim", "mean_teacher", "dino_large", "mean_teacher_sim", "dino_large_sim",
                "dino_small_sim")
        return {
            "seeds": [s.seed for s in self.seeds],
            "mean_target_map": {k: self.mean(k) for k in keys},
            "per_seed": [asdict(s) for s in self.seeds],
            "labeller_target_map": self.labeller_map,
            "labeller_source_map": self.labeller_source_map,
            "audit_ratios": {
                "source_only": {r.class_name: r.ratio for r in self.audit_source_only.rows},
                "labeller_large": {r.class_name: r.ratio for r in self.audit_labeller.rows},
            },
            "seconds": self.seconds,
        }


def benchmark_config(base: RunConfig | None = None) -> RunConfig:
    doc = (base or RunConfig()).model_dump(mode="json")
    for section, values in BENCHMARK.items():
        doc[section].update(values)
    return build_config(doc)


def _with(cfg: RunConfig, seed: int | None = None, **student) -> RunConfig:
    doc = cfg.model_dump(mode="json")
    if seed is not None:
        doc["seed"] = seed
    doc["student"].update(student)
    return build_config(doc)


def prepare_shared(cfg: RunConfig, root: Path) -> dict:
    """Data, encoders, labellers and pseudo-label files shared by every grid cell."""
    data = root / "data"
    if not (data / "target_val" / "meta.json").exists():
        pipeline.gen_data(cfg, data)
    shared = {"data": data, "oracle": root / "oracle", "labeller_map": {}, "labeller_source_map": {}, "labels": {}}
    target_val = pipeline.load_split(data, "target_val")
    source_val = pipeline.load_split(data, "source_val")
    for tier in ("small", "large"):
        enc_dir = root / "oracle" / tier
        if not (enc_dir / "manifest.json").exists():
            pipeline.pretrain(cfg, data, tier).save(enc_dir)
        lab_dir = root / "labeller" / tier
        if not (lab_dir / "head" / "manifest.json").exists():
            pipeline.train_labeller(cfg, data, pipeline.load_oracle(root / "oracle", tier)).save(lab_dir)
        labeller = pipeline.load_labeller(lab_dir)
        labels_path = root / "labeller" / f"pseudo_labels_{tier}.json"
        if not labels_path.exists():
            pipeline.gen_labels(cfg, data, labeller, labels_path)
        shared["labels"][tier] = labels_path
        shared["labeller_map"][tier] = pipeline.evaluate_params_labeller(labeller, target_val)["map"]
        shared["labeller_source_map"][tier] = pipeline.evaluate_params_labeller(labeller, source_val)["map"]
        log.info("labeller %s: target mAP %.4f", tier, shared["labeller_map"][tier])
    return shared


def run_seed(cfg: RunConfig, seed: int, shared: dict, root: Path, rows: list[MetricRow]) -> tuple[SeedResult, dict]:
    data, oracle = shared["data"], shared["oracle"]
    target_val = pipeline.load_split(data, "target_val")
    names = target_val.class_names
    s = cfg.student
    n_pl = s.n_init_pl
    out = root / f"seed{seed}"
    results: dict[str, dict] = {}

    def score(tag: str, trainer) -> float:
        res = trainer.evaluate(target_val)
        results[tag] = res
        rows.extend(metric_rows(f"{tag}/seed{seed}", trainer.iteration, res, names))
        log.info("seed %d %s @%d: target mAP %.4f", seed, tag, trainer.iteration, res["map"])
        return res["map"]

    # warm-up without alignment: the plain source-only student
    so_cfg = _with(cfg, seed, lambda_sim=0.0, label_source="mean_teacher", n_max=n_pl)
    so = pipeline.make_trainer(so_cfg, pipeline.student_inputs(so_cfg, data))
    pipeline.train_student(so_cfg, so, out / "source_only", until=n_pl)
    so_map = score("source_only", so)

    # warm-up with alignment, checkpointed at n_init_pl for the branches
    warm_cfg = _with(cfg, seed, label_source="mean_teacher", n_max=n_pl)
    warm = pipeline.make_trainer(warm_cfg, pipeline.student_inputs(warm_cfg, data, oracle))
    pipeline.train_student(warm_cfg, warm, out / "warmup_sim", until=n_pl)
    sim_map = score("source_only_sim", warm)

    # (tag, warm-up checkpoint, label source, pseudo-labels, alignment weight)
    branches = [
        ("mean_teacher", "source_only", "mean_teacher", None, 0.0),
        ("dino_large", "source_only", "dino", shared["labels"]["large"], 0.0),
        ("mean_teacher_sim", "warmup_sim", "mean_teacher", None, s.lambda_sim),
        ("dino_large_sim", "warmup_sim", "dino", shared["labels"]["large"], s.lambda_sim),
        ("dino_small_sim", "warmup_sim", "dino", shared["labels"]["small"], s.lambda_sim),
    ]
    final = {}
    for tag, start, mode, labels_path, lam in branches:
        bcfg = _with(cfg, seed, label_source=mode, lambda_sim=lam)
        trainer = pipeline.make_trainer(bcfg, pipeline.student_inputs(bcfg, data, oracle, labels_path))
        trainer.load(out / start / "checkpoint")
        pipeline.train_student(bcfg, trainer, out / tag)
        final[tag] = score(tag, trainer)

    teacher = dict(so.teacher)
    result = SeedResult(seed, so_map, sim_map, **final, per_class={k: v["per_class_ap"] for k, v in results.items()})
    return result, teacher


def pool_audits(reports: Sequence[AuditReport]) -> AuditReport:
    """Sum per-class counts of several audits over the same classes."""
    rows = [AuditRow(r.class_name) for r in reports[0].rows]
    for rep in reports:
        for acc, r in zip(rows, rep.rows):
            acc.gt_count += r.gt_count
            acc.confident_pl_count += r.confident_pl_count
            acc.correct_class_matches += r.correct_class_matches
            acc.wrong_class_matches += r.wrong_class_matches
            acc.unmatched_fp += r.unmatched_fp
    return AuditReport(rows)


def run_grid(cfg: RunConfig, root, seeds: Sequence[int] = DEFAULT_SEEDS) -> GridResult:
    """Every cell of both grids; writes metrics.csv, audit csvs and summary.json under ``root``."""
    start = time.perf_counter()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shared = prepare_shared(cfg, root)
    rows: list[MetricRow] = []
    seed_results = []
    teachers = []
    for seed in seeds:
        res, teacher = run_seed(cfg, seed, shared, root, rows)
        seed_results.append(res)
        teachers.append(teacher)

    # pseudo-label audit on target train: source-only teachers (counts pooled over seeds) vs the large labeller
    target_train = pipeline.load_split(shared["data"], "target_train")
    det = pipeline.detector_config(cfg)
    audit_so = pool_audits([
        pipeline.audit(pipeline.teacher_pseudo_labels(t, det, target_train), target_train, cfg.audit.iou,
                       cfg.audit.delta)
        for t in teachers
    ])
    large = pipeline.load_labeller(root / "labeller" / "large")
    audit_lab = pipeline.audit(pipeline.labeller_detections(large, target_train), target_train,
                               cfg.audit.iou, cfg.audit.delta)

    result = GridResult(seed_results, shared["labeller_map"], shared["labeller_source_map"], audit_so, audit_lab,
                        rows, time.perf_counter() - start)
    emit_report(root / "report", rows, audit_so)
    write_audit_csv(root / "report" / "audit_labeller_large.csv", audit_lab)
    (root / "summary.json").write_text(json.dumps(result.summary(), indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return result


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="dat-forge-ablate", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run config; the benchmark schedule is layered on top")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))
    parser.add_argument("--out", required=True, help="output directory for the grid")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        base = benchmark_config(load_config(args.config)).model_dump(mode="json")
        cfg = build_config(apply_overrides(base, args.overrides))
        result = run_grid(cfg, args.out, args.seeds)
    except DatForgeError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(result.summary()["mean_target_map"], sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
