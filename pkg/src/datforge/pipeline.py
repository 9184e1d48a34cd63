"""Stage functions shared by the command line and the ablation grid.

Each stage reads its inputs from directories produced by earlier stages and
writes its outputs to a directory it is given; there is no other shared state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from datforge.augment import AugmentConfig
from datforge.config import RunConfig
from datforge.detector import Detection, DetectorConfig, predict
from datforge.errors import MissingArtifactError
from datforge.evalkit import AuditReport, MetricRow, audit_pseudo_labels, map50, metric_rows
from datforge.numerics import Tensor, serialize
from datforge.oracle import (
    LabellerConfig,
    LabellerModel,
    OracleConfig,
    OracleEncoder,
    generate_pseudo_labels,
    load_pseudo_labels,
    pretrain_oracle,
    train_labeller_head,
)
from datforge.scenegen import (
    DEFAULT_CLASSES,
    SOURCE_DOMAIN,
    TARGET_DOMAIN,
    WORLD_DOMAINS,
    Dataset,
    SceneSpec,
    generate_dataset,
    load_dataset,
)
from datforge.trainer import LabelSource, LossWeights, StudentConfig, StudentTrainer, TrainSchedule

log = logging.getLogger(__name__)

SPLITS = ("source_train", "source_val", "target_train", "target_val")


def scene_spec(cfg: RunConfig) -> SceneSpec:
    d = cfg.data
    return SceneSpec(image_size=d.image_size, class_count=d.class_count, class_names=DEFAULT_CLASSES[: d.class_count],
                     objects_per_image=d.objects_per_image, class_frequency=d.class_frequency, seed=d.seed,
                     patch_size=cfg.oracle.patch_size, rare_class_mode=True)


def world_spec(cfg: RunConfig) -> SceneSpec:
    # uniform class mix: the wide-domain encoder should not inherit the benchmark's rarity
    d = cfg.data
    k = d.class_count
    return SceneSpec(image_size=d.image_size, class_count=k, class_names=DEFAULT_CLASSES[:k],
                     objects_per_image=d.objects_per_image, class_frequency=(1.0 / k,) * k, seed=d.world_seed,
                     patch_size=cfg.oracle.patch_size, rare_class_mode=False)


def detector_config(cfg: RunConfig) -> DetectorConfig:
    return DetectorConfig(image_size=cfg.data.image_size, class_count=cfg.data.class_count)


def gen_data(cfg: RunConfig, out_dir) -> list:
    out_dir = Path(out_dir)
    spec, wspec = scene_spec(cfg), world_spec(cfg)
    d = cfg.data
    manifests = [
        generate_dataset(spec, SOURCE_DOMAIN, d.source_train, "train", out_dir / "source_train"),
        generate_dataset(spec, SOURCE_DOMAIN, d.source_val, "val", out_dir / "source_val"),
        generate_dataset(spec, TARGET_DOMAIN, d.target_train, "train", out_dir / "target_train"),
        generate_dataset(spec, TARGET_DOMAIN, d.target_val, "val", out_dir / "target_val"),
    ]
    for dom in WORLD_DOMAINS:
        manifests.append(generate_dataset(wspec, dom, d.world_train, "train", out_dir / "world" / f"{dom.name}_train"))
        manifests.append(generate_dataset(wspec, dom, d.world_val, "val", out_dir / "world" / f"{dom.name}_val"))
    return manifests


def _need(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} at {path}", producer)
    return path


def load_split(data_dir, name: str) -> Dataset:
    return load_dataset(_need(Path(data_dir) / name / "meta.json", f"dataset {name!r}", "gen-data").parent)


def load_world(data_dir, split: str = "train") -> list[Dataset]:
    return [load_split(Path(data_dir) / "world", f"{d.name}_{split}") for d in WORLD_DOMAINS]


def oracle_config(cfg: RunConfig, tier: str) -> OracleConfig:
    o = cfg.oracle
    return OracleConfig(size_tier=tier, patch_size=o.patch_size, pretrain_iterations=o.pretrain_iterations,
                        batch_size=o.batch_size, lr=o.lr, momentum=o.momentum,
                        background_weight=o.background_weight, hue_jitter=o.hue_jitter, seed=cfg.seed)


def pretrain(cfg: RunConfig, data_dir, tier: str) -> OracleEncoder:
    return pretrain_oracle(oracle_config(cfg, tier), load_world(data_dir), cfg.data.class_count)


def load_oracle(oracle_dir, tier: str) -> OracleEncoder:
    path = _need(Path(oracle_dir) / tier / "manifest.json", f"{tier} oracle encoder", "pretrain-oracle")
    return OracleEncoder.load(path.parent)


def labeller_config(cfg: RunConfig) -> LabellerConfig:
    lab = cfg.labeller
    return LabellerConfig(iterations=lab.iterations, batch_size=lab.batch_size, lr=lab.lr, momentum=lab.momentum,
                          frozen=lab.frozen, backbone_lr_scale=lab.backbone_lr_scale,
                          cosine_decay=lab.cosine_decay, seed=cfg.seed)


def train_labeller(cfg: RunConfig, data_dir, encoder: OracleEncoder) -> LabellerModel:
    return train_labeller_head(encoder, load_split(data_dir, "source_train"), detector_config(cfg),
                               labeller_config(cfg), AugmentConfig(), name=f"labeller-{encoder.config.size_tier}")


def load_labeller(labeller_dir) -> LabellerModel:
    _need(Path(labeller_dir) / "head" / "manifest.json", "labeller checkpoint", "train-labeller")
    return LabellerModel.load(labeller_dir)


def gen_labels(cfg: RunConfig, data_dir, labeller: LabellerModel, out_path) -> dict:
    return generate_pseudo_labels(labeller, load_split(data_dir, "target_train"), cfg.labeller.delta, out_path)


def student_config(cfg: RunConfig) -> StudentConfig:
    s = cfg.student
    return StudentConfig(
        schedule=TrainSchedule(s.n_init_sim, s.n_init_pl, s.n_max, s.n_init_ema),
        weights=LossWeights(s.lambda_unsup, s.lambda_sim),
        label_source=LabelSource(s.label_source, s.n_init_ema),
        alpha=s.alpha, lr=s.lr, momentum=s.momentum, batch_size=s.batch_size,
        proj_hidden=s.proj_hidden, delta=s.delta, seed=cfg.seed,
    )


@dataclass
class StudentInputs:
    source: Dataset
    target: Dataset
    oracle: OracleEncoder | None
    dino_labels: dict | None


def student_inputs(cfg: RunConfig, data_dir, oracle_dir=None, labels_path=None) -> StudentInputs:
    s = cfg.student
    oracle = None
    if s.lambda_sim > 0:
        if oracle_dir is None:
            raise MissingArtifactError("alignment encoder", "pretrain-oracle")
        oracle = load_oracle(oracle_dir, s.align_tier)
    labels = None
    if s.label_source != "mean_teacher" and s.n_init_pl < s.n_max:
        if labels_path is None or not Path(labels_path).exists():
            raise MissingArtifactError("pseudo-label file", "gen-labels")
        labels, _ = load_pseudo_labels(labels_path)
    return StudentInputs(load_split(data_dir, "source_train"), load_split(data_dir, "target_train"), oracle, labels)


def make_trainer(cfg: RunConfig, inputs: StudentInputs) -> StudentTrainer:
    return StudentTrainer(student_config(cfg), detector_config(cfg), inputs.source, inputs.target,
                          inputs.oracle, inputs.dino_labels, AugmentConfig())


def train_student(cfg: RunConfig, trainer: StudentTrainer, out_dir, eval_set: Dataset | None = None,
                  until: int | None = None) -> list[MetricRow]:
    """Run to ``until`` (default n_max), logging to ``out_dir``; optional periodic evaluation."""
    out_dir = Path(out_dir)
    stop = cfg.student.n_max if until is None else until
    every = cfg.student.eval_every
    rows: list[MetricRow] = []
    names = list(trainer.source.class_names)
    while trainer.iteration < stop:
        nxt = stop if not every else min(stop, (trainer.iteration // every + 1) * every)
        trainer.run(until=nxt)
        trainer.write_logs(out_dir)
        if every and eval_set is not None:
            rows.extend(metric_rows(cfg.run_id(), trainer.iteration, trainer.evaluate(eval_set), names))
    trainer.save(out_dir / "checkpoint")
    return rows


def load_teacher(student_dir) -> tuple[dict[str, Tensor], DetectorConfig, int]:
    """EMA teacher parameters, detector config and iteration from a student checkpoint."""
    path = _need(Path(student_dir) / "checkpoint" / "manifest.json", "student checkpoint", "train-student").parent
    tensors, meta = serialize.load_checkpoint(path)
    det = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["detector"].items()}
    params = {k[len("teacher/"):]: Tensor(v) for k, v in tensors.items() if k.startswith("teacher/")}
    return params, DetectorConfig(**det), int(meta["iteration"])


def evaluate_params(params, detector: DetectorConfig, dataset: Dataset) -> dict:
    return map50(predict(dataset.images, params, detector), dataset.boxes, detector.class_count)


def evaluate_params_labeller(labeller: LabellerModel, dataset: Dataset) -> dict:
    return map50(labeller.predict(dataset.images), dataset.boxes, labeller.detector.class_count)


def teacher_pseudo_labels(params, detector: DetectorConfig, dataset: Dataset) -> dict[int, list[Detection]]:
    """Teacher detections on unaugmented images after NMS; confidences kept for the audit."""
    dets = predict(dataset.images, params, detector)
    return {int(i): d for i, d in zip(dataset.ids, dets)}


def labeller_detections(labeller: LabellerModel, dataset: Dataset) -> dict[int, list[Detection]]:
    return {int(i): d for i, d in zip(dataset.ids, labeller.predict(dataset.images))}


def audit(labels: dict[int, list[Detection]], dataset: Dataset, iou: float, delta: float) -> AuditReport:
    gt = {int(i): b for i, b in zip(dataset.ids, dataset.boxes)}
    return audit_pseudo_labels(labels, gt, dataset.class_names, iou, delta)
