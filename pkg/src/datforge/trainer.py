"""Student training: phase schedule, EMA teacher, feature alignment and label sources."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from datforge.augment import AugmentConfig, PairBatch, augment_batch, transform_boxes
from datforge.detector import (
    Detection,
    DetectorConfig,
    batch_targets,
    decode,
    detection_loss,
    forward,
    init_detector,
    nms,
    predict,
    threshold_detections,
)
from datforge.errors import ConsistencyError, NonFiniteError, ShapeError
from datforge.evalkit import map50
from datforge.numerics import SGD, Tensor, activation, bilinear_interpolate, cosine_map, linear, no_grad, serialize
from datforge.oracle import OracleEncoder, encode_patches
from datforge.scenegen import BoxLabel, Dataset

log = logging.getLogger(__name__)

LABEL_MODES = ("dino", "mean_teacher", "ema_only", "ema_mixed")
LOG_COLUMNS = ("iter", "loss_total", "loss_det_s", "loss_det_t", "loss_sim", "phase_flags")


@dataclass(frozen=True)
class TrainSchedule:
    n_init_sim: int = 500
    n_init_pl: int = 2000
    n_max: int = 6000
    n_init_ema: int | None = None

    def __post_init__(self):
        if not 0 <= self.n_init_sim <= self.n_init_pl <= self.n_max:
            raise ValueError(
                f"schedule needs 0 <= n_init_sim <= n_init_pl <= n_max, got "
                f"{self.n_init_sim}, {self.n_init_pl}, {self.n_max}"
            )
        if self.n_init_ema is not None and self.n_init_ema < self.n_init_pl:
            raise ValueError(f"n_init_ema ({self.n_init_ema}) must be >= n_init_pl ({self.n_init_pl})")


@dataclass(frozen=True)
class LossWeights:
    lambda_unsup: float = 1.0
    lambda_sim: float = 1.0

    def __post_init__(self):
        if self.lambda_unsup < 0 or self.lambda_sim < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LabelSource:
    mode: str = "dino"
    n_init_ema: int | None = None

    def __post_init__(self):
        if self.mode not in LABEL_MODES:
            raise ValueError(f"label source mode must be one of {LABEL_MODES}, got {self.mode!r}")
        if self.mode in ("ema_only", "ema_mixed") and self.n_init_ema is None:
            raise ValueError(f"label source {self.mode!r} needs n_init_ema")

    @property
    def needs_dino(self) -> bool:
        return self.mode != "mean_teacher"


@dataclass(frozen=True)
class StudentConfig:
    schedule: TrainSchedule = TrainSchedule()
    weights: LossWeights = LossWeights()
    label_source: LabelSource = LabelSource()
    alpha: float = 0.999
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    proj_hidden: int = 128
    delta: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.alpha}")


@dataclass(frozen=True)
class PhaseFlags:
    align_source: bool
    align_target: bool
    use_pseudo_labels: bool

    def code(self) -> str:
        return "".join("1" if f else "0" for f in (self.align_source, self.align_target, self.use_pseudo_labels))


def phase_flags(iteration: int, schedule: TrainSchedule) -> PhaseFlags:
    return PhaseFlags(True, iteration >= schedule.n_init_sim, iteration >= schedule.n_init_pl)


# -- EMA ------------------------------------------------------------------

@dataclass
class EmaState:
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")

    @classmethod
    def from_student(cls, student: dict[str, Tensor], alpha: float) -> "EmaState":
        return cls(student, {k: Tensor(v.data.copy()) for k, v in student.items()}, alpha)


def ema_update(state: EmaState) -> EmaState:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    if set(state.student) != set(state.teacher):
        diff = sorted(set(state.student) ^ set(state.teacher))
        raise ConsistencyError(f"student/teacher parameter names differ: {diff}")
    a = state.alpha
    for name, s in state.student.items():
        t = state.teacher[name]
        if t.shape != s.shape:
            raise ShapeError(f"teacher {name!r} shape {t.shape} != student shape {s.shape}")
        t.data = (a * t.data + (1.0 - a) * s.data).astype(t.dtype)
    return state


# -- alignment ------------------------------------------------------------

def init_projection(in_channels: int, hidden: int, out_channels: int, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 23])
    return {
        "proj.fc1.weight": Tensor(rng.normal(0, np.sqrt(2.0 / in_channels), (in_channels, hidden)).astype(dtype), True),
        "proj.fc1.bias": Tensor(np.zeros(hidden, dtype), True),
        "proj.fc2.weight": Tensor(rng.normal(0, np.sqrt(1.0 / hidden), (hidden, out_channels)).astype(dtype), True),
        "proj.fc2.bias": Tensor(np.zeros(out_channels, dtype), True),
    }


def project(features: Tensor, head: Mapping[str, Tensor]) -> Tensor:
    """Apply the 2-layer MLP independently at each spatial location."""
    n, c, h, w = features.shape
    if head["proj.fc1.weight"].shape[0] != c:
        raise ShapeError(f"projection expects {head['proj.fc1.weight'].shape[0]} input channels, got {c}")
    flat = features.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    hid = activation(linear(flat, head["proj.fc1.weight"], head["proj.fc1.bias"]), "relu")
    out = linear(hid, head["proj.fc2.weight"], head["proj.fc2.bias"])
    return out.reshape(n, h, w, out.shape[1]).transpose(0, 3, 1, 2)


def alignment_loss(student_features: Tensor, oracle_features: Tensor, head: Mapping[str, Tensor],
                   eps: float = 1e-8) -> Tensor:
    """Mean over images and oracle grid locations of 1 - cos(interp(g(x)), x_big)."""
    if student_features.shape[0] != oracle_features.shape[0]:
        raise ShapeError("student and oracle batches differ in size")
    projected = project(student_features, head)
    if projected.shape[1] != oracle_features.shape[1]:
        raise ShapeError(
            f"projected channels {projected.shape[1]} != oracle channels {oracle_features.shape[1]}"
        )
    resized = bilinear_interpolate(projected, oracle_features.shape[2], oracle_features.shape[3])
    target = Tensor(oracle_features.data)  # frozen: no gradient path into the oracle
    return 1.0 - cosine_map(resized, target, eps).mean()


def _as_value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def combined_loss(l_det_source, l_det_target, l_sim, weights: LossWeights):
    """L = L_det_S + lambda_unsup * L_det_T + lambda_sim * L_sim."""
    for name, term in (("det_source", l_det_source), ("det_target", l_det_target), ("sim", l_sim)):
        if not math.isfinite(_as_value(term)):
            raise NonFiniteError(f"loss term {name} is not finite")
    return l_det_source + weights.lambda_unsup * l_det_target + weights.lambda_sim * l_sim


# -- label sources --------------------------------------------------------

def _dino_boxes(dino_labels: Mapping[int, list[Detection]], batch: PairBatch, image_size: int) -> list[list[BoxLabel]]:
    out = []
    for image_id, rec in zip(batch.ids, batch.records):
        if image_id not in dino_labels:
            raise ConsistencyError(f"pseudo-label file has no entry for image id {image_id}")
        out.append(transform_boxes([d.box for d in dino_labels[image_id]], rec, image_size))
    return out


def teacher_labels(teacher: Mapping[str, Tensor], weak_images: np.ndarray, detector: DetectorConfig,
                   delta: float) -> list[list[BoxLabel]]:
    with no_grad():
        out = forward(Tensor(weak_images), dict(teacher), detector)
    dets = decode(out, detector.decode_conf_floor, detector)
    return [[d.box for d in threshold_detections(nms(ds, detector.nms_iou), delta)] for ds in dets]


def label_provenance(iteration: int, source: LabelSource) -> str:
    """Which labeller supplies target labels at this iteration: 'dino' or 'teacher'."""
    if source.mode == "dino":
        return "dino"
    if source.mode == "mean_teacher":
        return "teacher"
    if iteration < source.n_init_ema:
        return "dino"
    if source.mode == "ema_only":
        return "teacher"
    return "dino" if iteration % 2 == 0 else "teacher"


def select_label_source(iteration: int, source: LabelSource, dino_labels, teacher: Mapping[str, Tensor],
                        batch: PairBatch, detector: DetectorConfig, delta: float) -> tuple[list[list[BoxLabel]], str]:
    provenance = label_provenance(iteration, source)
    if provenance == "dino":
        if dino_labels is None:
            raise ConsistencyError(f"label source {source.mode!r} needs a DINO pseudo-label file")
        return _dino_boxes(dino_labels, batch, detector.image_size), provenance
    return teacher_labels(teacher, batch.weak, detector, delta), provenance


# -- training loop --------------------------------------------------------

@dataclass
class LossBreakdown:
    iteration: int
    loss_total: float
    loss_det_s: float
    loss_det_t: float
    loss_sim: float
    flags: PhaseFlags
    provenance: str = "none"

    def row(self) -> list:
        return [self.iteration, f"{self.loss_total:.9g}", f"{self.loss_det_s:.9g}", f"{self.loss_det_t:.9g}",
                f"{self.loss_sim:.9g}", self.flags.code()]


@dataclass
class StudentTrainer:
    """Holds student, EMA teacher, projection head, optimizer and rng for one run."""

    config: StudentConfig
    detector: DetectorConfig
    source: Dataset
    target: Dataset | None = None
    oracle: OracleEncoder | None = None
    dino_labels: Mapping[int, list[Detection]] | None = None
    augment: AugmentConfig = AugmentConfig()
    history: list[LossBreakdown] = field(default_factory=list)
    _logged: int = field(default=0, repr=False)

    def __post_init__(self):
        cfg = self.config
        if cfg.label_source.needs_dino and self.dino_labels is None and cfg.schedule.n_init_pl < cfg.schedule.n_max:
            raise ConsistencyError(f"label source {cfg.label_source.mode!r} requires a pseudo-label file")
        if cfg.weights.lambda_sim > 0 and self.oracle is None:
            raise ConsistencyError("alignment weight > 0 requires an alignment encoder")
        student = init_detector(self.detector, cfg.seed)
        self.ema = EmaState.from_student(student, cfg.alpha)
        c_b = self.oracle.feature_channels if self.oracle is not None else self.detector.feature_channels
        self.proj = init_projection(self.detector.feature_channels, cfg.proj_hidden, c_b, cfg.seed)
        self.optimizer = SGD({**student, **self.proj}, cfg.lr, cfg.momentum)
        self.iteration = 0
        # separate streams so enabling target-side work leaves the source batches unchanged
        self.rng = np.random.default_rng([cfg.seed, 31])
        self.rng_target = np.random.default_rng([cfg.seed, 37])

    @property
    def student(self) -> dict[str, Tensor]:
        return self.ema.student

    @property
    def teacher(self) -> dict[str, Tensor]:
        return self.ema.teacher

    def _sample(self, dataset: Dataset, rng: np.random.Generator) -> PairBatch:
        pick = rng.choice(len(dataset), size=self.config.batch_size, replace=False)
        return augment_batch([dataset[int(i)] for i in pick], rng, self.augment)

    def train_step(self) -> LossBreakdown:
        cfg, det = self.config, self.detector
        it = self.iteration
        if it >= cfg.schedule.n_max:
            raise ValueError(f"iteration {it} is past n_max={cfg.schedule.n_max}")
        flags = phase_flags(it, cfg.schedule)
        use_sim = cfg.weights.lambda_sim > 0

        src = self._sample(self.source, self.rng)
        images_s, boxes_s = src.both_views()
        out_s = forward(Tensor(images_s), self.student, det)
        l_ob, l_cls = detection_loss(out_s, batch_targets(boxes_s, det))
        l_det_s = l_ob + l_cls
        sim_terms = []
        if use_sim:
            sim_terms.append(alignment_loss(out_s.features, encode_patches(self.oracle, images_s), self.proj))

        l_det_t = Tensor(np.zeros((), np.float32))
        provenance = "none"
        align_t = flags.align_target and use_sim
        if (align_t or flags.use_pseudo_labels) and self.target is not None:
            tgt = self._sample(self.target, self.rng_target)
            images_t, _ = tgt.both_views()
            out_t = forward(Tensor(images_t), self.student, det)
            if align_t:
                sim_terms.append(alignment_loss(out_t.features, encode_patches(self.oracle, images_t), self.proj))
            if flags.use_pseudo_labels:
                labels, provenance = select_label_source(
                    it, cfg.label_source, self.dino_labels, self.teacher, tgt, det, cfg.delta
                )
                lt_ob, lt_cls = detection_loss(out_t, batch_targets(labels + labels, det))
                l_det_t = lt_ob + lt_cls
        l_sim = sim_terms[0] if sim_terms else Tensor(np.zeros((), np.float32))
        for extra in sim_terms[1:]:
            l_sim = l_sim + extra

        total = combined_loss(l_det_s, l_det_t, l_sim, cfg.weights)
        for p in self.optimizer.params.values():
            p.grad = None
        total.backward()
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.optimizer.params.items()}
        self.optimizer.step(grads)
        ema_update(self.ema)
        self.iteration += 1
        rec = LossBreakdown(it, total.item(), l_det_s.item(), l_det_t.item(), l_sim.item(), flags, provenance)
        self.history.append(rec)
        return rec

    def run(self, until: int | None = None, log_every: int = 100) -> None:
        stop = self.config.schedule.n_max if until is None else min(until, self.config.schedule.n_max)
        while self.iteration < stop:
            rec = self.train_step()
            if rec.iteration % log_every == 0:
                log.info("iter %d total %.4f det_s %.4f det_t %.4f sim %.4f flags %s", rec.iteration,
                         rec.loss_total, rec.loss_det_s, rec.loss_det_t, rec.loss_sim, rec.flags.code())

    def evaluate(self, dataset: Dataset, use_teacher: bool = True) -> dict:
        """mAP@50 of the EMA teacher (default) on a labelled dataset."""
        params = self.teacher if use_teacher else self.student
        dets = predict(dataset.images, params, self.detector)
        return map50(dets, dataset.boxes, self.detector.class_count)

    # -- persistence ------------------------------------------------------
    def _tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.student.items():
            out[f"student/{k}"] = v.data
        for k, v in self.teacher.items():
            out[f"teacher/{k}"] = v.data
        for k, v in self.proj.items():
            out[f"proj/{k}"] = v.data
        for k, v in self.optimizer.velocity.items():
            out[f"momentum/{k}"] = v
        return out

    def save(self, directory) -> None:
        meta = {
            "kind": "student",
            "iteration": self.iteration,
            "rng_state": self.rng.bit_generator.state,
            "rng_target_state": self.rng_target.bit_generator.state,
            "alpha": self.ema.alpha,
            "config": _jsonable(asdict(self.config)),
            "detector": _jsonable(asdict(self.detector)),
        }
        serialize.save_checkpoint(directory, self._tensors(), meta)

    def load(self, directory) -> None:
        expected = {k: v.shape for k, v in self._tensors().items()}
        tensors, meta = serialize.load_checkpoint(directory, expected)
        for k, v in self.student.items():
            v.data = tensors[f"student/{k}"].astype(v.dtype)
        for k, v in self.teacher.items():
            v.data = tensors[f"teacher/{k}"].astype(v.dtype)
        for k, v in self.proj.items():
            v.data = tensors[f"proj/{k}"].astype(v.dtype)
        self.optimizer.load_state_arrays({k: tensors[f"momentum/{k}"] for k in self.optimizer.velocity})
        self.iteration = int(meta["iteration"])
        self.rng.bit_generator.state = meta["rng_state"]
        self.rng_target.bit_generator.state = meta["rng_target_state"]

    def write_logs(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        fresh = self.history[self._logged :]
        write_train_log(directory / "train_log.csv", fresh)
        with open(directory / "label_sources.csv", "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if fh.tell() == 0:
                w.writerow(("iter", "source"))
            for rec in fresh:
                if rec.provenance != "none":
                    w.writerow((rec.iteration, rec.provenance))
        self._logged = len(self.history)


def write_train_log(path, history) -> None:
    """Append rows to the training log, writing the header only for a new file."""
    path = Path(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fh.tell() == 0:
            w.writerow(LOG_COLUMNS)
        for rec in history:
            w.writerow(rec.row())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
