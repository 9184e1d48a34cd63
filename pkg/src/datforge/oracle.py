"""Frozen wide-domain encoder, the detector head trained on top of it, and offline pseudo-labelling.

The encoder stands in for a large self-supervised vision backbone: a patch
embedding followed by 3x3 conv mixing blocks, pretrained once on the
multi-domain world family and then frozen.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from datforge.augment import AugmentConfig, augment_batch, weak_augment
from datforge.detector import (
    Detection,
    DetectorConfig,
    DetectorOutput,
    batch_targets,
    decode,
    detection_loss,
    head_forward,
    init_head,
    nms,
    threshold_detections,
)
from datforge.errors import FormatError, NonFiniteError, ShapeError
from datforge.numerics import SGD, Tensor, conv2d, cosine_map, cross_entropy_sum, l2_normalize, no_grad, relu, serialize
from datforge.scenegen import BoxLabel, Dataset, DomainSpec, LabeledImage, apply_domain, hue_rotation_matrix

log = logging.getLogger(__name__)

TIERS = {
    # tier -> (channels, 3x3 mixing blocks)
    "small": (32, 2),
    "large": (128, 3),
}


@dataclass(frozen=True)
class OracleConfig:
    size_tier: str = "small"
    patch_size: int = 4
    pretrain_iterations: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    background_weight: float = 0.25
    hue_jitter: float = 180.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hue_jitter <= 180.0:
            raise ValueError(f"hue_jitter must lie in [0, 180] degrees, got {self.hue_jitter}")
        if self.size_tier not in TIERS:
            raise ValueError(f"size_tier must be one of {sorted(TIERS)}, got {self.size_tier!r}")

    @property
    def channels(self) -> int:
        return TIERS[self.size_tier][0]

    @property
    def blocks(self) -> int:
        return TIERS[self.size_tier][1]


@dataclass
class OracleEncoder:
    config: OracleConfig
    params: dict[str, Tensor]
    curve: list[float] = field(default_factory=list)

    @property
    def feature_channels(self) -> int:
        return self.config.channels

    def parameter_count(self) -> int:
        return int(sum(p.size for name, p in self.params.items() if name.startswith("encoder.")))

    def digest(self) -> str:
        return serialize.state_digest({k: v.data for k, v in self.params.items() if k.startswith("encoder.")})

    def save(self, directory) -> None:
        serialize.save_checkpoint(directory, {k: v.data for k, v in self.params.items()},
                                  {"kind": "oracle", "config": asdict(self.config), "curve": self.curve})

    @classmethod
    def load(cls, directory) -> "OracleEncoder":
        tensors, meta = serialize.load_checkpoint(directory)
        if meta.get("kind") != "oracle":
            raise FormatError(directory, "checkpoint is not an oracle encoder")
        config = OracleConfig(**meta["config"])
        params = {k: Tensor(v) for k, v in tensors.items()}
        return cls(config, params, list(meta.get("curve", [])))


def init_encoder(config: OracleConfig, class_count: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    c, p = config.channels, config.patch_size
    params = {}

    def add(name, out_c, in_c, k):
        std = np.sqrt(2.0 / (in_c * k * k))
        params[f"{name}.weight"] = Tensor(rng.normal(0, std, (out_c, in_c, k, k)).astype(np.float32), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(out_c, np.float32), requires_grad=True)

    add("encoder.embed", c, 3, p)
    for i in range(config.blocks):
        add(f"encoder.block{i}", c, c, 3)
    # patch classifier used only during pretraining
    add("pretrain.classifier", class_count + 1, c, 1)
    # no bias: class evidence has to live in the feature direction
    params["pretrain.classifier.bias"].requires_grad = False
    return params


def encoder_forward(images: Tensor, params: dict[str, Tensor], config: OracleConfig) -> Tensor:
    h = relu(conv2d(images, params["encoder.embed.weight"], params["encoder.embed.bias"], stride=config.patch_size))
    for i in range(config.blocks):
        h = conv2d(h, params[f"encoder.block{i}.weight"], params[f"encoder.block{i}.bias"], stride=1, padding=1)
        if i < config.blocks - 1:
            h = relu(h)
    return h


def encode_patches(encoder: OracleEncoder, images) -> Tensor:
    """Frozen patch features [N, C_b, H/p, W/p]; never records gradients."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    p = encoder.config.patch_size
    if arr.ndim != 4 or arr.shape[2] % p or arr.shape[3] % p:
        raise ShapeError(f"image size {arr.shape[2:]} is not divisible by the patch size {p}")
    with no_grad():
        return encoder_forward(Tensor(arr), encoder.params, encoder.config)


def head_features(feats: Tensor) -> Tensor:
    """Unit-direction patch features rescaled to unit per-channel RMS, the labeller head's input."""
    return l2_normalize(feats, axis=1) * float(np.sqrt(feats.shape[1]))


def patch_labels(boxes: Sequence[BoxLabel], image_size: int, patch: int, class_count: int) -> np.ndarray:
    """Class of the box covering each patch centre (later boxes on top), background = class_count."""
    g = image_size // patch
    centres = (np.arange(g) + 0.5) * patch
    out = np.full((g, g), class_count, dtype=np.int64)
    for b in boxes:
        xs = (centres >= b.x_min) & (centres < b.x_max)
        ys = (centres >= b.y_min) & (centres < b.y_max)
        out[np.ix_(ys, xs)] = b.class_id
    return out


# logit scale for the classifier on unit-norm features
COSINE_SCALE = 10.0


def _patch_loss(feats: Tensor, params, labels: np.ndarray, class_count: int, bg_weight: float):
    # classifying unit-norm features keeps the content in the feature direction,
    # which is what a cosine alignment target can see
    unit = l2_normalize(feats, axis=1) * COSINE_SCALE
    logits = conv2d(unit, params["pretrain.classifier.weight"], params["pretrain.classifier.bias"])
    k = class_count + 1
    flat = logits.transpose(0, 2, 3, 1).reshape(-1, k)
    y = labels.reshape(-1)
    w = np.where(y == class_count, bg_weight, 1.0)
    return cross_entropy_sum(flat, y, w / w.sum()), flat


def _hue_jitter(images: np.ndarray, rng: np.random.Generator, max_degrees: float) -> np.ndarray:
    # per-image hue rotation so that colour alone cannot identify a class
    if max_degrees <= 0:
        return images
    out = np.empty_like(images)
    for i, img in enumerate(images):
        m = hue_rotation_matrix(rng.uniform(-max_degrees, max_degrees))
        out[i] = np.clip(np.einsum("ij,jhw->ihw", m, img), 0.0, 1.0)
    return out


def pretrain_oracle(config: OracleConfig, world_datasets: Sequence[Dataset], class_count: int,
                    augment: AugmentConfig = AugmentConfig()) -> OracleEncoder:
    """Supervised per-patch content classification over all world domains, then freeze."""
    if config.pretrain_iterations > 0 and len(world_datasets) < 4:
        raise ValueError(f"pretraining needs at least 4 world domains, got {len(world_datasets)}")
    params = init_encoder(config, class_count)
    rng = np.random.default_rng([config.seed, 7])
    curve: list[float] = []
    if config.pretrain_iterations > 0:
        pool = [(d, i) for d in world_datasets for i in range(len(d))]
        opt = SGD({k: v for k, v in params.items() if v.requires_grad}, config.lr, config.momentum)
        size = world_datasets[0].image_size
        for it in range(config.pretrain_iterations):
            pick = rng.choice(len(pool), size=config.batch_size, replace=False)
            # weak views only: hue jitter supplies the photometric variety
            views = [weak_augment(pool[j][0][pool[j][1]], rng, augment)[0] for j in pick]
            images = _hue_jitter(np.stack([v.image for v in views]), rng, config.hue_jitter)
            boxes = [v.boxes for v in views]
            labels = np.stack([patch_labels(b, size, config.patch_size, class_count) for b in boxes])
            feats = encoder_forward(Tensor(images), params, config)
            loss, _ = _patch_loss(feats, params, labels, class_count, config.background_weight)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"oracle pretraining diverged at iteration {it}")
            loss.backward()
            opt.step()
            curve.append(value)
            if it % 100 == 0:
                log.info("oracle[%s] iter %d loss %.4f", config.size_tier, it, value)
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    return OracleEncoder(config, params, curve)


def patch_accuracy(encoder: OracleEncoder, dataset: Dataset, class_count: int, batch: int = 50) -> float:
    correct = total = 0
    p = encoder.config.patch_size
    with no_grad():
        for start in range(0, len(dataset), batch):
            imgs = dataset.images[start : start + batch]
            feats = encoder_forward(Tensor(imgs), encoder.params, encoder.config)
            labels = np.stack([patch_labels(dataset.boxes[i], dataset.image_size, p, class_count)
                               for i in range(start, start + len(imgs))])
            _, flat = _patch_loss(feats, encoder.params, labels, class_count, 1.0)
            pred = flat.data.argmax(axis=1)
            correct += int((pred == labels.reshape(-1)).sum())
            total += labels.size
    return correct / max(total, 1)


def feature_stability(encoder: OracleEncoder, images: np.ndarray, domain: DomainSpec) -> float:
    """Mean per-patch cosine between features of images and their corrupted copies."""
    shifted = np.stack([apply_domain(LabeledImage(img, []), domain).image for img in images])
    a = encode_patches(encoder, images)
    b = encode_patches(encoder, shifted)
    return float(cosine_map(a, b).data.mean())


# -- labeller -------------------------------------------------------------

@dataclass(frozen=True)
class LabellerConfig:
    iterations: int = 4000
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    frozen: bool = True
    backbone_lr_scale: float = 0.01
    # anneal the step size to zero so the final head is not a noisy SGD iterate
    cosine_decay: bool = True
    seed: int = 0


@dataclass
class LabellerModel:
    encoder: OracleEncoder
    head: dict[str, Tensor]
    detector: DetectorConfig
    config: LabellerConfig
    name: str = "labeller"

    @property
    def backbone_state(self) -> str:
        return "frozen" if self.config.frozen else f"unfrozen({self.config.backbone_lr_scale})"

    def outputs(self, images: np.ndarray) -> DetectorOutput:
        feats = encode_patches(self.encoder, images)
        with no_grad():
            obj, cls, box = head_forward(head_features(feats), self.head, self.detector)
        return DetectorOutput(feats, obj, cls, box)

    def predict(self, images: np.ndarray, batch: int = 50, conf_floor: float | None = None) -> list[list[Detection]]:
        floor = self.detector.decode_conf_floor if conf_floor is None else conf_floor
        out = []
        for start in range(0, len(images), batch):
            res = self.outputs(images[start : start + batch])
            out.extend(nms(d, self.detector.nms_iou) for d in decode(res, floor, self.detector))
        return out

    def save(self, directory) -> None:
        directory = Path(directory)
        self.encoder.save(directory / "encoder")
        serialize.save_checkpoint(directory / "head", {k: v.data for k, v in self.head.items()},
                                  {"kind": "labeller_head", "config": asdict(self.config),
                                   "detector": asdict(self.detector), "name": self.name})

    @classmethod
    def load(cls, directory) -> "LabellerModel":
        directory = Path(directory)
        encoder = OracleEncoder.load(directory / "encoder")
        tensors, meta = serialize.load_checkpoint(directory / "head")
        if meta.get("kind") != "labeller_head":
            raise FormatError(directory / "head", "checkpoint is not a labeller head")
        det = meta["detector"]
        detector = DetectorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in det.items()})
        return cls(encoder, {k: Tensor(v) for k, v in tensors.items()}, detector,
                   LabellerConfig(**meta["config"]), meta.get("name", "labeller"))


def train_labeller_head(encoder: OracleEncoder, source_train: Dataset, detector: DetectorConfig,
                        config: LabellerConfig = LabellerConfig(), augment: AugmentConfig = AugmentConfig(),
                        name: str = "labeller") -> LabellerModel:
    """Train a detector head on encoder features of labelled source images only."""
    if encoder.config.patch_size * detector.strides[3] != detector.grid_stride:
        raise ShapeError("encoder patch grid does not reduce to the detector grid with one stride-2 stage")
    rng = np.random.default_rng([config.seed, 11])
    head = init_head(rng, encoder.feature_channels, detector)
    if config.frozen:
        enc = encoder
        trainable = dict(head)
        scales = {}
    else:
        enc_params = {k: Tensor(v.data.copy(), requires_grad=k.startswith("encoder."))
                      for k, v in encoder.params.items()}
        enc = OracleEncoder(encoder.config, enc_params, list(encoder.curve))
        trainable = {**head, **{k: v for k, v in enc_params.items() if k.startswith("encoder.")}}
        scales = {"encoder.": config.backbone_lr_scale}
    opt = SGD(trainable, config.lr, config.momentum, scales) if config.iterations > 0 else None
    for it in range(config.iterations):
        if config.cosine_decay:
            opt.lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * it / config.iterations))
        pick = rng.choice(len(source_train), size=config.batch_size, replace=False)
        batch = augment_batch([source_train[int(i)] for i in pick], rng, augment)
        images, boxes = batch.both_views()
        if config.frozen:
            feats = encode_patches(enc, images)
        else:
            feats = encoder_forward(Tensor(images), enc.params, enc.config)
        obj, cls, box = head_forward(head_features(feats), head, detector)
        l_ob, l_cls = detection_loss(DetectorOutput(feats, obj, cls, box), batch_targets(boxes, detector))
        loss = l_ob + l_cls
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"labeller head training diverged at iteration {it}")
        loss.backward()
        opt.step()
        if it % 100 == 0:
            log.info("labeller[%s] iter %d loss %.4f", name, it, loss.item())
    for p in list(head.values()) + list(enc.params.values()):
        p.requires_grad = False
        p.grad = None
    return LabellerModel(enc, head, detector, config, name)


# -- offline pseudo-labels ------------------------------------------------

def generate_pseudo_labels(labeller: LabellerModel, target_train: Dataset, delta: float, out_path=None) -> dict:
    """One pass over unaugmented target images: decode -> NMS -> keep confidence >= delta."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    dets = labeller.predict(target_train.images)
    labels = {int(i): threshold_detections(d, delta) for i, d in zip(target_train.ids, dets)}
    if out_path is not None:
        write_pseudo_labels(out_path, labels, delta, labeller.name)
    return labels


def write_pseudo_labels(path, labels: dict, delta: float, labeller: str) -> None:
    doc = {
        "delta": float(delta),
        "labeller": labeller,
        "images": [{"id": int(i), "boxes": [d.to_dict() for d in labels[i]]} for i in sorted(labels)],
    }
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise FormatError(path, f"cannot write pseudo-labels: {exc}") from exc


def load_pseudo_labels(path) -> tuple[dict, dict]:
    """Return ({image id: [Detection]}, header) from a pseudo_labels.json file."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(path, f"unreadable pseudo-label file: {exc}") from exc
    labels = {int(e["id"]): [Detection.from_dict(b) for b in e["boxes"]] for e in doc.get("images", [])}
    return labels, {"delta": doc.get("delta"), "labeller": doc.get("labeller")}
