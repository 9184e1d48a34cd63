"""Single-scale dense-grid detector: backbone, head, target encoding, losses, decoding.

The objectness + box-regression term plays the role of the proposal loss and
the per-cell classification term plays the role of the refinement loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from datforge.errors import ShapeError
from datforge.numerics import (
    Tensor,
    bce_with_logits,
    conv2d,
    cross_entropy_sum,
    no_grad,
    relu,
    smooth_l1_sum,
)
from datforge.numerics.functional import sigmoid_np, softmax_np
from datforge.scenegen import BoxLabel


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    class_count: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 64)
    # the first three stages reach the feature stride, the fourth halves it again
    strides: tuple[int, ...] = (2, 2, 1, 2)
    head_channels: int = 64
    nms_iou: float = 0.5
    decode_conf_floor: float = 0.05

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.strides) != 4:
            raise ValueError("detector has exactly four conv stages")
        if self.image_size % self.grid_stride:
            raise ValueError(f"image_size {self.image_size} not divisible by grid stride {self.grid_stride}")

    @property
    def feature_stride(self) -> int:
        return int(np.prod(self.strides[:3]))

    @property
    def feature_channels(self) -> int:
        return self.widths[2]

    @property
    def grid_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def grid(self) -> int:
        return self.image_size // self.grid_stride


@dataclass
class DetectorOutput:
    features: Tensor | None
    objectness: Tensor  # [N, 1, G, G] logits
    class_logits: Tensor  # [N, K, G, G]
    box_deltas: Tensor  # [N, 4, G, G]


@dataclass(frozen=True)
class Detection:
    box: BoxLabel
    confidence: float

    @property
    def class_id(self) -> int:
        return self.box.class_id

    def to_dict(self) -> dict:
        d = self.box.to_dict()
        d["confidence"] = float(self.confidence)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(BoxLabel.from_dict(d), float(d["confidence"]))


@dataclass
class Targets:
    objectness: np.ndarray  # [N, 1, G, G] in {0, 1}
    classes: np.ndarray  # [N, G, G] int
    boxes: np.ndarray  # [N, 4, G, G] (dx, dy, log dw, log dh)
    positive: np.ndarray = field(init=False)  # [N, G, G] bool

    def __post_init__(self):
        self.positive = self.objectness[:, 0] > 0.5

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


# -- parameters -----------------------------------------------------------

def _conv_param(rng: np.random.Generator, out_c: int, in_c: int, k: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    std = np.sqrt(2.0 / (in_c * k * k))
    return rng.normal(0.0, std, (out_c, in_c, k, k)).astype(dtype), np.zeros(out_c, dtype=dtype)


def init_head(rng: np.random.Generator, in_channels: int, config: DetectorConfig, prefix: str = "head.",
              dtype=np.float32) -> dict[str, Tensor]:
    params = {}
    specs = [
        ("down", config.widths[3], in_channels, 3),
        ("tower", config.head_channels, config.widths[3], 3),
        ("obj", 1, config.head_channels, 1),
        ("cls", config.class_count, config.head_channels, 1),
        ("box", 4, config.head_channels, 1),
    ]
    for name, out_c, in_c, k in specs:
        w, b = _conv_param(rng, out_c, in_c, k, dtype)
        if k == 1:
            w *= 0.1
        if name == "obj":
            b[:] = -2.0
        params[f"{prefix}{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{prefix}{name}.bias"] = Tensor(b, requires_grad=True)
    return params


def init_detector(config: DetectorConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    in_c = 3
    for i, width in enumerate(config.widths[:3]):
        w, b = _conv_param(rng, width, in_c, 3, dtype)
        params[f"backbone.conv{i}.weight"] = Tensor(w, requires_grad=True)
        params[f"backbone.conv{i}.bias"] = Tensor(b, requires_grad=True)
        in_c = width
    params.update(init_head(rng, in_c, config, dtype=dtype))
    return params


def backbone_forward(images: Tensor, params: dict[str, Tensor], config: DetectorConfig) -> Tensor:
    h = images
    for i in range(3):
        h = relu(conv2d(h, params[f"backbone.conv{i}.weight"], params[f"backbone.conv{i}.bias"],
                        stride=config.strides[i], padding=1))
    return h


def head_forward(features: Tensor, params: dict[str, Tensor], config: DetectorConfig,
                 prefix: str = "head.") -> tuple[Tensor, Tensor, Tensor]:
    p = lambda name: (params[f"{prefix}{name}.weight"], params[f"{prefix}{name}.bias"])  # noqa: E731
    h = relu(conv2d(features, *p("down"), stride=config.strides[3], padding=1))
    h = relu(conv2d(h, *p("tower"), stride=1, padding=1))
    return conv2d(h, *p("obj")), conv2d(h, *p("cls")), conv2d(h, *p("box"))


def forward(images, params: dict[str, Tensor], config: DetectorConfig) -> DetectorOutput:
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"detector input must be [N,3,H,W], got {images.shape}")
    if images.shape[2] != config.image_size or images.shape[3] != config.image_size:
        raise ShapeError(
            f"detector input spatial size {images.shape[2]}x{images.shape[3]} != configured {config.image_size}"
        )
    feats = backbone_forward(images, params, config)
    obj, cls, box = head_forward(feats, params, config)
    return DetectorOutput(feats, obj, cls, box)


# -- targets and losses ---------------------------------------------------

def assign_targets(boxes: Sequence[BoxLabel], grid: int, stride: int) -> Targets:
    """Encode boxes for one image; the cell containing a box centre is positive."""
    obj = np.zeros((1, 1, grid, grid), dtype=np.float32)
    cls = np.zeros((1, grid, grid), dtype=np.int64)
    reg = np.zeros((1, 4, grid, grid), dtype=np.float32)
    best_area = np.zeros((grid, grid))
    for b in boxes:
        if b.width <= 0 or b.height <= 0:
            continue
        cx = (b.x_min + b.x_max) / 2.0
        cy = (b.y_min + b.y_max) / 2.0
        gx = min(int(np.floor(cx / stride)), grid - 1)
        gy = min(int(np.floor(cy / stride)), grid - 1)
        if obj[0, 0, gy, gx] > 0 and best_area[gy, gx] >= b.area:
            continue
        best_area[gy, gx] = b.area
        obj[0, 0, gy, gx] = 1.0
        cls[0, gy, gx] = b.class_id
        reg[0, :, gy, gx] = (cx / stride - gx, cy / stride - gy, np.log(b.width / stride), np.log(b.height / stride))
    return Targets(obj, cls, reg)


def stack_targets(per_image: Sequence[Targets]) -> Targets:
    return Targets(
        np.concatenate([t.objectness for t in per_image]),
        np.concatenate([t.classes for t in per_image]),
        np.concatenate([t.boxes for t in per_image]),
    )


def batch_targets(box_lists: Sequence[Sequence[BoxLabel]], config: DetectorConfig) -> Targets:
    return stack_targets([assign_targets(b, config.grid, config.grid_stride) for b in box_lists])


def detection_loss(output: DetectorOutput, targets: Targets) -> tuple[Tensor, Tensor]:
    """Return (objectness BCE + box smooth-L1, classification CE)."""
    loss_obj = bce_with_logits(output.objectness, targets.objectness)
    npos = targets.num_positive
    denom = 1.0 / max(npos, 1)
    pos = targets.positive.astype(output.box_deltas.dtype)
    box_weight = np.broadcast_to(pos[:, None], output.box_deltas.shape)
    loss_box = smooth_l1_sum(output.box_deltas, targets.boxes, box_weight) * denom
    k = output.class_logits.shape[1]
    logits = output.class_logits.transpose(0, 2, 3, 1).reshape(-1, k)
    loss_cls = cross_entropy_sum(logits, targets.classes.reshape(-1), pos.reshape(-1)) * denom
    return loss_obj + loss_box, loss_cls


# -- decoding -------------------------------------------------------------

def decode(output: DetectorOutput, conf_floor: float, config: DetectorConfig) -> list[list[Detection]]:
    """Invert the target encoding per cell; confidence = sigmoid(obj) * max softmax(cls)."""
    obj = sigmoid_np(output.objectness.data[:, 0].astype(np.float64))
    probs = softmax_np(output.class_logits.data.astype(np.float64), axis=1)
    reg = output.box_deltas.data.astype(np.float64)
    stride, size = config.grid_stride, float(config.image_size)
    n, _, g, _ = reg.shape
    gy, gx = np.mgrid[0:g, 0:g]
    results = []
    for i in range(n):
        cls = probs[i].argmax(axis=0)
        conf = obj[i] * probs[i].max(axis=0)
        keep = np.argwhere(conf >= conf_floor)
        dets = []
        for y, x in keep:
            cx = (gx[y, x] + reg[i, 0, y, x]) * stride
            cy = (gy[y, x] + reg[i, 1, y, x]) * stride
            w = stride * np.exp(min(reg[i, 2, y, x], 10.0))
            h = stride * np.exp(min(reg[i, 3, y, x], 10.0))
            x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, size)
            y0, y1 = max(cy - h / 2, 0.0), min(cy + h / 2, size)
            if x1 <= x0 or y1 <= y0:
                continue
            dets.append(Detection(BoxLabel(int(cls[y, x]), x0, y0, x1, y1), float(conf[y, x])))
        results.append(dets)
    return results


def encode_output(targets: Targets, class_count: int, margin: float = 30.0) -> DetectorOutput:
    """A DetectorOutput that decodes exactly to the encoded boxes (used to test round trips)."""
    obj = np.where(targets.objectness > 0.5, margin, -margin)
    n, g, _ = targets.classes.shape
    logits = np.full((n, class_count, g, g), -margin)
    np.put_along_axis(logits, targets.classes[:, None], margin, axis=1)
    return DetectorOutput(None, Tensor(obj.astype(np.float64)), Tensor(logits), Tensor(targets.boxes.astype(np.float64)))


def box_iou(a: BoxLabel, b: BoxLabel) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-wise suppression in descending confidence; ties keep the lower index."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    kept: list[int] = []
    for i in order:
        d = detections[i]
        if all(
            detections[j].class_id != d.class_id or box_iou(detections[j].box, d.box) <= iou_threshold for j in kept
        ):
            kept.append(i)
    return [detections[i] for i in kept]


def threshold_detections(detections: Sequence[Detection], delta: float) -> list[Detection]:
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    return [d for d in detections if d.confidence >= delta]


def predict(images: np.ndarray, params: dict[str, Tensor], config: DetectorConfig, batch: int = 50,
            conf_floor: float | None = None) -> list[list[Detection]]:
    """Decode + NMS for a stack of images with gradients disabled."""
    floor = config.decode_conf_floor if conf_floor is None else conf_floor
    out: list[list[Detection]] = []
    with no_grad():
        for start in range(0, len(images), batch):
            res = forward(Tensor(images[start : start + batch]), params, config)
            out.extend(nms(d, config.nms_iou) for d in decode(res, floor, config))
    return out
