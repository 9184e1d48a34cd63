"""Procedural two-domain detection scenes and the on-disk dataset format.

Layout of a dataset directory::

    meta.json          {name, image_size, classes, domain, count, seed, split, class_instances}
    labels.json        {"images": [{"id", "file", "boxes": [{class_id, x_min, y_min, x_max, y_max}]}]}
    images/NNNNNN.dten one [3, H, W] float32 DTEN record per image
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from datforge.errors import ConsistencyError, FormatError
from datforge.numerics import serialize

DEFAULT_CLASSES = ("car", "person", "truck")

# (sky, ground) colours per background palette
PALETTES = (
    ((0.62, 0.70, 0.78), (0.42, 0.42, 0.44)),
    ((0.80, 0.74, 0.60), (0.55, 0.48, 0.36)),
    ((0.55, 0.72, 0.60), (0.30, 0.42, 0.30)),
    ((0.30, 0.32, 0.42), (0.20, 0.20, 0.24)),
)

CLASS_COLOURS = np.array(
    [
        [0.85, 0.15, 0.15],  # car
        [0.15, 0.30, 0.85],  # person
        [0.85, 0.20, 0.55],  # truck
        [0.20, 0.70, 0.30],
        [0.70, 0.20, 0.70],
    ]
)

CORRUPTION_RANGES = {
    "fog": (0.0, 1.0),
    "dim": (0.05, 5.0),
    "hue_shift": (-180.0, 180.0),
    "noise": (0.0, 0.5),
}


@dataclass(frozen=True)
class BoxLabel:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "x_min": float(self.x_min),
            "y_min": float(self.y_min),
            "x_max": float(self.x_max),
            "y_max": float(self.y_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoxLabel":
        return cls(int(d["class_id"]), float(d["x_min"]), float(d["y_min"]), float(d["x_max"]), float(d["y_max"]))


@dataclass
class LabeledImage:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    boxes: list[BoxLabel]
    image_id: int = 0


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    class_count: int = 3
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    objects_per_image: tuple[int, int] = (1, 4)
    class_frequency: tuple[float, ...] = (0.45, 0.45, 0.10)
    seed: int = 0
    patch_size: int = 4
    rare_class_mode: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.class_count < 1 or self.class_count > len(CLASS_COLOURS):
            raise ValueError(f"class_count must be in [1, {len(CLASS_COLOURS)}]")
        if len(self.class_names) != self.class_count:
            raise ValueError("class_names length must equal class_count")
        if len(self.class_frequency) != self.class_count:
            raise ValueError("class_frequency length must equal class_count")
        if any(f < 0 for f in self.class_frequency) or abs(sum(self.class_frequency) - 1.0) > 1e-9:
            raise ValueError(f"class_frequency must be non-negative and sum to 1, got {self.class_frequency}")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid objects_per_image range {self.objects_per_image}")
        if self.rare_class_mode and min(self.class_frequency) > 0.5 / self.class_count:
            raise ValueError("rare_class_mode needs one class at or below half the uniform weight")


@dataclass(frozen=True)
class Corruption:
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in CORRUPTION_RANGES:
            raise ValueError(f"unknown corruption {self.kind!r}")
        lo, hi = CORRUPTION_RANGES[self.kind]
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.kind} parameter {self.value} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class DomainSpec:
    name: str
    corruptions: tuple[Corruption, ...] = ()
    texture_palette: int = 0

    def __post_init__(self):
        if not 0 <= self.texture_palette < len(PALETTES):
            raise ValueError(f"texture_palette must be in [0, {len(PALETTES)})")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "corruptions": [asdict(c) for c in self.corruptions],
            "texture_palette": self.texture_palette,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(
            d["name"],
            tuple(Corruption(c["kind"], float(c["value"])) for c in d.get("corruptions", ())),
            int(d.get("texture_palette", 0)),
        )


SOURCE_DOMAIN = DomainSpec("source", (), 0)
TARGET_DOMAIN = DomainSpec("target", (Corruption("fog", 0.6), Corruption("hue_shift", 30.0)), 1)

# Broad "world" family for encoder pretraining; the exact target parameters are absent.
WORLD_DOMAINS = (
    DomainSpec("world_clear", (), 0),
    DomainSpec("world_fog_light", (Corruption("fog", 0.3),), 1),
    DomainSpec("world_fog_heavy", (Corruption("fog", 0.85),), 2),
    DomainSpec("world_hue_60", (Corruption("hue_shift", 60.0),), 0),
    DomainSpec("world_fog_hue_neg", (Corruption("fog", 0.45), Corruption("hue_shift", -40.0)), 1),
    DomainSpec("world_dim_hue_150", (Corruption("dim", 1.8), Corruption("hue_shift", 150.0)), 3),
    DomainSpec("world_noise_hue_neg", (Corruption("noise", 0.06), Corruption("hue_shift", -120.0)), 2),
    DomainSpec("world_fog_hue_90", (Corruption("fog", 0.7), Corruption("hue_shift", 90.0)), 3),
)


def derived_rng(*keys) -> np.random.Generator:
    """Generator seeded from an ordered tuple of ints and strings."""
    words = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(words))


# -- rendering ------------------------------------------------------------

def _background(size: int, palette: int, rng: np.random.Generator) -> np.ndarray:
    sky, ground = (np.array(c) for c in PALETTES[palette])
    horizon = rng.uniform(0.35, 0.55) * size
    ys = np.arange(size)[:, None] + 0.5
    t = np.clip((ys - horizon) / 4.0 + 0.5, 0.0, 1.0)  # soft horizon
    shade = 1.0 - 0.25 * np.abs(ys / size - 0.5)
    img = ((1 - t)[None] * sky[:, None, None] + t[None] * ground[:, None, None]) * shade[None]
    img = np.broadcast_to(img, (3, size, size)).copy()
    # clutter: faint lane lines and grey blobs that are not objects
    for _ in range(rng.integers(1, 4)):
        x = rng.integers(0, size)
        w = rng.integers(1, 3)
        img[:, int(horizon):, x : x + w] = 0.85 * img[:, int(horizon):, x : x + w] + 0.15
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(rng.integers(0, 3)):
        cx, cy, r = rng.uniform(0, size), rng.uniform(0, size), rng.uniform(2, 5)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[:, mask] = rng.uniform(0.35, 0.6)
    img += rng.normal(0.0, 0.01, img.shape)
    return img


def _object_size(class_id: int, rng: np.random.Generator) -> tuple[int, int]:
    if class_id == 0:  # car: wide
        h = rng.integers(7, 12)
        w = int(round(h * rng.uniform(1.5, 2.0)))
    elif class_id == 1:  # person: tall
        w = rng.integers(5, 9)
        h = int(round(w * rng.uniform(1.6, 2.2)))
    elif class_id == 2:  # truck: large, boxy
        h = rng.integers(10, 16)
        w = int(round(h * rng.uniform(1.1, 1.4)))
    else:
        w = h = rng.integers(7, 14)
    return int(w), int(h)


def _object_mask_and_texture(class_id: int, w: int, h: int, colour: np.ndarray):
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    tex = np.broadcast_to(colour[:, None, None], (3, h, w)).copy()
    if class_id == 1 or class_id == 3:
        mask = ((xs - w / 2) / (w / 2)) ** 2 + ((ys - h / 2) / (h / 2)) ** 2 <= 1.0
        tex[:, ys[:, 0] < h * 0.3, :] = np.minimum(colour[:, None, None] * 1.3 + 0.1, 1.0)
    else:
        mask = np.ones((h, w), dtype=bool)
        if class_id == 0:
            band = (ys[:, 0] > h * 0.15) & (ys[:, 0] < h * 0.45)
            tex[:, band, 1 : w - 1] *= 0.45
        elif class_id == 2:
            stripes = (np.floor(xs[0]) % 4) < 2
            tex[:, :, stripes] *= 0.55
        else:
            tex[:, (np.floor(ys[:, 0]) % 3) == 0, :] *= 0.6
    return mask, tex


def _overlap_ok(new: tuple[int, int, int, int], placed: Sequence[tuple[int, int, int, int]]) -> bool:
    x0, y0, x1, y1 = new
    for a0, b0, a1, b1 in placed:
        iw = min(x1, a1) - max(x0, a0)
        ih = min(y1, b1) - max(y0, b0)
        if iw > 0 and ih > 0:
            smaller = min((x1 - x0) * (y1 - y0), (a1 - a0) * (b1 - b0))
            if iw * ih > 0.3 * smaller:
                return False
    return True


def render_scene(spec: SceneSpec, rng: np.random.Generator, palette: int = 0) -> LabeledImage:
    """Draw objects of per-class archetypes on a structured background.

    Boxes are the tight pixel extents of each drawn object; objects never
    leave the canvas and pairwise overlap is limited to 30% of the smaller one.
    """
    size = spec.image_size
    img = _background(size, palette, rng)
    lo, hi = spec.objects_per_image
    count = int(rng.integers(lo, hi + 1))
    boxes: list[BoxLabel] = []
    placed: list[tuple[int, int, int, int]] = []
    freq = np.asarray(spec.class_frequency, dtype=np.float64)
    for _ in range(count):
        cls = int(rng.choice(spec.class_count, p=freq / freq.sum()))
        w, h = _object_size(cls, rng)
        w, h = min(w, size), min(h, size)
        for _attempt in range(20):
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            cand = (x0, y0, x0 + w, y0 + h)
            if _overlap_ok(cand, placed):
                break
        else:
            continue
        colour = np.clip(CLASS_COLOURS[cls] + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
        mask, tex = _object_mask_and_texture(cls, w, h, colour)
        region = img[:, y0 : y0 + h, x0 : x0 + w]
        region[:, mask] = tex[:, mask]
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        placed.append(cand)
        boxes.append(
            BoxLabel(cls, float(x0 + cols[0]), float(y0 + rows[0]), float(x0 + cols[-1] + 1), float(y0 + rows[-1] + 1))
        )
    return LabeledImage(np.clip(img, 0.0, 1.0).astype(np.float32), boxes)


# -- domain corruption ----------------------------------------------------

def depth_proxy(size: int) -> np.ndarray:
    """Radial depth surrogate in [0.5, 1]: the image centre is farthest away."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = np.hypot(xx - size / 2, yy - size / 2)
    return 1.0 - 0.5 * r / r.max()


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    k = (1 - c) / 3.0
    r = np.sqrt(1 / 3.0) * s
    return np.array([[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]])


def corrupt_pixels(img: np.ndarray, corruption: Corruption, rng: np.random.Generator | None = None) -> np.ndarray:
    kind, v = corruption.kind, corruption.value
    if kind == "fog":
        alpha = v * depth_proxy(img.shape[-1])[None]
        return img * (1.0 - alpha) + alpha
    if kind == "dim":
        return np.power(img, v)
    if kind == "hue_shift":
        return np.clip(np.einsum("ij,jhw->ihw", hue_rotation_matrix(v), img), 0.0, 1.0)
    if kind == "noise":
        rng = rng if rng is not None else np.random.default_rng(0)
        return np.clip(img + rng.normal(0.0, v, img.shape), 0.0, 1.0)
    raise ValueError(f"unknown corruption {kind!r}")


def apply_domain(image: LabeledImage, domain: DomainSpec, rng: np.random.Generator | None = None) -> LabeledImage:
    """Apply the domain's corruptions in order; boxes pass through untouched."""
    pix = image.image.astype(np.float64)
    for corruption in domain.corruptions:
        pix = corrupt_pixels(pix, corruption, rng)
    out = pix.astype(np.float32) if domain.corruptions else image.image.copy()
    return LabeledImage(out, list(image.boxes), image.image_id)


# -- datasets -------------------------------------------------------------

@dataclass
class DatasetManifest:
    name: str
    path: str
    count: int
    seed: int
    split: str
    class_instances: list[int] = field(default_factory=list)


def make_image(spec: SceneSpec, domain: DomainSpec, split: str, index: int) -> LabeledImage:
    rng = derived_rng(spec.seed, split, domain.name, index)
    scene = render_scene(spec, rng, domain.texture_palette)
    out = apply_domain(scene, domain, rng)
    out.image_id = index
    return out


def generate_dataset(spec: SceneSpec, domain: DomainSpec, count: int, split: str, out_dir,
                     name: str | None = None) -> DatasetManifest:
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    out_dir = Path(out_dir)
    name = name or f"{domain.name}_{split}"
    instances = [0] * spec.class_count
    entries = []
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for i in range(count):
            item = make_image(spec, domain, split, i)
            rel = f"images/{i:06d}.dten"
            serialize.save(out_dir / rel, item.image)
            for b in item.boxes:
                instances[b.class_id] += 1
            entries.append({"id": i, "file": rel, "boxes": [b.to_dict() for b in item.boxes]})
        meta = {
            "name": name,
            "image_size": spec.image_size,
            "classes": list(spec.class_names),
            "domain": domain.to_dict(),
            "count": count,
            "seed": spec.seed,
            "split": split,
            "class_instances": instances,
        }
        _write_json(out_dir / "meta.json", meta)
        _write_json(out_dir / "labels.json", {"images": entries})
    except OSError as exc:
        raise FormatError(getattr(exc, "filename", None) or out_dir, f"write failed: {exc}") from exc
    return DatasetManifest(name, str(out_dir), count, spec.seed, split, instances)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


class Dataset:
    """A fully loaded dataset: stacked images plus per-image box lists."""

    def __init__(self, images: np.ndarray, boxes: list[list[BoxLabel]], ids: list[int], meta: dict,
                 path: str | None = None):
        self.images = images
        self.boxes = boxes
        self.ids = ids
        self.meta = meta
        self.path = path

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], list(self.boxes[i]), self.ids[i])

    def __iter__(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    @property
    def class_names(self) -> list[str]:
        return list(self.meta.get("classes", DEFAULT_CLASSES))

    @property
    def image_size(self) -> int:
        return int(self.meta["image_size"])


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path, labels_path = directory / "meta.json", directory / "labels.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(meta_path, f"unreadable dataset metadata: {exc}") from exc
    try:
        labels = json.loads(labels_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(labels_path, f"unreadable labels: {exc}") from exc
    entries = labels.get("images", [])
    if len(entries) != meta.get("count", len(entries)):
        raise ConsistencyError(f"{labels_path}: {len(entries)} label entries but meta count {meta.get('count')}")
    size = int(meta["image_size"])
    images = np.zeros((len(entries), 3, size, size), dtype=np.float32)
    boxes, ids = [], []
    for k, entry in enumerate(entries):
        img_path = directory / entry["file"]
        if not img_path.exists():
            raise ConsistencyError(f"{labels_path}: image id {entry['id']} references missing file {img_path}")
        arr = serialize.load(img_path)
        if arr.shape != (3, size, size):
            raise FormatError(img_path, f"expected shape (3, {size}, {size}), got {arr.shape}")
        images[k] = arr
        boxes.append([BoxLabel.from_dict(b) for b in entry["boxes"]])
        ids.append(int(entry["id"]))
    return Dataset(images, boxes, ids, meta, str(directory))


def dataset_from_items(items: Sequence[LabeledImage], meta: dict | None = None) -> Dataset:
    """In-memory dataset (tests and small experiments)."""
    if not items:
        return Dataset(np.zeros((0, 3, 1, 1), np.float32), [], [], meta or {"image_size": 1})
    images = np.stack([it.image for it in items]).astype(np.float32)
    meta = dict(meta or {})
    meta.setdefault("image_size", images.shape[-1])
    return Dataset(images, [list(it.boxes) for it in items], [it.image_id for it in items], meta)
