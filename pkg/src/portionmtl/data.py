"""Synthetic labelled images, balanced augmentation, splitting and storage.

Each class is a shape/texture/hue family with a fixed energy density
``d_k``; an item's portion value is ``d_k * object_area_fraction * Z_MAX``,
so energy = volume (area here) x unit energy, with the object area
recoverable from the pixels.
"""

import colorsys
import hashlib
import json
import os
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

Z_MAX = 984.0  # kcal; upper end of the portion range
BACKGROUND_MAX = 0.12
OBJECT_THRESHOLD = 0.25  # max-channel cut separating object from background
MIN_IMAGE_SIZE = 8

SHAPES = ("disk", "square", "triangle", "diamond", "ring", "cross", "ellipse")
TEXTURES = ("solid", "stripes", "checker")
AUG_OPS = ("rot90", "rot270", "flipX", "flipY", "flipXY")

FORMAT_VERSION = 1
IMAGE_MAGIC = b"PMTLIMG\x00"


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    y: int
    z: float
    uid: int
    provenance: str = "original"  # or "augmented"
    source: object = None  # uid of the source image for augmented items
    op: object = None
    split: object = None  # "train" / "test" once assigned


@dataclass
class Dataset:
    items: list
    class_names: list
    densities: list = field(default_factory=list)
    generator: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.items)

    def class_counts(self):
        c = Counter(it.y for it in self.items)
        return [c.get(k, 0) for k in range(self.n_classes)]

    def subset(self, split):
        return replace(self, items=[it for it in self.items if it.split == split])

    def arrays(self):
        """Images as float64 NCHW plus label and portion arrays."""
        x = np.stack([it.pixels for it in self.items]).astype(np.float64).transpose(0, 3, 1, 2)
        y = np.array([it.y for it in self.items], dtype=np.int64)
        z = np.array([it.z for it in self.items], dtype=np.float64)
        return np.ascontiguousarray(x), y, z


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def default_densities(n_classes):
    """Class 0 has zero energy density (a diet-soda analogue); the rest are
    fixed draws in [0.2, 1.0] independent of the dataset seed."""
    d = np.random.default_rng(984).uniform(0.2, 1.0, n_classes)
    d[0] = 0.0
    return [float(v) for v in d]


def class_family(k, n_classes):
    shape = SHAPES[k % len(SHAPES)]
    texture = TEXTURES[(k // len(SHAPES)) % len(TEXTURES)]
    hue = (k * 0.381966) % 1.0  # golden-ratio spacing keeps hues apart
    return shape, texture, hue


def shape_mask(shape, size, scale, cx, cy):
    """Boolean (size, size) mask of ``shape`` with radius ``scale * size / 2``
    centered at pixel coordinates (cx, cy)."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    r = scale * size / 2
    ax, ay = np.abs(dx), np.abs(dy)
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(ax, ay) <= 0.85 * r
    if shape == "diamond":
        return ax + ay <= r
    if shape == "triangle":
        return (dy <= 0.8 * r) & (ax <= 0.5 * (dy + r))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((ax <= 0.3 * r) & (ay <= r)) | ((ay <= 0.3 * r) & (ax <= r))
    if shape == "ellipse":
        return (dx / r) ** 2 + (dy / (0.55 * r)) ** 2 <= 1.0
    raise ValueError(f"unknown shape {shape!r}")


def render(shape, texture, hue, size, scale, cx, cy, rng):
    """Draw one object on a dark noisy background; returns (pixels, mask)."""
    mask = shape_mask(shape, size, scale, cx, cy)
    img = rng.uniform(0.0, BACKGROUND_MAX, size=(size, size, 3))
    v = 0.9 + rng.uniform(-0.05, 0.05)
    s = 0.8 + rng.uniform(-0.1, 0.1)
    h = (hue + rng.uniform(-0.02, 0.02)) % 1.0
    base = np.array(colorsys.hsv_to_rgb(h, s, v))
    alt = base * 0.6
    yy, xx = np.mgrid[0:size, 0:size]
    if texture == "solid":
        pick = np.zeros((size, size), bool)
    elif texture == "stripes":
        pick = (yy // 2) % 2 == 1
    elif texture == "checker":
        pick = (yy // 2 + xx // 2) % 2 == 1
    else:
        raise ValueError(f"unknown texture {texture!r}")
    color = np.where(pick[..., None], alt, base)
    img = np.where(mask[..., None], color, img)
    return img.astype(np.float32), mask


def portion_value(density, mask):
    return float(density * (mask.sum() / mask.size) * Z_MAX)


def object_area_fraction(pixels):
    """Recover the object's pixel-area fraction from a rendered image."""
    return float((pixels.max(axis=2) > OBJECT_THRESHOLD).mean())


def generate_item(k, n_classes, density, size, rng, uid):
    shape, texture, hue = class_family(k, n_classes)
    scale = rng.uniform(0.35, 0.9)
    r = scale * size / 2
    lo, hi = min(r, size / 2), max(size - r, size / 2)
    cx, cy = rng.uniform(lo, hi), rng.uniform(lo, hi)
    pixels, mask = render(shape, texture, hue, size, scale, cx, cy, rng)
    return LabeledImage(pixels, k, portion_value(density, mask), uid)


def generate_synthetic_dataset(n_classes=21, per_class=100, image_size=32, seed=0, densities=None):
    if n_classes < 2:
        raise DatasetError(f"n_classes must be >= 2, got {n_classes}")
    if per_class < 1:
        raise DatasetError(f"per_class must be >= 1, got {per_class}")
    if image_size < MIN_IMAGE_SIZE:
        raise DatasetError(f"image_size {image_size} too small to render shapes (min {MIN_IMAGE_SIZE})")
    densities = list(densities) if densities is not None else default_densities(n_classes)
    if len(densities) != n_classes or any(d < 0 for d in densities):
        raise DatasetError("need one non-negative density per class")
    items = []
    for k in range(n_classes):
        for i in range(per_class):
            uid = k * per_class + i
            # per-item stream: identical whether items are made serially or in parallel
            rng = np.random.default_rng([seed, uid])
            items.append(generate_item(k, n_classes, densities[k], image_size, rng, uid))
    names = [f"{'-'.join(class_family(k, n_classes)[:2])}-{k:02d}" for k in range(n_classes)]
    gen = {"n_classes": n_classes, "per_class": per_class, "image_size": image_size, "seed": seed}
    return Dataset(items, names, [float(d) for d in densities], gen)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def apply_op(pixels, op):
    """Rotations act in the image plane; flipX mirrors across the horizontal
    axis (rows reversed), flipY across the vertical axis (columns reversed)."""
    if op == "rot90":
        out = np.rot90(pixels, 1, axes=(0, 1))
    elif op == "rot270":
        out = np.rot90(pixels, 3, axes=(0, 1))
    elif op == "flipX":
        out = pixels[::-1, :]
    elif op == "flipY":
        out = pixels[:, ::-1]
    elif op == "flipXY":
        out = pixels[::-1, ::-1]
    else:
        raise ValueError(f"unknown augmentation op {op!r}")
    return np.ascontiguousarray(out)


def balanced_augment(dataset, target_per_class, seed):
    """Top up every class below ``target_per_class`` with rotated/flipped
    copies of its original images. Each (source, op) pair is used at most
    once, so a class can grow to at most 6x its originals. Labels are
    copied unchanged."""
    counts = dataset.class_counts()
    originals = {k: [it for it in dataset.items if it.y == k and it.provenance == "original"]
                 for k in range(dataset.n_classes)}
    deficient = []
    for k, c in enumerate(counts):
        need = target_per_class - c
        if need > 0 and need > len(originals[k]) * len(AUG_OPS):
            deficient.append(f"{dataset.class_names[k]} (has {c}, originals {len(originals[k])})")
    if deficient:
        raise DatasetError(
            f"target {target_per_class} unreachable with {len(AUG_OPS)} ops per image for: "
            + ", ".join(deficient)
        )
    next_uid = max((it.uid for it in dataset.items), default=-1) + 1
    items = list(dataset.items)
    for k, c in enumerate(counts):
        need = target_per_class - c
        if need <= 0:
            continue
        src = originals[k]
        rng = np.random.default_rng([seed, k])
        picks = np.sort(rng.choice(len(src) * len(AUG_OPS), size=need, replace=False))
        for p in picks:
            s, op = src[p // len(AUG_OPS)], AUG_OPS[p % len(AUG_OPS)]
            items.append(LabeledImage(apply_op(s.pixels, op), s.y, s.z, next_uid,
                                      "augmented", s.uid, op, s.split))
            next_uid += 1
    return replace(dataset, items=items)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_train_test(dataset, test_fraction, seed, group_by_source=True):
    """Stratified split. With ``group_by_source`` an augmented item always
    lands in the same split as its source image."""
    if not 0 < test_fraction < 1:
        raise DatasetError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_groups = set()
    for k in range(dataset.n_classes):
        members = [it for it in dataset.items if it.y == k]
        if group_by_source:
            groups = sorted({it.uid if it.source is None else it.source for it in members})
        else:
            groups = sorted(it.uid for it in members)
        if len(groups) < 2:
            raise DatasetError(f"class {dataset.class_names[k]} has {len(groups)} item(s); need >= 2 to split")
        n_test = min(max(int(round(len(groups) * test_fraction)), 1), len(groups) - 1)
        chosen = rng.permutation(len(groups))[:n_test]
        test_groups.update(groups[i] for i in chosen)

    def key(it):
        return it.uid if (it.source is None or not group_by_source) else it.source

    train, test = [], []
    for it in dataset.items:
        (test if key(it) in test_groups else train).append(it)
    train = [replace(it, split="train") for it in train]
    test = [replace(it, split="test") for it in test]
    return replace(dataset, items=train), replace(dataset, items=test)


def prepare_dataset(n_classes=21, per_class=100, image_size=32, seed=0, test_fraction=0.2,
                    target_per_class=None, augment_first=False, densities=None):
    """Generate, split and balance. Default order splits first and augments
    only the training split; ``augment_first`` augments before splitting
    (allowing near-duplicates across splits)."""
    ds = generate_synthetic_dataset(n_classes, per_class, image_size, seed, densities)
    target = per_class if target_per_class is None else target_per_class
    if augment_first:
        ds = balanced_augment(ds, target, seed)
        train, test = split_train_test(ds, test_fraction, seed, group_by_source=False)
    else:
        train, test = split_train_test(ds, test_fraction, seed)
        train_target = int(round(target * (1 - test_fraction)))
        train = balanced_augment(train, train_target, seed)
    out = replace(ds, items=train.items + test.items)
    out.generator = dict(ds.generator, test_fraction=test_fraction, target_per_class=target,
                         augment_first=augment_first)
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"
IMAGES = "images.bin"


def _sha(b):
    return hashlib.sha256(b).hexdigest()


def _pixel_bytes(px):
    return np.ascontiguousarray(px, dtype="<f4").tobytes()


def save_dataset(dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = [IMAGE_MAGIC, struct.pack("<II", FORMAT_VERSION, len(dataset.items))]
    records = []
    for it in dataset.items:
        h, w, c = it.pixels.shape
        raw = _pixel_bytes(it.pixels)
        blob.append(struct.pack("<III", h, w, c))
        blob.append(raw)
        records.append({
            "uid": it.uid, "y": it.y, "z": it.z, "provenance": it.provenance,
            "source": it.source, "op": it.op, "split": it.split, "sha256": _sha(raw),
        })
    data = b"".join(blob)
    manifest = {
        "format": "portionmtl-dataset",
        "version": FORMAT_VERSION,
        "class_names": list(dataset.class_names),
        "densities": list(dataset.densities),
        "generator": dataset.generator,
        "class_counts": dataset.class_counts(),
        "images_sha256": _sha(data),
        "items": records,
    }
    (path / IMAGES).write_bytes(data)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(path):
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        data = (path / IMAGES).read_bytes()
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"missing dataset file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("format") != "portionmtl-dataset":
        raise DatasetFormatError("not a portionmtl dataset manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"manifest version {manifest.get('version')} != supported {FORMAT_VERSION}")
    if len(data) < 16 or data[:8] != IMAGE_MAGIC:
        raise DatasetFormatError("image blob has a bad magic header or is truncated")
    version, count = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"image blob version {version} != supported {FORMAT_VERSION}")
    if _sha(data) != manifest["images_sha256"]:
        raise ChecksumError("image blob checksum mismatch")
    if count != len(manifest["items"]):
        raise DatasetFormatError(f"blob holds {count} images, manifest lists {len(manifest['items'])}")
    off, items = 16, []
    for rec in manifest["items"]:
        if off + 12 > len(data):
            raise DatasetFormatError("image blob truncated")
        h, w, c = struct.unpack_from("<III", data, off)
        off += 12
        nbytes = h * w * c * 4
        raw = data[off:off + nbytes]
        if len(raw) != nbytes:
            raise DatasetFormatError("image blob truncated")
        off += nbytes
        if _sha(raw) != rec["sha256"]:
            raise ChecksumError(f"checksum mismatch for item uid={rec['uid']}")
        px = np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float32)
        items.append(LabeledImage(px, rec["y"], rec["z"], rec["uid"], rec["provenance"],
                                  rec["source"], rec["op"], rec["split"]))
    if off != len(data):
        raise DatasetFormatError("trailing bytes in image blob")
    ds = Dataset(items, manifest["class_names"], manifest["densities"], manifest["generator"])
    if ds.class_counts() != manifest["class_counts"]:
        raise DatasetFormatError("class counts disagree with manifest")
    return ds


def dataset_digest(path):
    """SHA-256 over the dataset directory's files, in name order."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        h.update(name.encode())
        h.update(Path(path, name).read_bytes())
    return h.hexdigest()


def datasets_equal(a, b):
    if (a.class_names, a.densities, a.generator) != (b.class_names, b.densities, b.generator):
        return False
    if len(a.items) != len(b.items):
        return False
    for p, q in zip(a.items, b.items):
        if (p.y, p.z, p.uid, p.provenance, p.source, p.op, p.split) != (
                q.y, q.z, q.uid, q.provenance, q.source, q.op, q.split):
            return False
        if p.pixels.shape != q.pixels.shape or _pixel_bytes(p.pixels) != _pixel_bytes(q.pixels):
            return False
    return True


__all__ = [
    "Z_MAX", "AUG_OPS", "LabeledImage", "Dataset", "DatasetError", "DatasetFormatError",
    "ChecksumError", "generate_synthetic_dataset", "balanced_augment", "split_train_test",
    "prepare_dataset", "save_dataset", "load_dataset", "apply_op", "object_area_fraction",
    "render", "shape_mask", "portion_value", "dataset_digest", "datasets_equal",
]
