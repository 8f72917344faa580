"""Dataset ingestion and a deterministic synthetic traffic-sign corpus.

Images flow through one pipeline regardless of origin: decode (PNG/PPM),
scale to [0,1] floats, bilinear-resize to the model input side. The
synthetic generator renders geometric sign templates (shape x color) with
affine jitter, brightness variation and background noise, then quantizes
to the uint8 grid so in-memory sets and their PNG exports are identical.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from .errors import DomainError, IngestionError


@dataclass
class LabeledSample:
    """One (image, label) pair; image is (side, side, 3) float32 in [0,1]."""

    image: np.ndarray
    label: int


@dataclass
class LabeledSet:
    samples: list = field(default_factory=list)
    num_classes: int = 0
    split_tag: str = "train"

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, n):
        """First n samples as a new set (shares image arrays)."""
        return LabeledSet(self.samples[:n], self.num_classes, self.split_tag)


def resize_bilinear(image, side):
    """Corner-aligned bilinear resize of an (H, W, C) image to side x side.

    Output values never leave the input's [min, max] envelope; the result
    is clipped to [0,1] and returned as float32.
    """
    if side <= 0:
        raise DomainError(f"target side must be positive, got {side}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise DomainError(f"image must be (H, W, C), got shape {img.shape}")
    h, w, _ = img.shape

    def coords(n_src, n_dst):
        if n_dst == 1 or n_src == 1:
            return np.zeros(n_dst)
        return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))

    ys, xs = coords(h, side), coords(w, side)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def load_image(path, side=None):
    """Decode PNG/PPM to a float32 (H, W, 3) array in [0,1], optionally resized."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if side is not None and arr.shape[:2] != (side, side):
        arr = resize_bilinear(arr, side)
    return arr


def load_gtsrb_layout(root, index_csv, num_classes=None, side=150, split_tag="train"):
    """Load a corpus from an index CSV of (path,label) rows.

    Paths are relative to `root`; images may be PNG or PPM and are resized
    to `side`. If num_classes is None it is inferred as max(label)+1.
    Errors carry the 1-based line number of the offending row.
    """
    try:
        with open(index_csv, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise IngestionError(f"cannot read index {index_csv}: {e}") from e
    if not rows or rows[0] != ["path", "label"]:
        raise IngestionError(f"{index_csv}: first line must be the header 'path,label'")
    if len(rows) == 1:
        raise IngestionError(f"{index_csv}: index contains no data rows")

    samples = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise IngestionError(f"{index_csv}:{lineno}: expected 2 fields, got {len(row)}")
        rel, raw_label = row
        try:
            label = int(raw_label)
        except ValueError as e:
            raise IngestionError(f"{index_csv}:{lineno}: bad label {raw_label!r}") from e
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise IngestionError(
                f"{index_csv}:{lineno}: label {label} out of range for {num_classes} classes"
            )
        path = os.path.join(root, rel)
        try:
            image = load_image(path, side=side)
        except FileNotFoundError as e:
            raise IngestionError(f"{index_csv}:{lineno}: missing image file {path}") from e
        except UnidentifiedImageError as e:
            raise IngestionError(f"{index_csv}:{lineno}: cannot decode image {path}") from e
        samples.append(LabeledSample(image, label))

    k = num_classes if num_classes is not None else max(s.label for s in samples) + 1
    return LabeledSet(samples, num_classes=k, split_tag=split_tag)


# ---------------------------------------------------------------------------
# synthetic sign corpus

# distinct (shape, fill RGB) templates; index = class id
_TEMPLATES = [
    ("circle", (218, 32, 28)),
    ("triangle", (26, 60, 216)),
    ("octagon", (230, 190, 25)),
    ("square", (25, 160, 60)),
    ("circle", (26, 60, 216)),
    ("triangle", (218, 32, 28)),
    ("square", (232, 126, 20)),
    ("octagon", (140, 38, 180)),
    ("circle", (25, 160, 60)),
    ("square", (218, 32, 28)),
]

_POLY_BASE_ANGLES = {
    "triangle": [90.0, 210.0, 330.0],
    "square": [45.0, 135.0, 225.0, 315.0],
    "octagon": [22.5 + 45.0 * i for i in range(8)],
}


def _render_sign(shape, color, side, rng):
    bg = rng.uniform(0.30, 0.72)
    tint = rng.uniform(-0.06, 0.06, size=3)
    canvas = np.clip(bg + tint, 0.0, 1.0)
    img = Image.new("RGB", (side, side), tuple(int(round(255 * v)) for v in canvas))
    draw = ImageDraw.Draw(img)

    cx = side / 2 + rng.uniform(-0.09, 0.09) * side
    cy = side / 2 + rng.uniform(-0.09, 0.09) * side
    r = rng.uniform(0.26, 0.40) * side
    rot = np.deg2rad(rng.uniform(-20.0, 20.0))

    if shape == "circle":
        box = (cx - r, cy - r, cx + r, cy + r)
        draw.ellipse(box, fill=color, outline=(245, 245, 245), width=max(2, side // 40))
    else:
        pts = []
        for ang in _POLY_BASE_ANGLES[shape]:
            a = np.deg2rad(ang) + rot
            pts.append((cx + r * np.cos(a), cy - r * np.sin(a)))
        draw.polygon(pts, fill=color, outline=(245, 245, 245), width=max(2, side // 40))

    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = arr * rng.uniform(0.72, 1.12)
    arr = arr + rng.normal(0.0, 0.035, size=arr.shape)
    arr = np.clip(arr, 0.0, 1.0)
    # snap to the uint8 grid so PNG export round-trips exactly
    return (np.round(arr * 255.0) / 255.0).astype(np.float32)


def synth_signs(num_classes, per_class, seed, side=150, split_tag="train"):
    """Deterministic synthetic sign corpus of num_classes * per_class samples.

    Classes are distinct shape/color templates with random placement,
    scale, rotation, brightness and background noise. Samples interleave
    class labels (0,1,...,K-1,0,1,...) so any prefix stays balanced.
    """
    if not 2 <= num_classes <= len(_TEMPLATES):
        raise DomainError(f"num_classes must be in [2, {len(_TEMPLATES)}], got {num_classes}")
    if per_class < 1:
        raise DomainError(f"per_class must be positive, got {per_class}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(per_class):
        for k in range(num_classes):
            shape, color = _TEMPLATES[k]
            samples.append(LabeledSample(_render_sign(shape, color, side, rng), k))
    return LabeledSet(samples, num_classes=num_classes, split_tag=split_tag)


def export_corpus(dataset, out_dir, csv_name="index.csv"):
    """Write a LabeledSet as PNGs plus an index CSV in the loader's format."""
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    rows = []
    for i, s in enumerate(dataset):
        name = f"{dataset.split_tag}_{i:05d}.png"
        arr = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(images_dir, name))
        rows.append((f"images/{name}", s.label))
    csv_path = os.path.join(out_dir, csv_name)
    with open(csv_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("path,label\n")
        for rel, label in rows:
            f.write(f"{rel},{label}\n")
    return csv_path
