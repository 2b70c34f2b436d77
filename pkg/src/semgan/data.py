"""Dataset representation and label-file I/O.

Images live in model space: float32 arrays of shape (H, W, 3) with values in
[-1, 1], matching the tanh output of the generators. Label files are plain
text, one "class cx cy w h" line per object with normalized coordinates.

Dataset directory layout::

    <dir>/images/*.png
    <dir>/labels/*.txt     (same stems as the images)
    <dir>/manifest.json
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParseError, ValidationError

# Table 2 rows (a, b) keyed by k. Non-listed k fall back to an 80/20 split.
PUBLISHED_SPLITS = {
    2: (1, 1),
    5: (4, 1),
    9: (8, 1),
    14: (12, 2),
    19: (16, 3),
    30: (24, 6),
    40: (32, 8),
    50: (40, 10),
}


@dataclass(frozen=True)
class BoundingBox:
    """Normalized axis-aligned box: center (cx, cy) and extent (w, h), all as
    fractions of the image side."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError("class_id", f"must be >= 0, got {self.class_id}")
        for name in ("cx", "cy"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(name, f"must be in [0, 1], got {v}")
        for name in ("w", "h"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValidationError(name, f"must be in (0, 1], got {v}")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) corner form."""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def flipped_horizontal(self) -> "BoundingBox":
        return BoundingBox(self.class_id, 1.0 - self.cx, self.cy, self.w, self.h)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


@dataclass
class LabeledImage:
    """An image with optional ground-truth boxes.

    ``boxes is None`` means the image is unlabeled; an empty list means
    labeled with no objects.
    """

    pixels: np.ndarray  # (H, W, 3) float32 in [-1, 1]
    boxes: list[BoundingBox] | None = None
    domain: str = ""
    name: str = ""

    @property
    def labeled(self) -> bool:
        return self.boxes is not None


@dataclass(frozen=True)
class SplitSchedule:
    k: int
    a: int  # train count
    b: int  # valid count

    def __post_init__(self):
        if self.a + self.b != self.k:
            raise ValidationError("a+b", f"{self.a}+{self.b} != k={self.k}")
        if self.a < 1 or self.b < 1:
            raise ValidationError("a,b", "both splits need at least one image")


def split_schedule(k: int) -> SplitSchedule:
    """Train/valid counts for k labeled images.

    The eight published rows are returned verbatim; other k use
    a = max(1, floor(0.8*k)) with b >= 1 enforced.
    """
    if k < 2:
        raise ValidationError("k", f"need at least 2 labeled images, got {k}")
    if k in PUBLISHED_SPLITS:
        a, b = PUBLISHED_SPLITS[k]
        return SplitSchedule(k, a, b)
    a = max(1, int(0.8 * k))
    b = k - a
    if b < 1:
        a -= 1
        b = 1
    return SplitSchedule(k, a, b)


def parse_label_file(text: str) -> list[BoundingBox]:
    """Parse "class cx cy w h" lines into boxes; blank lines are skipped."""
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ParseError(lineno, f"expected 5 fields, got {len(fields)}")
        try:
            class_id = int(fields[0])
            values = [float(t) for t in fields[1:]]
        except ValueError as exc:
            raise ParseError(lineno, f"non-numeric token: {exc}") from exc
        try:
            boxes.append(BoundingBox(class_id, *values))
        except ValidationError as exc:
            raise ParseError(lineno, str(exc)) from exc
    return boxes


def serialize_labels(boxes: list[BoundingBox]) -> str:
    """Inverse of parse_label_file, 6 decimal places per coordinate."""
    return "".join(
        f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b in boxes
    )


def to_model_space(pixels_u8: np.ndarray) -> np.ndarray:
    """8-bit RGB -> float32 in [-1, 1]."""
    return (pixels_u8.astype(np.float32) / 255.0) * 2.0 - 1.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """float in [-1, 1] -> 8-bit RGB (clipped, round-half-up via rint)."""
    scaled = (np.clip(pixels, -1.0, 1.0) + 1.0) / 2.0 * 255.0
    return np.rint(scaled).astype(np.uint8)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return to_model_space(np.asarray(rgb))


def save_image(pixels: np.ndarray, path: Path) -> None:
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path, format="PNG")


def load_domain(dir: Path, labeled: bool) -> list[LabeledImage]:
    """Load every image in a dataset directory, lexicographic by file name.

    With labeled=True each image must have a sibling label file.
    """
    dir = Path(dir)
    image_dir = dir / "images"
    label_dir = dir / "labels"
    if not image_dir.is_dir():
        raise ValidationError("dir", f"no images/ directory under {dir}")
    domain = dir.name
    manifest_path = dir / "manifest.json"
    if manifest_path.exists():
        domain = json.loads(manifest_path.read_text()).get("style", domain)
    out = []
    for image_path in sorted(image_dir.glob("*.png")):
        pixels = load_image(image_path)
        boxes = None
        if labeled:
            label_path = label_dir / (image_path.stem + ".txt")
            if not label_path.exists():
                raise ValidationError(
                    "labels", f"missing label file for {image_path.name}"
                )
            try:
                boxes = parse_label_file(label_path.read_text())
            except ParseError as exc:
                raise ParseError(exc.line, f"{label_path}: {exc}") from exc
        out.append(
            LabeledImage(pixels=pixels, boxes=boxes, domain=domain, name=image_path.stem)
        )
    return out


def write_dataset_entry(
    dir: Path, stem: str, pixels: np.ndarray, boxes: list[BoundingBox]
) -> dict:
    """Write one image + label file pair; returns its manifest entry."""
    dir = Path(dir)
    (dir / "images").mkdir(parents=True, exist_ok=True)
    (dir / "labels").mkdir(parents=True, exist_ok=True)
    save_image(pixels, dir / "images" / f"{stem}.png")
    (dir / "labels" / f"{stem}.txt").write_text(serialize_labels(boxes))
    return {"image": f"images/{stem}.png", "labels": f"labels/{stem}.txt"}
