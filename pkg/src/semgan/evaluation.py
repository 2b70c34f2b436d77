"""Detection metrics and the color-band consistency oracle.

Average precision follows the continuous (all-points) interpolation
convention: the precision envelope is integrated over recall. Matching is
greedy in confidence order, each ground-truth box usable at most once.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import BoundingBox, LabeledImage, box_iou
from .errors import ValidationError
from .nets import Detection, NetworkHandle, decode_detections, detector_forward, nms
from .scenegen import BERRY_HUE_BAND, MIN_CLUSTER_AREA_PX


def iou(a: BoundingBox, b: BoundingBox) -> float:
    return box_iou(a, b)


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    confidence: float


def _pr_sweep(
    dets: list[tuple[object, Detection]],
    gts: list[tuple[object, BoundingBox]],
    iou_threshold: float,
) -> tuple[list[PRPoint], int, int]:
    """Greedy confidence-ordered matching; returns (curve, tp, fp)."""
    gt_by_image: dict[object, list[BoundingBox]] = {}
    for image_id, box in gts:
        gt_by_image.setdefault(image_id, []).append(box)
    matched: dict[object, list[bool]] = {k: [False] * len(v) for k, v in gt_by_image.items()}

    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].confidence, i))
    num_gt = len(gts)
    tp = fp = 0
    points: list[PRPoint] = []
    for idx in order:
        image_id, det = dets[idx]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_by_image.get(image_id, [])):
            if matched[image_id][j]:
                continue
            overlap = box_iou(det.box, gt)
            if overlap > best_iou:
                best_iou, best_j = overlap, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[image_id][best_j] = True
            tp += 1
        else:
            fp += 1
        points.append(PRPoint(
            recall=tp / num_gt if num_gt else 0.0,
            precision=tp / (tp + fp),
            confidence=det.confidence,
        ))
    return points, tp, fp


def _envelope_area(points: list[PRPoint]) -> float:
    """Integrate the running-max precision envelope over recall."""
    if not points:
        return 0.0
    recalls = np.array([0.0] + [p.recall for p in points])
    precisions = np.array([0.0] + [p.precision for p in points])
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    return float(np.sum((recalls[1:] - recalls[:-1]) * precisions[1:]))


def average_precision(
    dets: list[tuple[object, Detection]],
    gts: list[tuple[object, BoundingBox]],
    iou_threshold: float,
) -> float:
    """AP over (image_id, detection) / (image_id, ground truth) pairs.

    Zero ground truths with detections present scores 0; both empty is
    undefined and scores 0 with a warning.
    """
    if not gts:
        if not dets:
            warnings.warn("average_precision undefined on empty inputs; returning 0")
        return 0.0
    points, _, _ = _pr_sweep(dets, gts, iou_threshold)
    return _envelope_area(points)


@dataclass
class EvalReport:
    ap30: float  # percent, one decimal
    ap50: float  # percent, one decimal
    pr_curves: dict[str, list[PRPoint]]
    counts: dict[str, dict[str, int]]  # per threshold: tp, fp, fn
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap30": self.ap30,
            "ap50": self.ap50,
            "pr_curves": {
                key: [{"recall": p.recall, "precision": p.precision, "confidence": p.confidence}
                      for p in curve]
                for key, curve in self.pr_curves.items()
            },
            "counts": self.counts,
            "metadata": self.metadata,
        }

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_pr_csv(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for key, curve in self.pr_curves.items():
            lines = ["confidence,precision,recall"]
            lines += [f"{p.confidence:.6f},{p.precision:.6f},{p.recall:.6f}" for p in curve]
            (directory / f"pr_{key}.csv").write_text("\n".join(lines) + "\n")


IOU_THRESHOLDS = (0.3, 0.5)


def evaluate_model(
    detector: NetworkHandle,
    test: list[LabeledImage],
    conf_threshold: float = 0.1,
    nms_threshold: float = 0.45,
) -> EvalReport:
    """Detector AP at IoU 0.3 and 0.5 over a labeled image list."""
    if not test:
        raise ValidationError("test", "evaluation needs at least one image")
    for image in test:
        if not image.labeled:
            raise ValidationError("test", f"image {image.name!r} has no labels")

    dets: list[tuple[object, Detection]] = []
    gts: list[tuple[object, BoundingBox]] = []
    for idx, image in enumerate(test):
        grid = detector_forward(detector, image.pixels)
        kept = nms(decode_detections(grid, conf_threshold), nms_threshold)
        dets.extend((idx, d) for d in kept)
        gts.extend((idx, box) for box in image.boxes)

    pr_curves: dict[str, list[PRPoint]] = {}
    counts: dict[str, dict[str, int]] = {}
    aps: dict[str, float] = {}
    for threshold in IOU_THRESHOLDS:
        key = f"{int(round(threshold * 100))}"
        points, tp, fp = _pr_sweep(dets, gts, threshold)
        pr_curves[key] = points
        counts[key] = {"tp": tp, "fp": fp, "fn": len(gts) - tp}
        aps[key] = _envelope_area(points) if gts else 0.0

    return EvalReport(
        ap30=round(aps["30"] * 100, 1),
        ap50=round(aps["50"] * 100, 1),
        pr_curves=pr_curves,
        counts=counts,
        metadata={
            "interpolation": "continuous",
            "conf_threshold": conf_threshold,
            "nms_threshold": nms_threshold,
            "num_images": len(test),
            "num_ground_truth": len(gts),
            "num_detections": len(dets),
        },
    )


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV on arrays shaped (...,3) with values in [0,1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    value = maxc
    chroma = maxc - minc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    saturation = np.where(maxc > 0, chroma / safe_max, 0.0)
    safe_chroma = np.where(chroma > 0, chroma, 1.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    hue_r = np.mod((g - b) / safe_chroma, 6.0)
    hue_g = (b - r) / safe_chroma + 2.0
    hue_b = (r - g) / safe_chroma + 4.0
    hue = np.select([maxc == r, maxc == g], [hue_r, hue_g], default=hue_b) / 6.0
    hue = np.where(chroma > 0, np.mod(hue, 1.0), 0.0)
    return np.stack([hue, saturation, value], axis=-1)


def hue_band_boxes(
    pixels: np.ndarray,
    hue_band: tuple[float, float] = BERRY_HUE_BAND,
    min_saturation: float = 0.25,
    min_value: float = 0.04,
    min_area: int = MIN_CLUSTER_AREA_PX,
) -> list[BoundingBox]:
    """Localize color-band blobs in an image in [-1,1].

    Pixels inside the hue band (with enough saturation and value) are
    grouped into connected components; a one-step dilation bridges gaps of
    up to two pixels so a cluster of touching blobs stays one component.
    Components with at least min_area in-band pixels yield tight boxes
    around those pixels.
    """
    rgb = np.clip((np.asarray(pixels, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    hsv = rgb_to_hsv(rgb)
    lo, hi = hue_band
    hue = hsv[..., 0]
    in_band = (hue >= lo) & (hue <= hi) if lo <= hi else (hue >= lo) | (hue <= hi)
    mask = in_band & (hsv[..., 1] >= min_saturation) & (hsv[..., 2] >= min_value)
    if not mask.any():
        return []
    merged = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool))
    labels, count = ndimage.label(merged, structure=np.ones((3, 3), int))
    height, width = mask.shape
    boxes: list[BoundingBox] = []
    for component in range(1, count + 1):
        ys, xs = np.nonzero((labels == component) & mask)
        if len(ys) < min_area:
            continue
        x0, x1 = xs.min(), xs.max() + 1
        y0, y1 = ys.min(), ys.max() + 1
        boxes.append(BoundingBox(
            class_id=0,
            cx=(x0 + x1) / 2 / width,
            cy=(y0 + y1) / 2 / height,
            w=(x1 - x0) / width,
            h=(y1 - y0) / height,
        ))
    return boxes


def semantic_consistency_score(
    translated: list[np.ndarray],
    source_labels: list[list[BoundingBox]],
    hue_band: tuple[float, float] = BERRY_HUE_BAND,
) -> float:
    """How well color-band blobs in translated images line up with the
    source boxes.

    Per image, oracle boxes from hue_band_boxes are greedily paired with
    source boxes by descending IoU; the image scores the mean IoU over all
    source boxes (unpaired ones count 0). Images without source boxes score
    1 when the oracle also finds nothing, else 0. Returns the mean over
    images.
    """
    if not translated:
        raise ValidationError("translated", "need at least one image")
    if len(translated) != len(source_labels):
        raise ValidationError(
            "source_labels", f"{len(source_labels)} label lists for {len(translated)} images"
        )
    scores = []
    for pixels, boxes in zip(translated, source_labels):
        found = hue_band_boxes(pixels, hue_band=hue_band)
        if not boxes:
            scores.append(1.0 if not found else 0.0)
            continue
        pairs = [
            (box_iou(f, s), fi, si)
            for fi, f in enumerate(found)
            for si, s in enumerate(boxes)
        ]
        pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
        used_found: set[int] = set()
        used_source: set[int] = set()
        total = 0.0
        for overlap, fi, si in pairs:
            if overlap <= 0 or fi in used_found or si in used_source:
                continue
            used_found.add(fi)
            used_source.add(si)
            total += overlap
        scores.append(total / len(boxes))
    return float(np.mean(scores))
