"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written from scratch against the documented
behavior, with different algorithms and data layouts than the library code:
per-prefix re-matching instead of an incremental sweep, Kuhn matching for
the optimal-assignment bound, scalar colorsys conversions instead of
vectorized numpy, and direct conv-arithmetic for network output shapes.
"""

from __future__ import annotations

import colorsys
import math

import numpy as np
import torch


# --- geometry ----------------------------------------------------------------

def iou_corners(a, b) -> float:
    """IoU from (cx, cy, w, h) tuples via corner coordinates."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


# --- average precision -------------------------------------------------------

def _greedy_tp_count(prefix, gts_by_image, tau) -> int:
    """Re-run the documented greedy matching from scratch on a prefix.

    prefix: list of (image_id, (cx,cy,w,h)) already in confidence order.
    """
    taken = {img: [False] * len(boxes) for img, boxes in gts_by_image.items()}
    tp = 0
    for image_id, det_box in prefix:
        best, best_j = 0.0, -1
        for j, gt_box in enumerate(gts_by_image.get(image_id, [])):
            if taken[image_id][j]:
                continue
            overlap = iou_corners(det_box, gt_box)
            if overlap > best:
                best, best_j = overlap, j
        if best_j >= 0 and best >= tau:
            taken[image_id][best_j] = True
            tp += 1
    return tp


def _max_matching_tp_count(prefix, gts_by_image, tau) -> int:
    """Maximum bipartite matching (Kuhn's algorithm) between prefix
    detections and ground truths with IoU >= tau."""
    tp = 0
    for image_id, boxes in gts_by_image.items():
        dets = [d for img, d in prefix if img == image_id]
        edges = [
            [j for j, g in enumerate(boxes) if iou_corners(d, g) >= tau]
            for d in dets
        ]
        match_of_gt = [-1] * len(boxes)

        def try_assign(i, seen):
            for j in edges[i]:
                if seen[j]:
                    continue
                seen[j] = True
                if match_of_gt[j] < 0 or try_assign(match_of_gt[j], seen):
                    match_of_gt[j] = i
                    return True
            return False

        for i in range(len(dets)):
            try_assign(i, [False] * len(boxes))
        tp += sum(1 for j in match_of_gt if j >= 0)
    return tp


def _integrate_envelope(points) -> float:
    """AP from (recall, precision) points by scanning each recall segment for
    the best precision at or beyond it."""
    recalls = sorted({r for r, _ in points})
    ap = 0.0
    prev = 0.0
    for r in recalls:
        width = r - prev
        best = max(p for rr, p in points if rr >= r)
        ap += width * best
        prev = r
    return ap


def ap_reference(dets, gts, tau, matcher=_greedy_tp_count) -> float:
    """Brute-force AP: per-prefix re-matching plus direct envelope scan.

    dets: list of (image_id, (cx,cy,w,h), confidence)
    gts: list of (image_id, (cx,cy,w,h))
    """
    if not gts:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    ordered = [(dets[i][0], dets[i][1]) for i in order]
    gts_by_image: dict = {}
    for image_id, box in gts:
        gts_by_image.setdefault(image_id, []).append(box)
    points = []
    for p in range(1, len(ordered) + 1):
        tp = matcher(ordered[:p], gts_by_image, tau)
        points.append((tp / len(gts), tp / p))
    if not points:
        return 0.0
    return _integrate_envelope(points)


def ap_reference_optimal(dets, gts, tau) -> float:
    return ap_reference(dets, gts, tau, matcher=_max_matching_tp_count)


def greedy_equals_optimal_everywhere(dets, gts, tau) -> bool:
    """True when every detection has at most one ground truth above the IoU
    threshold in its image, a sufficient condition for greedy matching to be
    optimal on every prefix."""
    gts_by_image: dict = {}
    for image_id, box in gts:
        gts_by_image.setdefault(image_id, []).append(box)
    for image_id, det_box, _ in dets:
        candidates = sum(
            1 for g in gts_by_image.get(image_id, []) if iou_corners(det_box, g) >= tau
        )
        if candidates > 1:
            return False
    return True


# --- gradients ---------------------------------------------------------------

def finite_difference_check(
    loss_fn,
    params: list[torch.nn.Parameter],
    rng: np.random.Generator,
    n_samples: int = 100,
    step: float = 1e-5,
) -> float:
    """Max relative error between autograd and central finite differences.

    loss_fn must be a deterministic closure over float64 parameters.
    Relative error uses a 1e-6 floor so finite-difference noise on
    near-zero gradients does not blow up the ratio.

    A secant at fixed step width is only a derivative estimate where the
    function is smooth at that scale; objectives with absolute-value terms
    have kinks that a straddling secant misreads. Each coordinate is
    therefore validated by comparing the step and step/2 secants: if they
    disagree the coordinate is discarded and another drawn (capped at
    2*n_samples draws, so a systematically non-smooth gradient still
    fails). A wrong-but-smooth analytic gradient yields consistent secants
    and is always caught.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    max_draws = min(2 * n_samples, total)
    picks = rng.choice(total, size=max_draws, replace=False)
    worst = 0.0
    checked = 0
    for flat_index in picks:
        if checked >= n_samples:
            break
        p_idx = 0
        offset = int(flat_index)
        while offset >= sizes[p_idx]:
            offset -= sizes[p_idx]
            p_idx += 1
        param = params[p_idx]

        def secant(h):
            with torch.no_grad():
                original = param.view(-1)[offset].item()
                param.view(-1)[offset] = original + h
                f_plus = float(loss_fn())
                param.view(-1)[offset] = original - h
                f_minus = float(loss_fn())
                param.view(-1)[offset] = original
            return (f_plus - f_minus) / (2 * h)

        fd = secant(step)
        fd_half = secant(step / 2)
        if abs(fd - fd_half) > 1e-4 * max(abs(fd), abs(fd_half), 1e-6):
            continue  # kink inside the secant interval
        an = 0.0 if grads[p_idx] is None else float(grads[p_idx].view(-1)[offset])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        worst = max(worst, rel)
        checked += 1
    if checked < min(n_samples, total // 2):
        raise AssertionError(
            f"only {checked} finite-difference coordinates were smooth enough "
            f"to evaluate out of {max_draws} drawn"
        )
    return worst


# --- image analysis ----------------------------------------------------------

def hue_mask_colorsys(pixels: np.ndarray, band, min_saturation=0.25, min_value=0.04):
    """Boolean berry mask computed pixel-by-pixel with the stdlib colorsys
    conversion (images in [-1, 1])."""
    h, w, _ = pixels.shape
    mask = np.zeros((h, w), dtype=bool)
    lo, hi = band
    for y in range(h):
        for x in range(w):
            r, g, b = ((pixels[y, x] + 1.0) / 2.0).clip(0, 1)
            hue, sat, val = colorsys.rgb_to_hsv(float(r), float(g), float(b))
            in_band = lo <= hue <= hi if lo <= hi else (hue >= lo or hue <= hi)
            if in_band and sat >= min_saturation and val >= min_value:
                mask[y, x] = True
    return mask


def connected_components_bfs(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """8-connected components by explicit BFS."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    components = []
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            queue = [(sy, sx)]
            seen[sy, sx] = True
            pixels = []
            while queue:
                y, x = queue.pop()
                pixels.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            components.append(pixels)
    return components


# --- conv arithmetic ---------------------------------------------------------

def conv_chain_output(size: int, layers: list[tuple[int, int, int]]) -> int:
    """Spatial size after a chain of (kernel, stride, padding) convolutions."""
    for kernel, stride, padding in layers:
        size = (size + 2 * padding - kernel) // stride + 1
    return size


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def bce_with_logits(logit: float, target: float) -> float:
    p = sigmoid(logit)
    eps = 1e-12
    return -(target * math.log(p + eps) + (1 - target) * math.log(1 - p + eps))
