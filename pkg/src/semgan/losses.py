"""Training objectives: adversarial, cycle, identity, and detection terms.

All reductions are means. The combined objective is

    total = adv_ab + adv_ba
          + lambda_cycle * cycle
          + lambda_identity * identity
          + lambda_task * task

with lambda_task = 0 recovering a plain unpaired translation objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import BoundingBox
from .errors import ValidationError
from .nets import DetectionGrid

ADV_FORMS = ("least_squares", "log_form")

DEFAULT_TERM_WEIGHTS = {"coord": 1.0, "obj": 1.0, "noobj": 0.5, "cls": 1.0}


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0
    lambda_task: float = 1.0
    adv_form: str = "least_squares"

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_identity", "lambda_task"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(name, f"must be a finite non-negative number, got {value}")
        if self.adv_form not in ADV_FORMS:
            raise ValidationError("adv_form", f"must be one of {ADV_FORMS}, got {self.adv_form!r}")


def adversarial_loss(scores: torch.Tensor, target_is_real: bool, form: str) -> torch.Tensor:
    """Score a patch map against a real/fake target.

    least_squares: mean (score - target)^2 with target 1 for real, 0 for
    fake. log_form: mean binary cross-entropy on raw scores treated as
    logits; generators use the non-saturating direction by passing
    target_is_real=True for their fakes.
    """
    if form not in ADV_FORMS:
        raise ValidationError("adv_form", f"must be one of {ADV_FORMS}, got {form!r}")
    target = torch.ones_like(scores) if target_is_real else torch.zeros_like(scores)
    if form == "least_squares":
        return F.mse_loss(scores, target)
    return F.binary_cross_entropy_with_logits(scores, target)


def cycle_loss(real_a, reconstructed_a, real_b, reconstructed_b) -> torch.Tensor:
    """Mean L1 reconstruction error, summed over both directions."""
    return F.l1_loss(reconstructed_a, real_a) + F.l1_loss(reconstructed_b, real_b)


def identity_loss(real_a, identity_a, real_b, identity_b) -> torch.Tensor:
    """Mean L1 between each domain's images and the same-domain generator
    output, summed over both directions."""
    return F.l1_loss(identity_a, real_a) + F.l1_loss(identity_b, real_b)


def _anchor_shape_iou(w: float, h: float, aw: float, ah: float) -> float:
    inter = min(w, aw) * min(h, ah)
    union = w * h + aw * ah - inter
    return inter / union if union > 0 else 0.0


def _as_batched_tensors(grids) -> tuple[list[torch.Tensor], list, int]:
    if isinstance(grids, DetectionGrid):
        anchors, num_classes = grids.anchors, grids.num_classes
        scales = []
        for raw in grids.scales:
            t = raw if isinstance(raw, torch.Tensor) else torch.as_tensor(raw)
            scales.append(t.unsqueeze(0) if t.ndim == 4 else t)
        return scales, anchors, num_classes
    raise ValidationError("grid", "detection_task_loss expects a DetectionGrid")


def detection_task_loss(
    grid: DetectionGrid,
    targets: list[BoundingBox] | list[list[BoundingBox]],
    term_weights: dict | None = None,
) -> torch.Tensor:
    """Anchor-based detection loss over a two-scale grid.

    Each target box is assigned to the single (scale, anchor) whose shape
    best overlaps it, at the grid cell containing the box center. Per-term
    reductions are means:

    * coord: cross-entropy on the sigmoid-space center offsets plus squared
      error on log size ratios, over assigned slots,
    * obj: cross-entropy pulling assigned objectness toward 1,
    * noobj: cross-entropy pulling unassigned objectness toward 0, skipping
      slots whose decoded box already overlaps some target at IoU > 0.5,
    * cls: cross-entropy on class logits at assigned slots.

    Weighted sum with weights {coord, obj, noobj, cls}; defaults
    {1, 1, 0.5, 1}.
    """
    weights = dict(DEFAULT_TERM_WEIGHTS)
    if term_weights:
        unknown = set(term_weights) - set(weights)
        if unknown:
            raise ValidationError("term_weights", f"unknown terms {sorted(unknown)}")
        weights.update(term_weights)
    for name, value in weights.items():
        if not math.isfinite(value) or value < 0:
            raise ValidationError("term_weights", f"{name} must be non-negative, got {value}")

    scales, anchors, num_classes = _as_batched_tensors(grid)
    batch = scales[0].shape[0]
    if targets and isinstance(targets[0], BoundingBox):
        targets = [targets]  # single image
    if not targets:
        targets = [[]]
    if len(targets) != batch:
        raise ValidationError("targets", f"expected {batch} target lists, got {len(targets)}")

    flat_anchors = [
        (si, ai, aw, ah)
        for si, scale_anchors in enumerate(anchors)
        for ai, (aw, ah) in enumerate(scale_anchors)
    ]

    device = scales[0].device
    zero = torch.zeros((), device=device)
    coord_terms: list[torch.Tensor] = []
    size_terms: list[torch.Tensor] = []
    obj_terms: list[torch.Tensor] = []
    cls_terms: list[torch.Tensor] = []
    noobj_logits: list[torch.Tensor] = []

    for b in range(batch):
        boxes = targets[b]
        assigned: dict[tuple[int, int, int, int], BoundingBox] = {}
        for box in boxes:
            best = max(flat_anchors, key=lambda fa: _anchor_shape_iou(box.w, box.h, fa[2], fa[3]))
            si, ai = best[0], best[1]
            s = scales[si].shape[1]
            i = min(int(box.cx * s), s - 1)
            j = min(int(box.cy * s), s - 1)
            assigned[(si, j, i, ai)] = box

        for si, raw in enumerate(scales):
            s = raw.shape[1]
            scale_anchors = anchors[si]
            obj_logit = raw[b, ..., 4]
            # slots whose decoded box already covers a target are neither
            # positives nor penalized as background
            ignore = torch.zeros((s, s, len(scale_anchors)), dtype=torch.bool)
            if boxes:
                with torch.no_grad():
                    txy = torch.sigmoid(raw[b, ..., 0:2])
                    twh = torch.exp(raw[b, ..., 2:4].clamp(-10, 10))
                    jj, ii = torch.meshgrid(
                        torch.arange(s, dtype=torch.float32),
                        torch.arange(s, dtype=torch.float32),
                        indexing="ij",
                    )
                    cx = (ii.unsqueeze(-1) + txy[..., 0]) / s
                    cy = (jj.unsqueeze(-1) + txy[..., 1]) / s
                    aw = torch.tensor([a[0] for a in scale_anchors])
                    ah = torch.tensor([a[1] for a in scale_anchors])
                    w = aw.view(1, 1, -1) * twh[..., 0]
                    h = ah.view(1, 1, -1) * twh[..., 1]
                    best_iou = torch.zeros((s, s, len(scale_anchors)))
                    for box in boxes:
                        ix = (torch.minimum(cx + w / 2, torch.tensor(box.cx + box.w / 2))
                              - torch.maximum(cx - w / 2, torch.tensor(box.cx - box.w / 2))).clamp(min=0)
                        iy = (torch.minimum(cy + h / 2, torch.tensor(box.cy + box.h / 2))
                              - torch.maximum(cy - h / 2, torch.tensor(box.cy - box.h / 2))).clamp(min=0)
                        inter = ix * iy
                        iou = inter / (w * h + box.w * box.h - inter).clamp(min=1e-12)
                        best_iou = torch.maximum(best_iou, iou)
                    ignore = best_iou > 0.5

            positive = torch.zeros((s, s, len(scale_anchors)), dtype=torch.bool)
            for (psi, j, i, ai), box in assigned.items():
                if psi != si:
                    continue
                positive[j, i, ai] = True
                aw, ah = scale_anchors[ai]
                t_x = box.cx * s - i
                t_y = box.cy * s - j
                # targets inherit the grid dtype so float64 inputs stay float64
                coord_terms.append(F.binary_cross_entropy_with_logits(
                    raw[b, j, i, ai, 0], raw.new_tensor(float(t_x))))
                coord_terms.append(F.binary_cross_entropy_with_logits(
                    raw[b, j, i, ai, 1], raw.new_tensor(float(t_y))))
                size_terms.append((raw[b, j, i, ai, 2] - math.log(box.w / aw)) ** 2)
                size_terms.append((raw[b, j, i, ai, 3] - math.log(box.h / ah)) ** 2)
                obj_terms.append(F.binary_cross_entropy_with_logits(
                    obj_logit[j, i, ai], raw.new_tensor(1.0)))
                one_hot = raw.new_zeros(num_classes)
                one_hot[box.class_id % num_classes] = 1.0
                cls_terms.append(F.binary_cross_entropy_with_logits(
                    raw[b, j, i, ai, 5:], one_hot))

            background = ~positive & ~ignore
            if background.any():
                noobj_logits.append(obj_logit[background])

    coord = torch.stack(coord_terms).mean() + torch.stack(size_terms).mean() if coord_terms else zero
    obj = torch.stack(obj_terms).mean() if obj_terms else zero
    cls = torch.stack(cls_terms).mean() if cls_terms else zero
    if noobj_logits:
        flat = torch.cat([x.reshape(-1) for x in noobj_logits])
        noobj = F.binary_cross_entropy_with_logits(flat, torch.zeros_like(flat))
    else:
        noobj = zero
    return (weights["coord"] * coord + weights["obj"] * obj
            + weights["noobj"] * noobj + weights["cls"] * cls)


def total_objective(
    adv_ab: torch.Tensor,
    adv_ba: torch.Tensor,
    cycle: torch.Tensor,
    identity: torch.Tensor,
    task: torch.Tensor | None,
    weights: LossWeights,
) -> dict:
    """Combine generator-side terms; returns every component plus 'total'.

    task may be None only when lambda_task is 0.
    """
    if task is None:
        if weights.lambda_task != 0:
            raise ValidationError("task", "task term required when lambda_task > 0")
        task = torch.zeros(())
    total = (adv_ab + adv_ba
             + weights.lambda_cycle * cycle
             + weights.lambda_identity * identity
             + weights.lambda_task * task)
    return {
        "adv_ab": adv_ab,
        "adv_ba": adv_ba,
        "cycle": cycle,
        "identity": identity,
        "task": task,
        "total": total,
    }
