"""Network definitions and forward passes.

Three families, all CPU-friendly at 64px:

* generator: reflection-padded encoder/decoder with residual blocks and a
  tanh output (2 downsampling stages, configurable width/depth),
* discriminator: patch net scoring overlapping receptive fields (3
  stride-2 layers by default, so 64px input -> 6x6 score map),
* detector: small norm-free conv backbone with two detection scales
  (stride 16 and stride 8) and 3 anchors per scale.

Handles wrap a torch module together with its architecture config, a
trainable flag, and a provenance chain; checkpoints are self-describing
.npz containers.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from scipy.cluster.vq import kmeans2

from .data import BoundingBox, box_iou
from .errors import ValidationError

CHECKPOINT_VERSION = 1

GENERATOR_DEFAULTS = {"image_size": 64, "base_width": 32, "res_blocks": 4}
DISCRIMINATOR_DEFAULTS = {"image_size": 64, "base_width": 32, "n_down": 3}
DETECTOR_DEFAULTS = {"image_size": 64, "base_width": 16, "num_classes": 1}

# (w, h) anchor fractions, [coarse scale, fine scale]; used when a dataset is
# too small for k-means estimation.
DEFAULT_ANCHORS = [
    [(0.28, 0.28), (0.38, 0.38), (0.55, 0.55)],
    [(0.08, 0.08), (0.14, 0.14), (0.20, 0.20)],
]


@dataclass
class NetworkHandle:
    """A parameterized network plus the metadata needed to rebuild, audit,
    and freeze it."""

    kind: str  # generator | discriminator | detector
    module: nn.Module
    arch: dict
    trainable: bool = True
    provenance: list[dict] = field(default_factory=list)

    def parameter_arrays(self) -> list[np.ndarray]:
        return [p.detach().cpu().numpy() for p in self.module.state_dict().values()]

    def param_hash(self) -> str:
        digest = hashlib.sha256()
        for key, value in self.module.state_dict().items():
            digest.update(key.encode())
            digest.update(np.ascontiguousarray(value.detach().cpu().numpy()).tobytes())
        return digest.hexdigest()

    def clone(self, trainable: bool | None = None) -> "NetworkHandle":
        trainable = self.trainable if trainable is None else trainable
        module = copy.deepcopy(self.module)
        for p in module.parameters():
            p.requires_grad_(trainable)
        return NetworkHandle(
            kind=self.kind,
            module=module,
            arch=dict(self.arch),
            trainable=trainable,
            provenance=[dict(entry) for entry in self.provenance],
        )

    def freeze(self) -> "NetworkHandle":
        """Mark this handle non-trainable in place (gradients still flow
        through it to its inputs)."""
        self.trainable = False
        for p in self.module.parameters():
            p.requires_grad_(False)
        return self


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    def __init__(self, base_width: int = 32, res_blocks: int = 4):
        super().__init__()
        w = base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.ReLU(inplace=True),
        ]
        layers += [_ResBlock(4 * w) for _ in range(res_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * w, 2 * w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * w, w, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(w, 3, 7),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class PatchDiscriminator(nn.Module):
    def __init__(self, base_width: int = 32, n_down: int = 3):
        super().__init__()
        w = base_width
        layers: list[nn.Module] = [nn.Conv2d(3, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        width = w
        for _ in range(n_down - 1):
            layers += [
                nn.Conv2d(width, min(2 * width, 8 * w), 4, stride=2, padding=1),
                nn.InstanceNorm2d(min(2 * width, 8 * w)),
                nn.LeakyReLU(0.2, True),
            ]
            width = min(2 * width, 8 * w)
        layers += [
            nn.Conv2d(width, width, 4, stride=1, padding=1),
            nn.InstanceNorm2d(width),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(width, 1, 4, stride=1, padding=1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class TinyDetector(nn.Module):
    """Norm-free conv backbone with detection heads at strides 16 and 8."""

    def __init__(self, base_width: int = 16, num_anchors: int = 3, num_classes: int = 1):
        super().__init__()
        w = base_width
        out_ch = num_anchors * (5 + num_classes)
        act = lambda: nn.LeakyReLU(0.1, True)  # noqa: E731
        self.stem = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), act(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), act(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), act(),
        )
        self.down_fine = nn.Sequential(
            nn.Conv2d(4 * w, 8 * w, 3, stride=2, padding=1), act(),
        )
        self.down_coarse = nn.Sequential(
            nn.Conv2d(8 * w, 8 * w, 3, stride=2, padding=1), act(),
        )
        self.head_coarse = nn.Sequential(
            nn.Conv2d(8 * w, 8 * w, 3, padding=1), act(), nn.Conv2d(8 * w, out_ch, 1),
        )
        self.head_fine = nn.Sequential(
            nn.Conv2d(8 * w, 8 * w, 3, padding=1), act(), nn.Conv2d(8 * w, out_ch, 1),
        )

    def forward(self, x):
        fine_feat = self.down_fine(self.stem(x))
        coarse_feat = self.down_coarse(fine_feat)
        return self.head_coarse(coarse_feat), self.head_fine(fine_feat)


def _init_gan_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _init_detector_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=0.1, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)


def _with_defaults(arch: dict | None, defaults: dict) -> dict:
    merged = dict(defaults)
    merged.update(arch or {})
    return merged


def build_generator(arch: dict | None = None, seed: int = 0) -> NetworkHandle:
    arch = _with_defaults(arch, GENERATOR_DEFAULTS)
    if arch["image_size"] % 4 != 0:
        raise ValidationError("image_size", "generator needs a multiple of 4")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = ResnetGenerator(arch["base_width"], arch["res_blocks"])
        _init_gan_weights(module)
    return NetworkHandle("generator", module, arch)


def build_discriminator(arch: dict | None = None, seed: int = 0) -> NetworkHandle:
    arch = _with_defaults(arch, DISCRIMINATOR_DEFAULTS)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = PatchDiscriminator(arch["base_width"], arch["n_down"])
        _init_gan_weights(module)
    return NetworkHandle("discriminator", module, arch)


def build_detector(arch: dict | None = None, seed: int = 0) -> NetworkHandle:
    arch = _with_defaults(arch, DETECTOR_DEFAULTS)
    if arch["image_size"] % 16 != 0:
        raise ValidationError("image_size", "detector needs a multiple of 16")
    arch.setdefault("anchors", [[list(a) for a in scale] for scale in DEFAULT_ANCHORS])
    num_anchors = len(arch["anchors"][0])
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module = TinyDetector(arch["base_width"], num_anchors, arch["num_classes"])
        _init_detector_weights(module)
    return NetworkHandle("detector", module, arch)


BUILDERS = {
    "generator": build_generator,
    "discriminator": build_discriminator,
    "detector": build_detector,
}


def anchors_from_boxes(boxes: list[BoundingBox], seed: int = 0) -> list[list[list[float]]]:
    """k-means (k=6) over box sizes, split 3 coarse / 3 fine by area.
    Falls back to DEFAULT_ANCHORS when fewer than 6 boxes exist."""
    sizes = np.asarray([[b.w, b.h] for b in boxes], dtype=np.float64)
    if len(sizes) < 6:
        return [[list(a) for a in scale] for scale in DEFAULT_ANCHORS]
    centroids, _ = kmeans2(sizes, 6, minit="++", seed=seed)
    centroids = centroids[~np.isnan(centroids).any(axis=1)]
    if len(centroids) < 6:
        return [[list(a) for a in scale] for scale in DEFAULT_ANCHORS]
    order = np.argsort(centroids.prod(axis=1))
    fine = [[float(v) for v in np.clip(centroids[i], 1e-3, 1.0)] for i in order[:3]]
    coarse = [[float(v) for v in np.clip(centroids[i], 1e-3, 1.0)] for i in order[3:]]
    return [coarse, fine]


# --- tensor/array plumbing -------------------------------------------------

def images_to_tensor(pixels: np.ndarray | list[np.ndarray]) -> torch.Tensor:
    """(H,W,3) or list/stack of them -> (B,3,H,W) float32 tensor."""
    arr = np.stack(pixels) if isinstance(pixels, list) else np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError("image", f"expected (H,W,3) or (B,H,W,3), got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    """(B,3,H,W) tensor -> (B,H,W,3) float32 array."""
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def _check_input_size(handle: NetworkHandle, tensor: torch.Tensor) -> None:
    size = handle.arch["image_size"]
    if tensor.shape[-2:] != (size, size):
        raise ValidationError(
            "image", f"{handle.kind} expects {size}x{size}, got {tuple(tensor.shape[-2:])}"
        )


def generator_forward(g: NetworkHandle, image: np.ndarray) -> np.ndarray:
    """Map image(s) in [-1,1] through a generator; output shape matches input."""
    if g.kind != "generator":
        raise ValidationError("kind", f"expected a generator handle, got {g.kind}")
    single = np.asarray(image).ndim == 3
    t = images_to_tensor(image)
    _check_input_size(g, t)
    with torch.no_grad():
        out = g.module(t)
    images = tensor_to_images(out)
    return images[0] if single else images


def discriminator_forward(d: NetworkHandle, image: np.ndarray) -> np.ndarray:
    """Patch score map(s): (h,w) for a single image, (B,h,w) for a batch."""
    if d.kind != "discriminator":
        raise ValidationError("kind", f"expected a discriminator handle, got {d.kind}")
    single = np.asarray(image).ndim == 3
    t = images_to_tensor(image)
    _check_input_size(d, t)
    with torch.no_grad():
        out = d.module(t)
    maps = out.detach().cpu().numpy()[:, 0]
    return maps[0] if single else maps


@dataclass
class DetectionGrid:
    """Raw two-scale detector output for one image (or a batch).

    Each scale is an array of shape (S,S,A,5+C) (batched: (B,S,S,A,5+C))
    with channels [tx, ty, tw, th, objectness, class logits...]; scale 0 is
    the coarse grid, scale 1 the fine grid at twice the resolution.
    """

    scales: list  # np.ndarray or torch.Tensor per scale
    anchors: list[list[tuple[float, float]]]
    num_classes: int = 1


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float


def detector_raw_grids(module: nn.Module, t: torch.Tensor, num_anchors: int, num_classes: int) -> list[torch.Tensor]:
    """Run the detector and reshape raw maps to (B,S,S,A,5+C), keeping the
    autograd graph."""
    outs = module(t)
    grids = []
    for raw in outs:
        b, _, s, _ = raw.shape
        grid = raw.view(b, num_anchors, 5 + num_classes, s, s).permute(0, 3, 4, 1, 2)
        grids.append(grid)
    return grids


def detector_forward(handle: NetworkHandle, image: np.ndarray) -> DetectionGrid:
    if handle.kind != "detector":
        raise ValidationError("kind", f"expected a detector handle, got {handle.kind}")
    single = np.asarray(image).ndim == 3
    t = images_to_tensor(image)
    _check_input_size(handle, t)
    anchors = handle.arch["anchors"]
    with torch.no_grad():
        grids = detector_raw_grids(handle.module, t, len(anchors[0]), handle.arch["num_classes"])
    arrays = [g.cpu().numpy() for g in grids]
    if single:
        arrays = [a[0] for a in arrays]
    return DetectionGrid(
        scales=arrays,
        anchors=[[tuple(a) for a in scale] for scale in anchors],
        num_classes=handle.arch["num_classes"],
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def decode_detections(grid: DetectionGrid, conf_threshold: float) -> list[Detection]:
    """Decode one image's grids into detections with confidence >= threshold.

    center = (cell + sigmoid(txy)) / S, size = anchor * exp(twh),
    confidence = sigmoid(objectness) * max class probability. Boxes are
    clipped to the unit square.
    """
    detections: list[Detection] = []
    for scale_idx, raw in enumerate(grid.scales):
        arr = raw.detach().cpu().numpy() if isinstance(raw, torch.Tensor) else np.asarray(raw)
        if arr.ndim != 4:
            raise ValidationError("grid", "decode_detections expects a single-image grid")
        s = arr.shape[0]
        anchors = grid.anchors[scale_idx]
        txy = _sigmoid(arr[..., 0:2])
        twh = arr[..., 2:4]
        obj = _sigmoid(arr[..., 4])
        cls = _sigmoid(arr[..., 5:])
        conf = obj * cls.max(axis=-1)
        class_id = cls.argmax(axis=-1)
        for j in range(s):
            for i in range(s):
                for a, (aw, ah) in enumerate(anchors):
                    c = float(conf[j, i, a])
                    if c < conf_threshold:
                        continue
                    cx = (i + float(txy[j, i, a, 0])) / s
                    cy = (j + float(txy[j, i, a, 1])) / s
                    w = aw * float(np.exp(np.clip(twh[j, i, a, 0], -10, 10)))
                    h = ah * float(np.exp(np.clip(twh[j, i, a, 1], -10, 10)))
                    x0 = max(cx - w / 2, 0.0)
                    y0 = max(cy - h / 2, 0.0)
                    x1 = min(cx + w / 2, 1.0)
                    y1 = min(cy + h / 2, 1.0)
                    if x1 <= x0 or y1 <= y0:
                        continue
                    box = BoundingBox(
                        class_id=int(class_id[j, i, a]),
                        cx=(x0 + x1) / 2,
                        cy=(y0 + y1) / 2,
                        w=x1 - x0,
                        h=y1 - y0,
                    )
                    detections.append(Detection(box=box, confidence=c))
    return detections


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression, stable tie-break by original index."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[Detection] = []
    for i in order:
        if all(box_iou(dets[i].box, k.box) < iou_threshold for k in kept):
            kept.append(dets[i])
    return kept


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(handle: NetworkHandle, path: Path) -> str:
    """Write a self-describing checkpoint; returns the parameter hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng_state = base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": handle.kind,
        "arch": handle.arch,
        "trainable": handle.trainable,
        "rng_state": rng_state,
        "provenance": handle.provenance,
        "param_hash": handle.param_hash(),
    }
    arrays = {
        key: value.detach().cpu().numpy()
        for key, value in handle.module.state_dict().items()
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return meta["param_hash"]


def load_checkpoint(path: Path, arch: dict | None = None) -> NetworkHandle:
    """Rebuild a handle from disk; validates arch equality when one is
    expected."""
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValidationError(
                "format_version",
                f"unsupported checkpoint version {meta.get('format_version')}",
            )
        if arch is not None and arch != meta["arch"]:
            raise ValidationError(
                "arch_config", f"checkpoint arch {meta['arch']} != expected {arch}"
            )
        handle = BUILDERS[meta["kind"]](meta["arch"], seed=0)
        state = {
            key: torch.from_numpy(np.asarray(archive[key]))
            for key in archive.files
            if key != "__meta__"
        }
    handle.module.load_state_dict(state)
    handle.provenance = meta["provenance"]
    if not meta["trainable"]:
        handle.freeze()
    return handle
