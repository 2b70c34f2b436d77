"""Four-stage training pipeline and the incremental-label experiment runner.

Stages, in order:

1. pretrain_detector: train a detector on the labeled source domain.
2. embed_domain_knowledge: fine-tune it on the k = a + b labeled target
   images (train on a, select on b).
3. train_semgan: train the translation GAN, optionally guided by the
   frozen stage-2 detector scoring translated images against source labels.
4. translate_dataset + finetune_on_generated: translate the source set and
   fine-tune the detector on the translated, label-preserving images.

Every stage is deterministic given its config seed. Checkpoints carry a
provenance chain (stage, parent hash, config hash) that later stages check
before running.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import LabeledImage, load_domain, save_image, split_schedule
from .errors import (
    ContractViolationError,
    DataIntegrityError,
    StageOrderError,
    ValidationError,
)
from .losses import (
    LossWeights,
    adversarial_loss,
    cycle_loss,
    detection_task_loss,
    identity_loss,
    total_objective,
)
from .nets import (
    DetectionGrid,
    NetworkHandle,
    anchors_from_boxes,
    build_detector,
    build_discriminator,
    build_generator,
    detector_raw_grids,
    images_to_tensor,
    save_checkpoint,
    tensor_to_images,
)

METHODS = ("pretrained", "cyclegan", "fine_tuned", "semgan_fine_tuned")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by all stages."""

    gan_steps: int = 3000
    detector_steps: int = 1500
    finetune_steps: int = 500
    lr_gan: float = 2e-4
    lr_detector: float = 1e-3
    batch_size: int = 8  # detector stages
    gan_batch_size: int = 1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    pool_size: int = 50
    patience: int = 0  # validation checks without improvement; 0 disables
    checkpoint_every: int = 500
    val_fraction: float = 0.2
    eval_every: int = 2
    finetune_include_real: bool = False

    def __post_init__(self):
        for name in ("gan_steps", "detector_steps",
                     "batch_size", "gan_batch_size", "checkpoint_every", "eval_every"):
            if getattr(self, name) < 1:
                raise ValidationError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.finetune_steps < 0:
            raise ValidationError("finetune_steps", f"must be >= 0, got {self.finetune_steps}")
        for name in ("lr_gan", "lr_detector"):
            if getattr(self, name) <= 0:
                raise ValidationError(name, f"must be > 0, got {getattr(self, name)}")
        if self.pool_size < 0:
            raise ValidationError("pool_size", f"must be >= 0, got {self.pool_size}")
        if self.patience < 0:
            raise ValidationError("patience", f"must be >= 0, got {self.patience}")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValidationError("val_fraction", f"must be in (0,1), got {self.val_fraction}")

    def with_(self, **updates) -> "TrainConfig":
        return dataclasses.replace(self, **updates)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    ).hexdigest()[:12]


def _subseed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


class ImagePool:
    """History buffer of generated images for discriminator updates."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ValidationError("capacity", f"must be >= 0, got {capacity}")
        self.capacity = capacity
        self.buffer: list[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)


def pool_query(pool: ImagePool, image: torch.Tensor) -> torch.Tensor:
    """Store-and-return while filling; afterwards, with probability 0.5 swap
    the new image for a uniformly chosen buffered one and return the old."""
    if pool.capacity == 0:
        return image
    if len(pool.buffer) < pool.capacity:
        pool.buffer.append(image.detach().clone())
        return image
    if pool.rng.random() < 0.5:
        slot = int(pool.rng.integers(len(pool.buffer)))
        old = pool.buffer[slot]
        pool.buffer[slot] = image.detach().clone()
        return old
    return image


# --- detector stages ---------------------------------------------------------


def _flip_image(image: LabeledImage) -> LabeledImage:
    return LabeledImage(
        pixels=np.ascontiguousarray(image.pixels[:, ::-1]),
        boxes=None if image.boxes is None else [b.flipped_horizontal() for b in image.boxes],
        domain=image.domain,
        name=image.name,
    )


def _detector_grid(detector: NetworkHandle, tensor: torch.Tensor) -> DetectionGrid:
    anchors = detector.arch["anchors"]
    grids = detector_raw_grids(detector.module, tensor, len(anchors[0]),
                               detector.arch["num_classes"])
    return DetectionGrid(scales=grids, anchors=anchors, num_classes=detector.arch["num_classes"])


def _mean_detection_loss(detector: NetworkHandle, images: list[LabeledImage]) -> float:
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(images), 16):
            chunk = images[start:start + 16]
            tensor = images_to_tensor([im.pixels for im in chunk])
            grid = _detector_grid(detector, tensor)
            total += float(detection_task_loss(grid, [im.boxes for im in chunk])) * len(chunk)
    return total / len(images)


def _train_detector(
    detector: NetworkHandle,
    train_images: list[LabeledImage],
    valid_images: list[LabeledImage],
    cfg: TrainConfig,
    steps: int,
    out_dir: Path | None = None,
) -> NetworkHandle:
    """Shared optimizer loop: Adam, flip augmentation, best-on-validation
    selection including the initial parameters. Mutates and returns
    `detector`."""
    rng = np.random.default_rng(_subseed(cfg.seed, "detector-data"))
    torch.manual_seed(_subseed(cfg.seed, "detector-torch"))
    module = detector.module
    optimizer = torch.optim.Adam(module.parameters(), lr=cfg.lr_detector)

    curve: list[dict] = []
    best_state = copy.deepcopy(module.state_dict())
    best_val = _mean_detection_loss(detector, valid_images) if valid_images else float("inf")
    curve.append({"step": 0, "train_loss": None, "val_loss": best_val if valid_images else None})
    stale = 0

    for step in range(1, steps + 1):
        idx = rng.integers(0, len(train_images), size=cfg.batch_size)
        flips = rng.random(cfg.batch_size) < 0.5
        batch = [
            _flip_image(train_images[i]) if flip else train_images[i]
            for i, flip in zip(idx, flips)
        ]
        tensor = images_to_tensor([im.pixels for im in batch])
        loss = detection_task_loss(_detector_grid(detector, tensor),
                                   [im.boxes for im in batch])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if step % cfg.eval_every == 0 or step == steps:
            entry = {"step": step, "train_loss": float(loss.detach()), "val_loss": None}
            if valid_images:
                val = _mean_detection_loss(detector, valid_images)
                entry["val_loss"] = val
                if val < best_val:
                    best_val = val
                    best_state = copy.deepcopy(module.state_dict())
                    stale = 0
                else:
                    stale += 1
            curve.append(entry)
            if cfg.patience and stale >= cfg.patience:
                break

    if valid_images:
        module.load_state_dict(best_state)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "curve.jsonl", "w") as fh:
            for entry in curve:
                fh.write(json.dumps(entry) + "\n")
    return detector


def _require_labeled(images: list[LabeledImage], fieldname: str) -> None:
    for image in images:
        if not image.labeled:
            raise ValidationError(fieldname, f"image {image.name!r} has no labels")


def pretrain_detector(
    source: list[LabeledImage],
    cfg: TrainConfig,
    val_count: int | None = None,
    det_arch: dict | None = None,
    out_dir: Path | None = None,
) -> NetworkHandle:
    """Stage 1: train a detector on the labeled source domain.

    The set is split internally into train/validation (default 20%
    validation, overridable by an exact val_count); the checkpoint with the
    best validation loss is returned.
    """
    if not source:
        raise ValidationError("source", "need at least one labeled image")
    _require_labeled(source, "source")
    if val_count is None:
        val_count = int(len(source) * cfg.val_fraction)
    if val_count >= len(source) or val_count < 0:
        raise ValidationError("val_count", f"must be in [0, {len(source) - 1}], got {val_count}")

    order = np.random.default_rng(_subseed(cfg.seed, "pretrain-split")).permutation(len(source))
    valid = [source[i] for i in order[:val_count]]
    train = [source[i] for i in order[val_count:]]

    arch = dict(det_arch or {})
    arch.setdefault("image_size", source[0].pixels.shape[0])
    if "anchors" not in arch:
        arch["anchors"] = anchors_from_boxes(
            [box for im in source for box in im.boxes], seed=cfg.seed
        )
    detector = build_detector(arch, seed=_subseed(cfg.seed, "pretrain-init"))
    detector = _train_detector(detector, train, valid, cfg, cfg.detector_steps, out_dir)
    detector.freeze()
    detector.provenance.append({
        "stage": "pretrain",
        "parent": None,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "train_count": len(train),
        "valid_count": len(valid),
    })
    if out_dir is not None:
        save_checkpoint(detector, Path(out_dir) / "detector.npz")
    return detector


def _provenance_stages(handle: NetworkHandle) -> list[str]:
    return [entry.get("stage") for entry in handle.provenance]


def embed_domain_knowledge(
    t_a: NetworkHandle,
    target_train: list[LabeledImage],
    target_valid: list[LabeledImage],
    cfg: TrainConfig,
    out_dir: Path | None = None,
) -> NetworkHandle:
    """Stage 2: fine-tune the source detector on a labeled target images,
    selecting on b validation images. Zero finetune steps returns the input
    parameters bit-exactly."""
    if "pretrain" not in _provenance_stages(t_a):
        raise StageOrderError("pretrain", "detector was never pretrained on the source domain")
    if not target_train:
        raise ValidationError("target_train", "need at least one labeled image")
    if not target_valid:
        raise ValidationError("target_valid", "need at least one labeled image")
    _require_labeled(target_train, "target_train")
    _require_labeled(target_valid, "target_valid")

    parent_hash = t_a.param_hash()
    detector = t_a.clone(trainable=True)
    if cfg.finetune_steps > 0:
        detector = _train_detector(detector, target_train, target_valid, cfg,
                                   cfg.finetune_steps, out_dir)
    detector.freeze()
    detector.provenance.append({
        "stage": "embed",
        "parent": parent_hash,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "a": len(target_train),
        "b": len(target_valid),
    })
    if out_dir is not None:
        save_checkpoint(detector, Path(out_dir) / "detector.npz")
    return detector


# --- GAN stage ---------------------------------------------------------------


def _set_requires_grad(handles: list[NetworkHandle], flag: bool) -> None:
    for handle in handles:
        for p in handle.module.parameters():
            p.requires_grad_(flag)


def _sample_grid(g_ab: NetworkHandle, g_ba: NetworkHandle,
                 samples: torch.Tensor, path: Path) -> None:
    """Rows of source | translated | cycle-reconstruction."""
    with torch.no_grad():
        fake = g_ab.module(samples)
        cycled = g_ba.module(fake)
    rows = []
    for i in range(samples.shape[0]):
        row = np.concatenate([
            tensor_to_images(samples[i:i + 1])[0],
            tensor_to_images(fake[i:i + 1])[0],
            tensor_to_images(cycled[i:i + 1])[0],
        ], axis=1)
        rows.append(row)
    save_image(np.concatenate(rows, axis=0), path)


def train_semgan(
    source: list[LabeledImage],
    target: list[LabeledImage],
    t_b: NetworkHandle,
    cfg: TrainConfig,
    out_dir: Path | None = None,
    gen_arch: dict | None = None,
    disc_arch: dict | None = None,
) -> tuple[NetworkHandle, NetworkHandle, NetworkHandle, NetworkHandle]:
    """Stage 3: adversarial training of the source->target generator pair.

    Returns (g_ab, g_ba, d_a, d_b). When lambda_task > 0, the frozen
    detector t_b scores translated source images against the source labels
    and the resulting loss backpropagates into g_ab only. t_b must be
    frozen; its parameters are verified unchanged at the end of the run.
    """
    if not source or not target:
        raise ValidationError("source", "both domains need at least one image")
    if t_b.kind != "detector":
        raise ValidationError("t_b", f"expected a detector handle, got {t_b.kind}")
    if t_b.trainable:
        raise ContractViolationError(
            "t_b is trainable; freeze the detector before GAN training"
        )
    if cfg.weights.lambda_task > 0:
        _require_labeled(source, "source")

    size = source[0].pixels.shape[0]
    gen_arch = dict(gen_arch or {})
    gen_arch.setdefault("image_size", size)
    disc_arch = dict(disc_arch or {})
    disc_arch.setdefault("image_size", size)

    g_ab = build_generator(gen_arch, seed=_subseed(cfg.seed, "g_ab"))
    g_ba = build_generator(gen_arch, seed=_subseed(cfg.seed, "g_ba"))
    d_a = build_discriminator(disc_arch, seed=_subseed(cfg.seed, "d_a"))
    d_b = build_discriminator(disc_arch, seed=_subseed(cfg.seed, "d_b"))

    torch.manual_seed(_subseed(cfg.seed, "gan-torch"))
    data_rng = np.random.default_rng(_subseed(cfg.seed, "gan-data"))
    pool_a = ImagePool(cfg.pool_size, _subseed(cfg.seed, "pool-a"))
    pool_b = ImagePool(cfg.pool_size, _subseed(cfg.seed, "pool-b"))

    params_g = list(g_ab.module.parameters()) + list(g_ba.module.parameters())
    params_d = list(d_a.module.parameters()) + list(d_b.module.parameters())
    opt_g = torch.optim.Adam(params_g, lr=cfg.lr_gan, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(params_d, lr=cfg.lr_gan, betas=(0.5, 0.999))
    half = cfg.gan_steps // 2

    def lr_factor(step: int) -> float:
        if cfg.gan_steps <= 1 or step < half:
            return 1.0
        return (cfg.gan_steps - step) / max(cfg.gan_steps - half, 1)

    sched_g = torch.optim.lr_scheduler.LambdaLR(opt_g, lr_factor)
    sched_d = torch.optim.lr_scheduler.LambdaLR(opt_d, lr_factor)

    task_hash_before = t_b.param_hash()
    form = cfg.weights.adv_form
    use_task = cfg.weights.lambda_task > 0
    weights = cfg.weights

    log_fh = None
    sample_tensor = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "samples").mkdir(parents=True, exist_ok=True)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")
        n_show = min(3, len(source))
        sample_tensor = images_to_tensor([source[i].pixels for i in range(n_show)])

    try:
        for step in range(1, cfg.gan_steps + 1):
            a_idx = data_rng.integers(0, len(source), size=cfg.gan_batch_size)
            b_idx = data_rng.integers(0, len(target), size=cfg.gan_batch_size)
            a_images = [source[i] for i in a_idx]
            real_a = images_to_tensor([im.pixels for im in a_images])
            real_b = images_to_tensor([target[i].pixels for i in b_idx])

            # generator update (discriminator weights held fixed)
            _set_requires_grad([d_a, d_b], False)
            fake_b = g_ab.module(real_a)
            rec_a = g_ba.module(fake_b)
            fake_a = g_ba.module(real_b)
            rec_b = g_ab.module(fake_a)
            idt_a = g_ba.module(real_a)
            idt_b = g_ab.module(real_b)

            adv_ab = adversarial_loss(d_b.module(fake_b), True, form)
            adv_ba = adversarial_loss(d_a.module(fake_a), True, form)
            cyc = cycle_loss(real_a, rec_a, real_b, rec_b)
            idt = identity_loss(real_a, idt_a, real_b, idt_b)
            task = None
            if use_task:
                grid = _detector_grid(t_b, fake_b)
                task = detection_task_loss(grid, [im.boxes for im in a_images])
            breakdown = total_objective(adv_ab, adv_ba, cyc, idt, task, weights)

            opt_g.zero_grad()
            breakdown["total"].backward()
            opt_g.step()

            # discriminator update on pooled fakes
            _set_requires_grad([d_a, d_b], True)
            pooled_b = pool_query(pool_b, fake_b.detach())
            pooled_a = pool_query(pool_a, fake_a.detach())
            loss_d_b = (adversarial_loss(d_b.module(real_b), True, form)
                        + adversarial_loss(d_b.module(pooled_b), False, form))
            loss_d_a = (adversarial_loss(d_a.module(real_a), True, form)
                        + adversarial_loss(d_a.module(pooled_a), False, form))
            opt_d.zero_grad()
            (loss_d_a + loss_d_b).backward()
            opt_d.step()
            sched_g.step()
            sched_d.step()

            if log_fh is not None:
                parts = {
                    "adv_ab": float(adv_ab.detach()),
                    "adv_ba": float(adv_ba.detach()),
                    "cycle": float(cyc.detach()),
                    "identity": float(idt.detach()),
                    "task": float(task.detach()) if task is not None else 0.0,
                }
                # recompose in float64 so the logged total matches the
                # logged components exactly
                parts["total"] = (parts["adv_ab"] + parts["adv_ba"]
                                  + weights.lambda_cycle * parts["cycle"]
                                  + weights.lambda_identity * parts["identity"]
                                  + weights.lambda_task * parts["task"])
                parts.update({
                    "step": step,
                    "d_a": float(loss_d_a.detach()),
                    "d_b": float(loss_d_b.detach()),
                    "lr": sched_g.get_last_lr()[0],
                })
                log_fh.write(json.dumps(parts) + "\n")

            if out_dir is not None and (step % cfg.checkpoint_every == 0 or step == cfg.gan_steps):
                _sample_grid(g_ab, g_ba, sample_tensor, out_dir / "samples" / f"step_{step:06d}.png")
                for name, handle in (("g_ab", g_ab), ("g_ba", g_ba), ("d_a", d_a), ("d_b", d_b)):
                    save_checkpoint(handle, out_dir / "checkpoints" / f"{name}.npz")
    finally:
        if log_fh is not None:
            log_fh.close()

    if t_b.param_hash() != task_hash_before:
        raise ContractViolationError("frozen detector parameters changed during GAN training")

    entry = {
        "stage": "semgan",
        "parent": task_hash_before,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "lambda_task": weights.lambda_task,
    }
    for handle in (g_ab, g_ba, d_a, d_b):
        handle.provenance.append(dict(entry))
    if out_dir is not None:
        for name, handle in (("g_ab", g_ab), ("g_ba", g_ba), ("d_a", d_a), ("d_b", d_b)):
            save_checkpoint(handle, Path(out_dir) / "checkpoints" / f"{name}.npz")
    return g_ab, g_ba, d_a, d_b


# --- translation and final fine-tune ------------------------------------------


def translate_images(g_a: NetworkHandle, source: list[LabeledImage]) -> list[LabeledImage]:
    """Map every source image through the generator, keeping labels as-is."""
    out: list[LabeledImage] = []
    for start in range(0, len(source), 16):
        chunk = source[start:start + 16]
        tensor = images_to_tensor([im.pixels for im in chunk])
        with torch.no_grad():
            translated = tensor_to_images(g_a.module(tensor))
        for image, pixels in zip(chunk, translated):
            out.append(LabeledImage(
                pixels=np.ascontiguousarray(pixels),
                boxes=image.boxes,
                domain=f"{image.domain}_translated",
                name=image.name,
            ))
    return out


def translate_dataset(g_a: NetworkHandle, source_dir: Path, out_dir: Path) -> dict:
    """File-based translation: images are generator outputs, label files are
    byte-for-byte copies of the source label files. Returns the manifest."""
    source_dir, out_dir = Path(source_dir), Path(out_dir)
    images = load_domain(source_dir, labeled=True)
    translated = translate_images(g_a, images)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for image in translated:
        image_rel = f"images/{image.name}.png"
        label_rel = f"labels/{image.name}.txt"
        save_image(image.pixels, out_dir / image_rel)
        shutil.copyfile(source_dir / "labels" / f"{image.name}.txt", out_dir / label_rel)
        entries.append({
            "image": image_rel,
            "labels": label_rel,
            "source_image": str(source_dir / "images" / f"{image.name}.png"),
        })
    manifest = {
        "style": "translated",
        "generator": g_a.param_hash(),
        "source": str(source_dir),
        "entries": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def finetune_on_generated(
    t_b: NetworkHandle,
    generated: list[LabeledImage],
    target_valid: list[LabeledImage],
    cfg: TrainConfig,
    real_train: list[LabeledImage] | None = None,
    out_dir: Path | None = None,
) -> NetworkHandle:
    """Stage 4: fine-tune the detector on translated labeled images.

    Model selection uses the real validation images when given; with an
    empty validation list, 20% of the generated set is held out instead.
    real_train, when provided together with cfg.finetune_include_real,
    is mixed into the training set.
    """
    if "pretrain" not in _provenance_stages(t_b):
        raise StageOrderError("pretrain", "detector was never pretrained on the source domain")
    if not generated:
        raise ValidationError("generated", "need at least one labeled image")
    _require_labeled(generated, "generated")

    train = list(generated)
    valid = list(target_valid)
    if not valid:
        holdout = max(1, int(round(len(train) * 0.2)))
        if holdout >= len(train):
            holdout = len(train) - 1
        order = np.random.default_rng(_subseed(cfg.seed, "finetune-holdout")).permutation(len(train))
        valid = [train[i] for i in order[:holdout]]
        train = [train[i] for i in order[holdout:]]
        if not train:
            raise ValidationError("generated", "need at least two images when no validation set is given")
    if cfg.finetune_include_real and real_train:
        _require_labeled(real_train, "real_train")
        train = train + list(real_train)

    parent_hash = t_b.param_hash()
    detector = t_b.clone(trainable=True)
    if cfg.finetune_steps > 0:
        detector = _train_detector(detector, train, valid, cfg, cfg.finetune_steps, out_dir)
    detector.freeze()
    detector.provenance.append({
        "stage": "finetune_generated",
        "parent": parent_hash,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "train_count": len(train),
        "valid_count": len(valid),
    })
    if out_dir is not None:
        save_checkpoint(detector, Path(out_dir) / "detector.npz")
    return detector


# --- experiment runner ---------------------------------------------------------


@dataclass(frozen=True)
class ExperimentRow:
    k: int
    a: int
    b: int
    method: str
    seed: int
    ap30: float
    ap50: float


@dataclass
class ExperimentResult:
    rows: list[ExperimentRow]

    def to_csv(self) -> str:
        lines = ["k,a,b,method,seed,ap30,ap50"]
        lines += [
            f"{r.k},{r.a},{r.b},{r.method},{r.seed},{r.ap30:.1f},{r.ap50:.1f}"
            for r in self.rows
        ]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps([dataclasses.asdict(r) for r in self.rows], indent=2) + "\n"

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.csv").write_text(self.to_csv())
        (out_dir / "results.json").write_text(self.to_json())


def _pixel_hash(image: LabeledImage) -> str:
    return hashlib.sha256(np.ascontiguousarray(image.pixels).tobytes()).hexdigest()


def audit_test_isolation(
    test: list[LabeledImage], *train_sets: list[LabeledImage]
) -> None:
    """Refuse to run when any training image is pixel-identical to a test
    image."""
    test_hashes = {_pixel_hash(im) for im in test}
    clashes = [
        im.name
        for images in train_sets
        for im in images
        if _pixel_hash(im) in test_hashes
    ]
    if clashes:
        raise DataIntegrityError(
            f"{len(clashes)} training image(s) also appear in the test set: "
            + ", ".join(sorted(clashes)[:5])
        )


def _evaluate(detector: NetworkHandle, test: list[LabeledImage],
              conf_threshold: float, nms_threshold: float):
    from .evaluation import evaluate_model

    return evaluate_model(detector, test, conf_threshold, nms_threshold)


def _run_seed(
    seed: int,
    source: list[LabeledImage],
    target_pool: list[LabeledImage],
    test: list[LabeledImage],
    cfg: TrainConfig,
    k_list: list[int],
    methods: list[str],
    out_dir: Path | None,
    conf_threshold: float,
    nms_threshold: float,
    gen_arch: dict | None,
    disc_arch: dict | None,
    det_arch: dict | None,
) -> list[ExperimentRow]:
    cfg = cfg.with_(seed=seed)
    seed_dir = Path(out_dir) / f"seed_{seed}" if out_dir is not None else None

    def stage_dir(name: str) -> Path | None:
        return None if seed_dir is None else seed_dir / name

    unlabeled_target = [
        LabeledImage(pixels=im.pixels, boxes=None, domain=im.domain, name=im.name)
        for im in target_pool
    ]
    t_a = pretrain_detector(source, cfg, det_arch=det_arch, out_dir=stage_dir("pretrain"))

    label_order = np.random.default_rng(_subseed(seed, "k-subset")).permutation(len(target_pool))
    ap_cache: dict[str, tuple[float, float]] = {}

    def evaluate(tag: str, detector: NetworkHandle) -> tuple[float, float]:
        if tag not in ap_cache:
            report = _evaluate(detector, test, conf_threshold, nms_threshold)
            if seed_dir is not None:
                report.save(seed_dir / f"eval_{tag}.json")
            ap_cache[tag] = (report.ap30, report.ap50)
        return ap_cache[tag]

    def cyclegan_leg() -> tuple[float, float]:
        if "cyclegan" in ap_cache:
            return ap_cache["cyclegan"]
        plain_cfg = cfg.with_(weights=dataclasses.replace(cfg.weights, lambda_task=0.0))
        g_ab, _, _, _ = train_semgan(
            source, unlabeled_target, t_a, plain_cfg,
            out_dir=stage_dir("gan_cyclegan"), gen_arch=gen_arch, disc_arch=disc_arch)
        generated = translate_images(g_ab, source)
        final = finetune_on_generated(t_a, generated, [], plain_cfg,
                                      out_dir=stage_dir("finetune_cyclegan"))
        return evaluate("cyclegan", final)

    embed_cache: dict[int, tuple[NetworkHandle, list[LabeledImage], list[LabeledImage]]] = {}

    def embedded(k: int):
        if k not in embed_cache:
            schedule = split_schedule(k)
            subset = [target_pool[i] for i in label_order[:k]]
            a_images = subset[:schedule.a]
            b_images = subset[schedule.a:]
            t_b = embed_domain_knowledge(t_a, a_images, b_images, cfg,
                                         out_dir=stage_dir(f"embed_k{k}"))
            embed_cache[k] = (t_b, a_images, b_images)
        return embed_cache[k]

    rows: list[ExperimentRow] = []
    for k in (k_list or [None]):
        for method in methods:
            if method == "pretrained":
                ap30, ap50 = evaluate("pretrained", t_a)
                rows.append(ExperimentRow(0, 0, 0, method, seed, ap30, ap50))
                continue
            if method == "cyclegan":
                ap30, ap50 = cyclegan_leg()
                rows.append(ExperimentRow(0, 0, 0, method, seed, ap30, ap50))
                continue
            if k is None:
                raise ValidationError("k_list", f"method {method!r} needs a non-empty k list")
            t_b, a_images, b_images = embedded(k)
            schedule = split_schedule(k)
            if method == "fine_tuned":
                ap30, ap50 = evaluate(f"fine_tuned_k{k}", t_b)
                rows.append(ExperimentRow(k, schedule.a, schedule.b, method, seed, ap30, ap50))
                continue
            # semgan_fine_tuned
            tag = f"semgan_fine_tuned_k{k}"
            if tag not in ap_cache:
                g_ab, _, _, _ = train_semgan(
                    source, unlabeled_target, t_b, cfg,
                    out_dir=stage_dir(f"gan_semgan_k{k}"),
                    gen_arch=gen_arch, disc_arch=disc_arch)
                generated = translate_images(g_ab, source)
                final = finetune_on_generated(
                    t_b, generated, b_images, cfg,
                    real_train=a_images if cfg.finetune_include_real else None,
                    out_dir=stage_dir(f"finetune_semgan_k{k}"))
                evaluate(tag, final)
            ap30, ap50 = ap_cache[tag]
            rows.append(ExperimentRow(k, schedule.a, schedule.b, method, seed, ap30, ap50))
    return rows


def run_incremental_experiment(
    source: list[LabeledImage],
    target_pool: list[LabeledImage],
    test: list[LabeledImage],
    cfg: TrainConfig,
    k_list: list[int],
    methods: list[str],
    seeds: list[int],
    out_dir: Path | None = None,
    jobs: int = 1,
    conf_threshold: float = 0.1,
    nms_threshold: float = 0.45,
    gen_arch: dict | None = None,
    disc_arch: dict | None = None,
    det_arch: dict | None = None,
) -> ExperimentResult:
    """Run the pretrained/cyclegan/fine_tuned/semgan_fine_tuned legs over
    every (seed, k) pair and evaluate each on the fixed test set.

    Baseline legs (pretrained, cyclegan) do not consume target labels and
    are reported with k = a = b = 0. The k labeled target images are nested:
    larger k reuses the smaller k's subset. Training data is audited against
    the test set by pixel hash before any training runs.
    """
    for method in methods:
        if method not in METHODS:
            raise ValidationError("methods", f"unknown method {method!r}; choose from {METHODS}")
    if not methods:
        raise ValidationError("methods", "need at least one method")
    if not seeds:
        raise ValidationError("seeds", "need at least one seed")
    if not test:
        raise ValidationError("test", "need a non-empty test set")
    for k in k_list:
        split_schedule(k)  # validates k >= 2
    audit_test_isolation(test, source, target_pool)

    args = [
        (seed, source, target_pool, test, cfg, k_list, methods, out_dir,
         conf_threshold, nms_threshold, gen_arch, disc_arch, det_arch)
        for seed in seeds
    ]
    if jobs > 1 and len(seeds) > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_run_seed_star, args))
    else:
        per_seed = [_run_seed(*a) for a in args]

    result = ExperimentResult([row for rows in per_seed for row in rows])
    if out_dir is not None:
        result.save(out_dir)
    return result


def _run_seed_star(args) -> list[ExperimentRow]:
    return _run_seed(*args)
