"""Synthetic scenes, the on-disk dataset format, and the SGD training loop."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

from gatedssd.detector import build_targets
from gatedssd.errors import DegenerateInputError, ModelFormatError, ShapeError, TrainingDivergedError
from gatedssd.losses import LossBreakdown, LossConfig
from gatedssd.tensor import DTYPE, compute_threads

log = logging.getLogger(__name__)

IMAGE_MAGIC = b"GDI1"
MANIFEST = "manifest.txt"


@dataclass
class TrainConfig:
    epochs: int = 60
    base_lr: float = 1e-3
    drop_epochs: list[int] | None = None
    drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    empty_fraction: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.drop_epochs is None:
            # deduplicated so very short runs still get a valid schedule
            self.drop_epochs = sorted({2 * self.epochs // 3, 9 * self.epochs // 10})
        self.drop_epochs = [int(e) for e in self.drop_epochs]
        if any(b <= a for a, b in zip(self.drop_epochs, self.drop_epochs[1:])):
            raise ValueError("drop_epochs must be strictly increasing")
        if self.drop_epochs and (self.drop_epochs[0] < 0 or self.drop_epochs[-1] >= self.epochs):
            raise ValueError("drop_epochs must lie within 0..epochs-1")
        if not 0 < self.drop_factor <= 1:
            raise ValueError("drop_factor must lie in (0, 1]")
        if not 0 <= self.empty_fraction <= 1:
            raise ValueError("empty_fraction must lie in [0, 1]")

    @classmethod
    def full_schedule(cls) -> "TrainConfig":
        """300 epochs, lr 1e-3 dropped tenfold at epochs 200 and 270."""
        return cls(epochs=300, drop_epochs=[200, 270])


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{config.epochs - 1}")
    drops = sum(1 for d in config.drop_epochs if d <= epoch)
    # decimal product, rounded once, so 1e-3 * 0.1**2 is exactly 1e-5
    return float(Decimal(repr(config.base_lr)) * Decimal(repr(config.drop_factor)) ** drops)


def sgd_step(params, grads, velocity, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
    """In-place momentum SGD with L2 decay folded into the velocity."""
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        v = velocity.get(k)
        if v is None:
            v = velocity[k] = np.zeros_like(p)
        v *= DTYPE(momentum)
        v += g
        if weight_decay:
            v += DTYPE(weight_decay) * p
        p -= DTYPE(lr) * v
    return params


@dataclass
class SceneSpec:
    image_size: int = 96
    object_count_range: tuple[int, int] = (1, 3)
    object_intensity_range: tuple[float, float] = (0.7, 1.0)
    background_noise_level: float = 0.4
    min_extent: float = 0.15
    max_extent: float = 0.5

    def __post_init__(self):
        self.object_count_range = tuple(self.object_count_range)
        self.object_intensity_range = tuple(self.object_intensity_range)
        lo, hi = self.object_count_range
        if lo < 0 or hi < max(lo, 1):
            raise ValueError("object_count_range must be non-negative with max >= 1")
        if not 0 < self.min_extent <= self.max_extent <= 1:
            raise ValueError("object extents must satisfy 0 < min <= max <= 1")


def generate_scene(rng: np.random.Generator, spec: SceneSpec, object_present: bool):
    """Uniform-noise frame with bright axis-aligned rectangles when ``object_present``.

    Returns (image (3, S, S) float32, boxes (K, 4) normalized corner form, label).
    """
    s = spec.image_size
    image = rng.uniform(0.0, spec.background_noise_level, size=(3, s, s)).astype(DTYPE)
    boxes = []
    if object_present:
        lo, hi = spec.object_count_range
        count = int(rng.integers(max(lo, 1), hi + 1))
        min_px = max(1, math.ceil(spec.min_extent * s))
        max_px = max(min_px, math.floor(spec.max_extent * s))
        for _ in range(count):
            w, h = (int(v) for v in rng.integers(min_px, max_px + 1, size=2))
            x0 = int(rng.integers(0, s - w + 1))
            y0 = int(rng.integers(0, s - h + 1))
            level = rng.uniform(*spec.object_intensity_range)
            image[:, y0:y0 + h, x0:x0 + w] = DTYPE(level)
            boxes.append((x0 / s, y0 / s, (x0 + w) / s, (y0 + h) / s))
    return image, np.array(boxes, dtype=np.float64).reshape(-1, 4), bool(object_present)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, S, S) raw pixels
    boxes: list[np.ndarray]
    classes: list[np.ndarray]
    frame_labels: np.ndarray
    names: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def __post_init__(self):
        if not self.names:
            self.names = [f"frame_{i:05d}.gdi" for i in range(len(self.images))]


def synthesize_dataset(num: int, object_prob: float = 0.5, seed: int = 0,
                       spec: SceneSpec | None = None) -> Dataset:
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    images, boxes, classes, labels = [], [], [], []
    for _ in range(num):
        present = bool(rng.random() < object_prob)
        img, b, lab = generate_scene(rng, spec, present)
        images.append(img)
        boxes.append(b)
        classes.append(np.ones(len(b), dtype=np.int64))
        labels.append(lab)
    images = np.stack(images) if images else np.zeros((0, 3, spec.image_size, spec.image_size), DTYPE)
    return Dataset(images, boxes, classes, np.array(labels, dtype=bool))


def write_image(path, image) -> None:
    image = np.asarray(image, dtype="<f4")
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC or len(raw) < 16:
        raise ModelFormatError(f"{path}: not a GDI1 image")
    w, h, c = struct.unpack_from("<III", raw, 4)
    need = 16 + 4 * w * h * c
    if len(raw) != need:
        raise ModelFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(c, h, w).astype(DTYPE)


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, img, b, cls, lab in zip(dataset.names, dataset.images, dataset.boxes,
                                      dataset.classes, dataset.frame_labels):
        write_image(directory / name, img)
        fields = [name, str(int(lab)), str(len(b))]
        for c, box in zip(cls, b):
            fields.append(" ".join([str(int(c))] + [repr(float(v)) for v in box]))
        lines.append(" ".join(fields))
    (directory / MANIFEST).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    names, images, boxes, classes, labels = [], [], [], [], []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            name, label, count = parts[0], int(parts[1]), int(parts[2])
            rest = parts[3:]
            if len(rest) != 5 * count:
                raise ValueError(f"expected {count} boxes")
            recs = [rest[5 * i:5 * i + 5] for i in range(count)]
            cls = np.array([int(r[0]) for r in recs], dtype=np.int64)
            bx = np.array([[float(v) for v in r[1:]] for r in recs], dtype=np.float64).reshape(-1, 4)
        except (ValueError, IndexError) as exc:
            raise ModelFormatError(f"{manifest}:{lineno}: malformed record ({exc})") from None
        names.append(name)
        images.append(read_image(directory / name))
        boxes.append(bx)
        classes.append(cls)
        labels.append(bool(label))
    if not images:
        raise DegenerateInputError(f"{directory} holds no frames")
    return Dataset(np.stack(images), boxes, classes, np.array(labels, dtype=bool), names)


def make_batches(frame_labels, batch_size: int, empty_fraction: float, rng) -> list[np.ndarray]:
    """One epoch of index batches, each holding ~``empty_fraction`` empty frames."""
    labels = np.asarray(frame_labels, dtype=bool)
    empty = list(rng.permutation(np.flatnonzero(~labels)))
    full = list(rng.permutation(np.flatnonzero(labels)))
    batches = []
    while empty or full:
        size = min(batch_size, len(empty) + len(full))
        n_empty = min(len(empty), round(empty_fraction * size))
        n_full = min(len(full), size - n_empty)
        n_empty = size - n_full
        batch = empty[:n_empty] + full[:n_full]
        del empty[:n_empty], full[:n_full]
        batches.append(np.sort(np.array(batch, dtype=np.int64)))
    return batches


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[LossBreakdown]


def prepare_targets(model, dataset: Dataset, loss_config: LossConfig):
    labels, targets = [], []
    for b, c in zip(dataset.boxes, dataset.classes):
        lab, tgt = build_targets(b, c, model.priors, model.config.priors.variances, loss_config.match_iou)
        labels.append(lab)
        targets.append(tgt)
    return np.stack(labels), np.stack(targets)


def train(model, dataset: Dataset, config: TrainConfig | None = None,
          loss_config: LossConfig | None = None, on_epoch=None) -> TrainResult:
    """Train ``model.params`` in place; ``on_epoch(epoch, lr, breakdown)`` is called per epoch."""
    config = config or TrainConfig()
    loss_config = loss_config or LossConfig()
    if len(dataset) == 0:
        raise DegenerateInputError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.rng_seed)
    x_all = model.preprocess(dataset.images)
    prior_labels, loc_targets = prepare_targets(model, dataset, loss_config)
    frame_labels = dataset.frame_labels.astype(np.int64)
    velocity: dict[str, np.ndarray] = {}
    history = []
    with compute_threads():
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            sums = np.zeros(5)
            seen = 0
            for idx in make_batches(dataset.frame_labels, config.batch_size, config.empty_fraction, rng):
                breakdown, grads = model.loss_and_grads(x_all[idx], prior_labels[idx], loc_targets[idx],
                                                        frame_labels[idx], loss_config)
                values = np.array([breakdown.l_conf, breakdown.l_loc, breakdown.l_multibox,
                                   breakdown.l_binary, breakdown.total])
                if not np.all(np.isfinite(values)) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise TrainingDivergedError(epoch)
                sgd_step(model.params, grads, velocity, lr, config.momentum, config.weight_decay)
                sums += values * len(idx)
                seen += len(idx)
            epoch_loss = LossBreakdown(*(float(v) for v in sums / seen))
            history.append(epoch_loss)
            log.debug("epoch %d lr %.3g total %.5f", epoch, lr, epoch_loss.total)
            if on_epoch is not None:
                on_epoch(epoch, lr, epoch_loss)
    return TrainResult(model.params, history)
