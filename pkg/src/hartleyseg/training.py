"""Loss, optimizer, schedule, preprocessing and the training loop."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .metrics import foreground_dice
from .networks import Model

log = logging.getLogger(__name__)

PEARSON_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; the model keeps its last good weights."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    lr_max: float = 1e-2
    lr_min: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rotation_deg: float = 30.0
    shift_fraction: float = 0.2
    scale_min: float = 0.8
    scale_max: float = 1.2
    augment_prob: float = 0.8
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            cast = int if f.type == "int" else float
            setattr(self, f.name, cast(getattr(self, f.name)))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 < self.lr_min < self.lr_max:
            raise ValueError("need 0 < lr_min < lr_max")
        for name in ("augment_prob", "val_fraction", "beta1", "beta2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, mapping) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(mapping) - names
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**mapping)


# ---------------------------------------------------------------------------
# loss


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels outside [0, {n_classes})")
    return (labels[None] == np.arange(n_classes).reshape((-1,) + (1,) * labels.ndim)).astype(np.float64)


def pearson_loss(pred, target):
    """Mean over classes of ``1 - r_c``.

    ``r_c`` is the sample correlation between the flattened prediction and
    target channels, ``sum(p~ t~) / sqrt(sum(p~^2) sum(t~^2) + eps)`` with
    mean-centred ``p~``, ``t~``. A constant channel gives ``r = 0``.
    """
    if isinstance(pred, ad.DiffValue):
        tape = pred.tape
    else:
        tape = ad.Tape(enabled=False)
        pred = tape.constant(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    c = pred.shape[0]
    p = pred.reshape(c, -1)
    t = target.reshape(c, -1)
    pc = p - p.mean(axis=1, keepdims=True)
    tc = t - t.mean(axis=1, keepdims=True)
    cov = (pc * tc).sum(axis=1)
    var_p = ad.square(pc).sum(axis=1)
    var_t = (tc * tc).sum(axis=1)
    r = cov / ad.sqrt(var_p * var_t + PEARSON_EPS)
    loss = (1.0 - r).mean()
    return loss if tape.enabled else float(loss.value)


# ---------------------------------------------------------------------------
# optimizer and schedule


class Adamax:
    """Adamax: first moment plus an exponentially weighted infinity norm."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.u: dict = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """Update ``params`` in place."""
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}; step rejected")
        self.t += 1
        correction = lr / (1.0 - self.beta1 ** self.t)
        for name, g in grads.items():
            m = self.m.get(name)
            u = self.u.get(name)
            if m is None:
                m = np.zeros_like(g)
                u = np.zeros_like(g)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            u = np.maximum(self.beta2 * u, np.abs(g))
            self.m[name], self.u[name] = m, u
            params[name] = params[name] - correction * m / (u + self.eps)


def cosine_lr(t: float, total: float, lr_max: float = 1e-2, lr_min: float = 1e-3) -> float:
    """Cosine annealing from ``lr_max`` at ``t=0`` to ``lr_min`` at ``t=total``."""
    if t < 0 or t > total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    if total == 0:
        return lr_max
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total)) / 2.0


# ---------------------------------------------------------------------------
# preprocessing


def normalize_intensity(v: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per channel: subtract the mean, divide by ``std + eps``."""
    v = np.asarray(v, dtype=np.float64)
    axes = tuple(range(1, v.ndim))
    mean = v.mean(axis=axes, keepdims=True)
    std = v.std(axis=axes, keepdims=True)
    return (v - mean) / (std + eps)


def affine_matrix(shape, angle_deg=0.0, shift=(0.0, 0.0, 0.0), scale=1.0):
    """Output-to-input mapping of scale, axial rotation, then translation.

    The forward transform is ``y = R S (x - c) + c + shift`` with rotation in
    the x-y plane about the volume centre ``c``. Returns ``(matrix, offset)``
    in the convention of :func:`scipy.ndimage.affine_transform`.
    """
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a), 0.0],
                    [math.sin(a), math.cos(a), 0.0],
                    [0.0, 0.0, 1.0]])
    forward = rot @ (np.eye(3) * scale)
    inverse = np.linalg.inv(forward)
    centre = (np.asarray(shape[-3:], dtype=float) - 1.0) / 2.0
    offset = centre - inverse @ (centre + np.asarray(shift, dtype=float))
    return inverse, offset


def apply_affine(image, labels, matrix, offset):
    """Trilinear resampling of ``image`` channels, nearest for ``labels``."""
    out = np.stack([ndimage.affine_transform(ch, matrix, offset, order=1, mode="constant", cval=0.0)
                    for ch in image])
    lab = ndimage.affine_transform(labels, matrix, offset, order=0, mode="constant", cval=0)
    return out, lab.astype(labels.dtype)


def augment(image, labels, rng: np.random.Generator, cfg: TrainConfig | None = None, angle=None):
    """Random scale/axial rotation/shift with probability ``cfg.augment_prob``.

    ``angle`` (degrees) overrides the sampled rotation and forces the
    transform branch; it exists for testing the geometry.
    """
    cfg = cfg or TrainConfig()
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if image.shape[1:] != labels.shape:
        raise ValueError(f"image {image.shape} and labels {labels.shape} disagree")
    if angle is None:
        if rng.random() >= cfg.augment_prob:
            return image, labels
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        shift = rng.uniform(-cfg.shift_fraction, cfg.shift_fraction, size=3) * np.array(labels.shape)
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    else:
        shift, scale = (0.0, 0.0, 0.0), 1.0
    matrix, offset = affine_matrix(labels.shape, angle, shift, scale)
    return apply_affine(image, labels, matrix, offset)


# ---------------------------------------------------------------------------
# training loop


def split_ids(ids, val_fraction: float, seed: int):
    """Deterministic train/validation split by a seeded hash of each id."""
    ranked = sorted(ids, key=lambda i: hashlib.sha256(f"{seed}:{i}".encode()).hexdigest())
    n_val = int(math.floor(len(ranked) * val_fraction))
    val = set(ranked[:n_val])
    return [i for i in ids if i not in val], [i for i in ids if i in val]


def total_loss(main, aux, target):
    """Mean Pearson loss over the main and deep-supervision predictions."""
    losses = [pearson_loss(main, target)] + [pearson_loss(a, target) for a in aux]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def evaluate(model: Model, cases):
    """Mean loss and foreground Dice over ``(image, labels)`` pairs."""
    losses, dices = [], []
    for image, labels in cases:
        main, aux = model.forward(image)
        target = one_hot(labels, model.config.n_classes)
        losses.append(np.mean([pearson_loss(main, target)] + [pearson_loss(a, target) for a in aux]))
        dices.append(foreground_dice(np.argmax(main, axis=0), labels))
    return float(np.mean(losses)), float(np.mean(dices))


def train(model: Model, dataset, cfg: TrainConfig, augment_data: bool = True):
    """Train ``model`` in place on ``[(case_id, image, labels), ...]``.

    Images are intensity-normalized once, then each step augments, runs the
    network, takes the mean Pearson loss of all outputs and applies one
    Adamax update. Returns the per-epoch history as a list of dicts.
    """
    if not dataset:
        raise ValueError("empty dataset")
    by_id = {cid: (normalize_intensity(img), np.asarray(lab)) for cid, img, lab in dataset}
    if len(by_id) != len(dataset):
        raise ValueError("duplicate case ids")
    train_ids, val_ids = split_ids(list(by_id), cfg.val_fraction, cfg.seed)
    opt = Adamax(cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    last_good = {k: v.copy() for k, v in model.params.items()}
    n_classes = model.config.n_classes

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs - 1, cfg.lr_max, cfg.lr_min)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_ids))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_ids[j] for j in order[start:start + cfg.batch_size]]
            grads_sum = None
            for cid in batch:
                image, labels = by_id[cid]
                if augment_data:
                    rng = np.random.default_rng([cfg.seed, epoch, train_ids.index(cid)])
                    image, labels = augment(image, labels, rng, cfg)
                tape = ad.Tape()
                try:
                    main, aux = model.forward(image, tape)
                    loss = total_loss(main, aux, one_hot(labels, n_classes))
                    if not np.isfinite(loss.value):
                        raise FloatingPointError("non-finite loss")
                    grads = tape.backward(loss)
                except FloatingPointError as exc:
                    model.params = last_good
                    raise TrainingDiverged(f"{exc} at epoch {epoch}") from exc
                grads_sum = grads if grads_sum is None else {
                    k: grads_sum[k] + grads[k] for k in grads}
                epoch_losses.append(float(loss.value))
            grads_mean = {k: v / len(batch) for k, v in grads_sum.items()}
            try:
                opt.step(model.params, grads_mean, lr)
            except FloatingPointError as exc:
                model.params = last_good
                raise TrainingDiverged(str(exc)) from exc
            last_good = {k: v.copy() for k, v in model.params.items()}

        if val_ids:
            val_loss, val_dice = evaluate(model, [by_id[i] for i in val_ids])
        else:
            val_loss, val_dice = float("nan"), float("nan")
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(epoch_losses)),
               "val_loss": val_loss, "val_dice": val_dice}
        history.append(row)
        log.info("epoch %d lr %.5f loss %.5f val %.5f dice %.4f", epoch, lr,
                 row["train_loss"], val_loss, val_dice)
    return history


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "val_dice")


def history_csv(history, extra_columns=()) -> str:
    cols = tuple(extra_columns) + HISTORY_COLUMNS
    lines = [",".join(cols)]
    for row in history:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)
