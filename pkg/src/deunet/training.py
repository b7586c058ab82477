"""Training protocol: cross-entropy loss, Adam with decoupled weight decay,
right-angle augmentation, early stopping on validation Dice and subject-grouped
k-fold splits."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import subjects_of
from .errors import ConfigurationError, DataError, TrainingDiverged
from .metrics import LABELS, dice
from .network import DeUNet, NetConfig, NetVariant, predict_mask
from .params import require_grads

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 12
    patience_epochs: int = 20
    max_epochs: int = 200
    folds: int = 5
    fold: int = 0
    r: int = 1
    seed: int = 0
    augment: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience_epochs < 0:
            raise ConfigurationError("batch_size and max_epochs must be >= 1, patience_epochs >= 0")
        if self.folds < 2 or not 0 <= self.fold < self.folds:
            raise ConfigurationError(f"need folds >= 2 and 0 <= fold < folds (got {self.fold}/{self.folds})")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")


# ---------------------------------------------------------------- loss

def cross_entropy(logits, gt):
    """Mean per-pixel softmax cross-entropy over 4 classes; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits)
    gt = np.asarray(gt)
    if logits.shape[-3] != 4 or logits.shape[:-3] + logits.shape[-2:] != gt.shape:
        raise DataError(f"logits {logits.shape} do not match labels {gt.shape}")
    if gt.size and (gt.min() < 0 or gt.max() > 3):
        raise DataError("label values must lie in 0..3")
    z = logits - logits.max(axis=-3, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-3, keepdims=True))
    logp = z - logsum
    onehot = np.moveaxis(np.eye(4, dtype=logits.dtype)[gt], -1, -3)
    n = gt.size
    loss = -float(np.sum(logp * onehot)) / n
    return loss, (np.exp(logp) - onehot) / n


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam (b1=0.9, b2=0.999, eps=1e-8) with decay ``v -= lr*wd*v`` applied first."""

    def __init__(self, params, lr=2e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.weight_decay = lr, weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items()}

    def step(self):
        require_grads(self.params)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                p.value = p.value - self.lr * self.weight_decay * p.value
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            update = self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.value = (p.value - update).astype(p.value.dtype, copy=False)


def adam_step(params, cfg, state=None):
    """One optimizer step; pass the returned state back in to keep the moments."""
    state = state or Adam(params, cfg.lr, cfg.weight_decay)
    state.step()
    return state


# ---------------------------------------------------------------- augmentation

def augment(frames, mask, rng):
    """Random mirror, vertical flip and k*90 degree rotation, shared by all frames and the mask."""
    mirror, flip = rng.random() < 0.5, rng.random() < 0.5
    k = int(rng.integers(4))
    return apply_transform(frames, mask, mirror, flip, k)


def apply_transform(frames, mask, mirror=False, flip=False, k=0):
    if mirror:
        frames, mask = frames[..., :, ::-1], mask[..., :, ::-1]
    if flip:
        frames, mask = frames[..., ::-1, :], mask[..., ::-1, :]
    if k:
        frames, mask = np.rot90(frames, k, axes=(-2, -1)), np.rot90(mask, k, axes=(-2, -1))
    return np.ascontiguousarray(frames), np.ascontiguousarray(mask)


# ---------------------------------------------------------------- splits / stopping

def kfold_split(clips, folds=5, seed=0):
    """Subject-grouped shuffled folds as a list of ``(train_idx, val_idx)`` clip-index arrays."""
    subjects = subjects_of(clips)
    if folds < 2:
        raise ConfigurationError(f"need at least 2 folds, got {folds}")
    if len(subjects) < folds:
        raise ConfigurationError(f"{len(subjects)} subjects cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(subjects)
    groups = np.array_split(order, folds)
    subj = np.array([c.subject for c in clips])
    out = []
    for g in groups:
        val = np.flatnonzero(np.isin(subj, g))
        train = np.flatnonzero(~np.isin(subj, g))
        out.append((train, val))
    return out


@dataclass
class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to beat the best score."""
    patience: int
    best: float = -math.inf
    best_epoch: int = -1
    stale: int = 0

    def update(self, epoch, score):
        """Record a score; returns ``(improved, should_stop)``."""
        improved = score > self.best
        if improved:
            self.best, self.best_epoch, self.stale = score, epoch, 0
        else:
            self.stale += 1
        return improved, self.stale >= self.patience


# ---------------------------------------------------------------- training loop

def mean_foreground_dice(net, clips, batch_size=16):
    scores = []
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        pred = predict_mask(net.forward(np.stack([c.frames for c in chunk])))
        for p, c in zip(pred, chunk):
            scores.append(np.mean([dice(p, c.mask, k) for k in LABELS.values()]))
    return float(np.mean(scores))


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_dice: float
    history: list = field(default_factory=list)  # (epoch, train_loss, val_dice)


def train(clips, variant=NetVariant.full, cfg=TrainConfig(), net_cfg=None, *, train_idx=None, val_idx=None,
          on_epoch=None):
    """Train one model on a fold; keeps the best-validation-Dice weights.

    When ``train_idx``/``val_idx`` are omitted the split is fold ``cfg.fold``
    of :func:`kfold_split`.
    """
    if not clips:
        raise ConfigurationError("empty dataset")
    net_cfg = net_cfg or NetConfig(r=cfg.r)
    if clips[0].T != net_cfg.T:
        raise ConfigurationError(f"clips have T={clips[0].T} but the network expects T={net_cfg.T}")
    if train_idx is None or val_idx is None:
        train_idx, val_idx = kfold_split(clips, cfg.folds, cfg.seed)[cfg.fold]
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ConfigurationError("fold split left an empty train or validation set")
    train_clips = [clips[i] for i in train_idx]
    val_clips = [clips[i] for i in val_idx]

    net = DeUNet(net_cfg, variant, seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    opt = Adam(net.params, cfg.lr, cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience_epochs)
    order_rng = np.random.default_rng([cfg.seed, 1])
    best_state = net.params.state()
    history = []

    for epoch in range(1, cfg.max_epochs + 1):
        order = order_rng.permutation(len(train_clips))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            frames, masks = [], []
            for i in batch:
                c = train_clips[i]
                if cfg.augment:
                    f, m = augment(c.frames, c.mask, np.random.default_rng([cfg.seed, epoch, int(train_idx[i])]))
                else:
                    f, m = c.frames, c.mask
                frames.append(f)
                masks.append(m)
            logits = net.forward(np.stack(frames))
            loss, dlogits = cross_entropy(logits, np.stack(masks))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            net.params.zero_grad()
            net.backward(dlogits)
            opt.step()
            losses.append(loss * len(batch))
        train_loss = float(np.sum(losses) / len(order))
        val_dice = mean_foreground_dice(net, val_clips)
        history.append((epoch, train_loss, val_dice))
        improved, stop = stopper.update(epoch, val_dice)
        if improved:
            best_state = net.params.state()
        log.info("epoch %d loss %.4f val_dice %.4f%s", epoch, train_loss, val_dice, " *" if improved else "")
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_dice)
        if stop:
            break
    return TrainResult(best_state, stopper.best_epoch, stopper.best, history)
