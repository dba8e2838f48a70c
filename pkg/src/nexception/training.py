"""Training recipe: soft-target losses, the published hyperparameter table,
the epoch loop, and center-crop evaluation.

Every random draw is keyed by (seed, epoch, step), so reruns match bit for
bit regardless of wall clock or host.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .augment import mix_batch, one_hot, rand_augment, random_erasing
from .checkpoint import save_checkpoint
from .data import Dataset, eval_transform, normalize_batch
from .errors import ConfigError, DivergenceError, NumericsError
from .models import ModelGraph
from .optim import Lamb, cosine_warmup_lr

# CSV columns are the deterministic per-epoch metrics, so seed-identical
# runs write byte-identical files; wall time lives in the JSON summary.
METRIC_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_top1",
                 "val_top5")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_soft_loss(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """Mean over batch and classes of softplus(z) - t*z.

    This is binary cross entropy against soft targets written without ever
    forming probabilities, so it is exact for extreme logits. Gradient:
    (sigmoid(z) - t) / N.
    """
    z = logits.data
    t = targets.astype(z.dtype)
    if t.shape != z.shape:
        raise ConfigError(f"targets {t.shape} do not match logits {z.shape}")
    val = np.asarray(np.mean(np.logaddexp(0.0, z) - t * z), dtype=z.dtype)

    def backward(g: np.ndarray) -> None:
        T.accumulate_grad(logits, (_stable_sigmoid(z) - t) * (g / z.size))

    return T.from_op(val, "bce", (logits,), backward)


def softmax_ce_loss(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """Mean over the batch of -sum_c t_c log softmax(z)_c.

    Gradient: (softmax(z) - t) / batch.
    """
    z = logits.data
    t = targets.astype(z.dtype)
    if t.shape != z.shape:
        raise ConfigError(f"targets {t.shape} do not match logits {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    val = np.asarray(np.mean(-(t * logp).sum(axis=1)), dtype=z.dtype)

    def backward(g: np.ndarray) -> None:
        p = np.exp(logp)
        T.accumulate_grad(logits, (p - t) * (g / z.shape[0]))

    return T.from_op(val, "softmax_ce", (logits,), backward)


LOSS_KINDS = ("bce", "ce")


def make_loss(kind: str):
    if kind == "bce":
        return bce_soft_loss
    if kind == "ce":
        return softmax_ce_loss
    raise ConfigError(f"loss must be one of {LOSS_KINDS}, got '{kind}'")


@dataclass
class TrainConfig:
    """Hyperparameters; defaults are the published recipe for the tiny and
    patchify variants (the small variant lowers lr to 1.4e-3 at batch 128)."""

    epochs: int = 300
    batch_size: int = 256
    lr: float = 2e-3
    min_lr: float = 1e-6
    warmup_epochs: int = 5
    weight_decay: float = 0.02
    loss: str = "bce"
    label_smoothing: float = 0.0
    randaug_num_ops: int = 2
    randaug_magnitude: float = 7.0
    randaug_std: float = 0.5
    mixup_alpha: float = 0.1
    cutmix_alpha: float = 1.0
    erasing_prob: float = 0.0
    drop_prob: float = 0.05
    eval_crop_ratio: float = 0.95
    seed: int = 0
    divergence_threshold: float = 1e3

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError(f"epochs={self.epochs}, batch_size="
                              f"{self.batch_size} out of range")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} outside "
                              f"[0, {self.epochs}]")
        if not 0 < self.eval_crop_ratio <= 1:
            raise ConfigError(f"eval_crop_ratio={self.eval_crop_ratio} "
                              "must be in (0, 1]")
        make_loss(self.loss)
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training fields: {sorted(extra)}")
        return cls(**d).validate()


def variant_recipe(name: str) -> TrainConfig:
    """Per-variant tuned entries from the published table."""
    base = TrainConfig()
    if name == "nexception_s":
        return replace(base, lr=1.4e-3, batch_size=128)
    return base


# -- batching -------------------------------------------------------------------


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), 0x0E, int(epoch)]).permutation(n)


def _augmented_batch(ds: Dataset, idx: np.ndarray, cfg: TrainConfig,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    imgs = []
    for i in idx:
        img = ds.images[i]
        if cfg.randaug_num_ops > 0:
            img = rand_augment(img, rng, num_ops=cfg.randaug_num_ops,
                               magnitude=cfg.randaug_magnitude,
                               magnitude_std=cfg.randaug_std)
        imgs.append(img)
    x = normalize_batch(np.stack(imgs))
    if cfg.erasing_prob > 0:
        x = np.stack([random_erasing(xi, rng, prob=cfg.erasing_prob) for xi in x])
    y = one_hot(ds.labels[idx], ds.num_classes, cfg.label_smoothing)
    x, y, _, _ = mix_batch(x, y, mixup_alpha=cfg.mixup_alpha,
                           cutmix_alpha=cfg.cutmix_alpha, rng=rng)
    return x.astype(np.float32), y


# -- evaluation -----------------------------------------------------------------


def top_k_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Tie-break by class index: equal scores rank the lower index first,
    so a constant row always predicts class 0."""
    order = np.argsort(-logits, axis=1, kind="stable")
    return (order[:, :k] == labels[:, None]).any(axis=1)


def evaluate(model: ModelGraph, ds: Dataset, *, batch_size: int = 64,
             crop_ratio: float = 0.95, loss_kind: str = "bce") -> dict:
    """Center-crop protocol at the model's native resolution."""
    was_training = model.training
    model.eval()
    loss_fn = make_loss(loss_kind)
    hits1 = hits5 = 0
    loss_sum = 0.0
    n = len(ds)
    try:
        with T.no_grad():
            for start in range(0, n, batch_size):
                idx = np.arange(start, min(start + batch_size, n))
                batch = np.stack([eval_transform(ds.images[i], model.input_hw,
                                                 crop_ratio) for i in idx])
                x = T.Tensor(normalize_batch(batch))
                logits = model(x)
                labels = ds.labels[idx]
                targets = one_hot(labels, ds.num_classes)
                loss_sum += float(loss_fn(logits, targets).data) * len(idx)
                hits1 += int(top_k_hits(logits.data, labels, 1).sum())
                hits5 += int(top_k_hits(logits.data, labels, 5).sum())
    finally:
        if was_training:
            model.train()
    return {"top1": hits1 / n, "top5": hits5 / n, "loss": loss_sum / n, "n": n}


# -- the loop -------------------------------------------------------------------


def train_model(model: ModelGraph, train_ds: Dataset, val_ds: Dataset | None,
                cfg: TrainConfig, out_dir: str | None = None,
                log=None) -> dict:
    """Run the recipe; returns a summary dict and optionally writes
    metrics.csv, summary.json, and best.ckpt under ``out_dir``.

    Divergence (numeric failure at any step, or an epoch mean loss above
    cfg.divergence_threshold) raises DivergenceError carrying the global
    step index.
    """
    cfg.validate()
    steps_per_epoch = len(train_ds) // cfg.batch_size  # drop-last batching
    if steps_per_epoch < 1:
        raise ConfigError(f"dataset of {len(train_ds)} images is smaller than "
                          f"one batch of {cfg.batch_size}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    model.seed_stochastic_depth(cfg.seed)
    model.train()
    opt = Lamb(model.registry.values(), lr=cfg.lr,
               weight_decay=cfg.weight_decay)
    loss_fn = make_loss(cfg.loss)
    rows = []
    best = {"epoch": -1, "val_top1": -1.0}
    t0 = time.monotonic()
    global_step = 0
    for epoch in range(cfg.epochs):
        tick = time.monotonic()
        order = _epoch_order(len(train_ds), cfg.seed, epoch)
        epoch_lr = cosine_warmup_lr(float(epoch), total_epochs=cfg.epochs,
                                    warmup_epochs=cfg.warmup_epochs,
                                    peak_lr=cfg.lr, min_lr=cfg.min_lr)
        loss_acc = 0.0
        for step in range(steps_per_epoch):
            opt.lr = cosine_warmup_lr(epoch + step / steps_per_epoch,
                                      total_epochs=cfg.epochs,
                                      warmup_epochs=cfg.warmup_epochs,
                                      peak_lr=cfg.lr, min_lr=cfg.min_lr)
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            rng = np.random.default_rng([cfg.seed, 0xA6, epoch, step])
            xb, yb = _augmented_batch(train_ds, idx, cfg, rng)
            try:
                logits = model(T.Tensor(xb))
                loss = loss_fn(logits, yb)
                opt.zero_grad()
                T.backward(loss)
                opt.step()
            except NumericsError as e:
                raise DivergenceError(
                    f"non-finite value at step {global_step}: {e}",
                    step=global_step) from e
            loss_acc += float(loss.data)
            global_step += 1
        train_loss = loss_acc / steps_per_epoch
        if not np.isfinite(train_loss) or train_loss > cfg.divergence_threshold:
            raise DivergenceError(
                f"epoch {epoch} mean loss {train_loss:.3g} above "
                f"{cfg.divergence_threshold:.3g}", step=global_step - 1)
        if val_ds is not None:
            try:
                val = evaluate(model, val_ds, batch_size=cfg.batch_size,
                               crop_ratio=cfg.eval_crop_ratio,
                               loss_kind=cfg.loss)
            except NumericsError as e:
                # parameters can blow up on the last step of an epoch whose
                # recorded losses were still finite
                raise DivergenceError(
                    f"non-finite value evaluating after epoch {epoch}: {e}",
                    step=global_step - 1) from e
        else:
            val = {"top1": float("nan"), "top5": float("nan"),
                   "loss": float("nan")}
        row = {"epoch": epoch, "lr": epoch_lr, "train_loss": train_loss,
               "val_loss": val["loss"], "val_top1": val["top1"],
               "val_top5": val["top5"],
               "seconds": time.monotonic() - tick}
        rows.append(row)
        if log:
            log(f"epoch {epoch:3d} lr {epoch_lr:.2e} train {train_loss:.4f} "
                f"val@1 {val['top1']:.4f}")
        if val_ds is not None and val["top1"] > best["val_top1"]:
            best = {"epoch": epoch, "val_top1": val["top1"]}
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), model,
                                extra={"epoch": epoch, "val_top1": val["top1"]})
    summary = {
        "variant": model.name,
        "epochs": cfg.epochs,
        "steps_per_epoch": steps_per_epoch,
        "train_loss": rows[-1]["train_loss"],
        "final_val_top1": rows[-1]["val_top1"],
        "final_val_top5": rows[-1]["val_top5"],
        "best_epoch": best["epoch"],
        "best_val_top1": best["val_top1"],
        "wall_seconds": time.monotonic() - t0,
        "diverged": False,
        "config": cfg.to_dict(),
        "history": rows,
    }
    if out_dir:
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=2)
    return summary


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    """One row per epoch; column order is part of the format."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in METRIC_FIELDS})


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return v
