"""Loss, SGD, the training loop, and sliding-window inference.

The loss is the usual Dice + cross-entropy compound: soft Dice is averaged
over *all* classes (background included) with smoothing eps in both numerator
and denominator; cross-entropy is averaged over voxels. Softmax subtracts a
detached per-voxel max for stability.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import metrics, volio
from .errors import DataError, ShapeError, TrainError
from .precision import dtype
from .tensor import Tensor, backward, no_grad, texp, tlog, tmean, tsum


def normalize_volume(image: np.ndarray) -> np.ndarray:
    """Per-volume z-score; idempotent, guards against flat volumes."""
    image = np.asarray(image, dtype=dtype())
    std = image.std()
    return (image - image.mean()) / (std if std > 1e-8 else 1.0)


def softmax_probs(logits: Tensor) -> tuple:
    """Stable softmax over the class axis; returns (probs, log_probs)."""
    m = Tensor(logits.data.max(axis=0, keepdims=True))
    z = logits - m
    e = texp(z)
    denom = tsum(e, axis=0, keepdims=True)
    return e / denom, z - tlog(denom)


def dice_ce_loss(logits: Tensor, labels: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Mean over classes of (1 - soft Dice) plus voxel-mean cross-entropy."""
    k = logits.data.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.data.shape[1:]:
        raise ShapeError(
            f"label shape {labels.shape} does not match logit spatial shape "
            f"{logits.data.shape[1:]}"
        )
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"label values must lie in [0, {k}), got "
                        f"[{labels.min()}, {labels.max()}]")
    onehot = Tensor(np.eye(k, dtype=dtype())[labels].transpose(3, 0, 1, 2))
    probs, logp = softmax_probs(logits)
    inter = tsum(probs * onehot, axis=(1, 2, 3))
    card = tsum(probs, axis=(1, 2, 3)) + Tensor(onehot.data.sum(axis=(1, 2, 3)))
    dice = (inter * 2.0 + eps) / (card + eps)
    dice_loss = 1.0 - tmean(dice)
    ce = -tsum(onehot * logp) / float(labels.size)
    return dice_loss + ce


def sgd_step(params, lr: float, weight_decay: float = 0.0) -> None:
    """In-place p -= lr * (grad + wd * p); clears grads afterwards."""
    for p in params:
        if p.grad is None:
            raise TrainError(f"parameter {p.name or '<unnamed>'} has no gradient")
        p.data -= lr * (p.grad + weight_decay * p.data)
        p.grad = None


@dataclass
class TrainConfig:
    """Plain-SGD settings.

    ``weight_decay`` couples the decay constant into the gradient
    (p -= lr * (g + wd * p)); ``lr_decay`` instead shrinks the step size over
    time (lr_t = lr / (1 + lr_decay * t), t counting optimizer steps). Both
    readings of "decay" are exposed; weight decay is the default route and
    ``lr_decay`` stays 0 unless asked for.
    """

    lr: float = 0.01
    weight_decay: float = 1e-5
    lr_decay: float = 0.0
    epochs: int = 200
    seed: int = 0
    target_dsc: float | None = None  # early stop once mean val DSC reaches this
    log_every: int = 0  # 0 = silent


def _validate_pair(image, labels, net_cfg):
    shape = (net_cfg.in_channels,) + tuple(net_cfg.extents)
    if image.shape != shape:
        raise DataError(f"image shape {image.shape} does not match network {shape}")
    if labels.shape != tuple(net_cfg.extents):
        raise DataError(f"label shape {labels.shape} does not match {net_cfg.extents}")


def evaluate(net, pairs):
    """Score a network on (image, labels) pairs.

    Returns ``(mean, per_class)``: ``mean`` averages each volume's mean
    foreground DSC; ``per_class[c]`` averages label c+1 over the volumes
    where that label appears on either side (NaN if it never appears).
    Labels absent from both sides of a volume are excluded throughout.
    """
    k = net.cfg.classes
    vol_means = []
    per_rows = []
    with no_grad():
        for image, labels in pairs:
            pred = predict(net, image)
            per = metrics.per_class_dsc(pred, labels, k)
            per_rows.append(per)
            valid = ~np.isnan(per)
            vol_means.append(float(per[valid].mean()) if valid.any() else np.nan)
    if not per_rows:
        return float("nan"), np.full(k - 1, np.nan)
    stacked = np.stack(per_rows)
    counts = (~np.isnan(stacked)).sum(axis=0)
    per_class = np.where(counts > 0,
                         np.nansum(stacked, axis=0) / np.maximum(counts, 1),
                         np.nan)
    means = np.asarray(vol_means)
    valid_means = means[~np.isnan(means)]
    mean = float(valid_means.mean()) if valid_means.size else float("nan")
    return mean, per_class


def predict(net, image: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = net(Tensor(normalize_volume(image)))
    return np.argmax(logits.data, axis=0)


def train_loop(net, train_pairs, val_pairs, tcfg: TrainConfig,
               csv_path=None, checkpoint_path=None):
    """SGD over (image, labels) pairs; returns per-epoch history rows.

    Each epoch visits every training pair once in a seeded shuffled order,
    then scores the validation pairs. A non-finite loss aborts with a
    TrainError naming the epoch. With ``target_dsc`` set, training stops as
    soon as the validation score reaches it.
    """
    for image, labels in list(train_pairs) + list(val_pairs):
        _validate_pair(image, labels, net.cfg)
    rng = np.random.default_rng(tcfg.seed)
    history = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train_pairs))
        losses = []
        for idx in order:
            image, labels = train_pairs[idx]
            logits = net(Tensor(normalize_volume(image)))
            loss = dice_ce_loss(logits, labels)
            if not np.isfinite(loss.data):
                raise TrainError(f"loss became non-finite at epoch {epoch}")
            backward(loss)
            lr = tcfg.lr / (1.0 + tcfg.lr_decay * step)
            sgd_step(net.params(), lr, tcfg.weight_decay)
            step += 1
            losses.append(float(loss.data))
        if val_pairs:
            val, per_class = evaluate(net, val_pairs)
        else:
            val, per_class = float("nan"), np.full(net.cfg.classes - 1, np.nan)
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "mean_dsc": val, "per_class": [float(v) for v in per_class]}
        history.append(row)
        if tcfg.log_every and epoch % tcfg.log_every == 0:
            print(f"epoch {epoch:4d}  loss {row['loss']:.4f}  mean_dsc {val:.4f}  "
                  f"[{time.perf_counter() - t0:.0f}s]")
        if tcfg.target_dsc is not None and val >= tcfg.target_dsc:
            break
    if csv_path is not None:
        write_history_csv(csv_path, history)
    if checkpoint_path is not None:
        volio.save_checkpoint(checkpoint_path, net)
    return history


def write_history_csv(path, history) -> None:
    """One row per epoch: epoch, loss, mean_dsc, then one DSC column per
    foreground label. Floats are written with repr so identical runs produce
    byte-identical files."""
    n_classes = len(history[0]["per_class"]) if history else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "mean_dsc"]
                   + [f"dsc_{c + 1}" for c in range(n_classes)])
        for row in history:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["mean_dsc"])]
                       + [repr(v) for v in row["per_class"]])


def window_origins(window, vol, overlap: float):
    """Per-axis window start positions for tiled inference.

    Origins step by round(extent * (1 - overlap)); the final origin is
    clamped so the last window ends exactly at the volume border.
    """
    axes = []
    for w, v in zip(window, vol):
        stride = max(1, int(round(w * (1.0 - overlap))))
        origins = list(range(0, v - w + 1, stride))
        if origins[-1] != v - w:
            origins.append(v - w)
        axes.append(origins)
    return axes


def _gaussian_weight(window) -> np.ndarray:
    """Separable Gaussian bump over a window, sigma = extent / 8 per axis."""
    out = np.ones(window, dtype=dtype())
    for ax, w in enumerate(window):
        x = np.arange(w, dtype=dtype()) - (w - 1) / 2.0
        prof = np.exp(-0.5 * (x / max(w / 8.0, 1e-8)) ** 2).astype(dtype())
        shape = [1, 1, 1]
        shape[ax] = w
        out = out * prof.reshape(shape)
    return out


def sliding_window_infer(net, image: np.ndarray, window=None, overlap: float = 0.5,
                         fusion: str = "uniform"):
    """Tiled inference; returns fused logits [K, X, Y, Z].

    Overlapping logits are blended with per-voxel weights that sum to one:
    equal weights by default, or a centre-peaked Gaussian bump per window
    with ``fusion="gaussian"``. A window equal to the volume is a single
    direct forward pass (bitwise identical to calling the network).
    """
    image = np.asarray(image, dtype=dtype())
    if image.ndim != 4:
        raise ShapeError(f"expected image [C, X, Y, Z], got shape {image.shape}")
    vol = image.shape[1:]
    window = tuple(window) if window is not None else tuple(net.cfg.extents)
    if any(w > v for w, v in zip(window, vol)):
        raise ShapeError(f"window {window} exceeds volume extents {vol}")
    if tuple(net.cfg.extents) != window:
        raise ShapeError(f"window {window} does not match network extents "
                         f"{tuple(net.cfg.extents)}")
    if not 0.0 <= overlap < 1.0:
        raise DataError(f"overlap must lie in [0, 1), got {overlap}")
    if fusion not in ("uniform", "gaussian"):
        raise DataError(f"fusion must be 'uniform' or 'gaussian', got {fusion!r}")
    with no_grad():
        if window == vol:
            return net(Tensor(image)).data.copy()
        axes = window_origins(window, vol, overlap)
        weight = (_gaussian_weight(window) if fusion == "gaussian"
                  else np.ones(window, dtype=dtype()))
        k = net.cfg.classes
        acc = np.zeros((k,) + vol, dtype=dtype())
        cnt = np.zeros(vol, dtype=dtype())
        for ox in axes[0]:
            for oy in axes[1]:
                for oz in axes[2]:
                    sl = (slice(None), slice(ox, ox + window[0]),
                          slice(oy, oy + window[1]), slice(oz, oz + window[2]))
                    tile = np.ascontiguousarray(image[sl])  # kernels want C-order
                    acc[sl] += weight[None] * net(Tensor(tile)).data
                    cnt[sl[1:]] += weight
        return acc / cnt[None]
