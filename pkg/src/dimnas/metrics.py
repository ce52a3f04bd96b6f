"""Dice loss for training, hard dice for reward and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import supernet
from .datagen import Volume
from .search_space import Genome
from .tensor import ShapeError, Tensor, softmax_channels

__all__ = ["DiceReport", "one_hot", "soft_dice_loss", "dice_per_class", "hard_dice", "evaluate", "batch_reward"]

EPS = 1e-5


@dataclass
class DiceReport:
    """Per-class dice plus mean +/- std over volumes."""

    per_class: list[float]
    mean: float
    std_over_volumes: float
    n_volumes: int

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "mean": self.mean,
            "std_over_volumes": self.std_over_volumes,
            "n_volumes": self.n_volumes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiceReport":
        return cls(
            per_class=list(d["per_class"]),
            mean=float(d["mean"]),
            std_over_volumes=float(d["std_over_volumes"]),
            n_volumes=int(d["n_volumes"]),
        )


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """(B, spatial...) integer labels -> (B, n_classes, spatial...) floats."""
    out = np.zeros((labels.shape[0], n_classes, *labels.shape[1:]), dtype=dtype)
    for k in range(n_classes):
        out[:, k] = labels == k
    return out


def soft_dice_loss(scores: Tensor, labels: np.ndarray, n_classes: int = 4,
                   eps: float = EPS, include_background: bool = True) -> Tensor:
    """1 - mean over classes of the soft dice between per-class softmax
    probabilities and one-hot labels; sums run over batch and all positions."""
    if scores.ndim - 2 != labels.ndim - 1 or scores.shape[0] != labels.shape[0] \
            or scores.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"scores {scores.shape} incompatible with labels {labels.shape}")
    if scores.shape[1] != n_classes:
        raise ShapeError(f"scores have {scores.shape[1]} channels, expected {n_classes}")
    probs = softmax_channels(scores)
    g = one_hot(labels, n_classes, dtype=scores.data.dtype)
    axes = (0, *range(2, scores.ndim))
    inter = (probs * Tensor(g)).sum(axis=axes)
    psum = probs.sum(axis=axes)
    gsum = Tensor(g.sum(axis=axes))
    dice = (2.0 * inter + eps) / (psum + gsum + eps)
    if include_background:
        mean_dice = dice.mean()
    else:
        mask = np.ones(n_classes, dtype=scores.data.dtype)
        mask[0] = 0.0
        mean_dice = (dice * Tensor(mask)).sum() * (1.0 / (n_classes - 1))
    return 1.0 - mean_dice


def dice_per_class(pred: np.ndarray, truth: np.ndarray, n_classes: int = 4) -> np.ndarray:
    """Hard dice 2|P∩G|/(|P|+|G|) per class; 1.0 when a class is absent
    from both masks."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    out = np.empty(n_classes)
    for k in range(n_classes):
        p = pred == k
        t = truth == k
        denom = int(p.sum()) + int(t.sum())
        out[k] = 1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom
    return out


def hard_dice(pred: np.ndarray, truth: np.ndarray, n_classes: int = 4) -> DiceReport:
    per_class = dice_per_class(pred, truth, n_classes)
    return DiceReport(
        per_class=[float(v) for v in per_class],
        mean=float(per_class.mean()),
        std_over_volumes=0.0,
        n_volumes=1,
    )


def _predict(weights, spec, genome: Genome | None, x: np.ndarray,
             batch_stats: bool = False) -> np.ndarray:
    # batch_stats=True normalizes with the batch itself while leaving
    # running buffers untouched -- the only meaningful statistics when
    # weights are shared across many sampled paths
    xt = Tensor(x)
    kwargs = {"training": True, "update_stats": False} if batch_stats else {"training": False}
    if genome is None:
        scores = supernet.forward_baseline(weights, spec, xt, **kwargs)
    else:
        scores = supernet.forward(weights, spec, genome, xt, **kwargs)
    return np.argmax(scores.data, axis=1)


def evaluate(weights, spec, genome: Genome | None, volumes: list[Volume],
             batch_stats: bool = False) -> DiceReport:
    """Argmax predictions per volume; reports the across-volume mean +/- std
    of per-volume mean dice (genome=None evaluates the fixed baseline).

    ``batch_stats=True`` scores a candidate on shared supernet weights;
    retrained models evaluate with their running statistics (default).
    """
    if not volumes:
        raise ValueError("evaluate requires at least one volume")
    per_volume_class = []
    for vol in volumes:
        pred = _predict(weights, spec, genome, vol.intensity, batch_stats)[0]
        per_volume_class.append(dice_per_class(pred, vol.labels, spec.n_classes))
    mat = np.stack(per_volume_class)
    vol_means = mat.mean(axis=1)
    return DiceReport(
        per_class=[float(v) for v in mat.mean(axis=0)],
        mean=float(vol_means.mean()),
        std_over_volumes=float(vol_means.std()),
        n_volumes=len(volumes),
    )


def batch_reward(weights, spec, genome: Genome, x: np.ndarray, y: np.ndarray) -> float:
    """Mean hard dice of a frozen-weights forward pass over one minibatch;
    used as the controller reward, always in [0, 1]. Normalization uses the
    minibatch statistics without touching stored state."""
    pred = _predict(weights, spec, genome, x, batch_stats=True)
    return float(dice_per_class(pred, y, spec.n_classes).mean())
