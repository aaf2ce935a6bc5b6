"""
PA-EWC Desk Lab - Objectives Module

Composite training loss:

    total = w_seg * seg_ce + w_dice * dice_loss + w_ewc * ewc_penalty

seg_ce is pixelwise 2-class cross-entropy, dice_loss uses the soft foreground
probability, and ewc_penalty sums the anchored quadratic terms of every stored
task snapshot using that snapshot's own group tags and weights.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from errors import ConfigError, DimensionError, InputError, NumericError, StateError
from tensor_autodiff import Tensor
from toy_model import SegLogits

logger = logging.getLogger(__name__)

MaskLike = Union[Tensor, np.ndarray]


@dataclass
class LossWeights:
    """Weights of the composite loss and the Dice smoothing term"""
    w_seg: float = 1.0
    w_dice: float = 0.3
    w_ewc: float = 10.0
    epsilon: float = 1e-6

    def validate(self) -> "LossWeights":
        for name in ("w_seg", "w_dice", "w_ewc"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"loss.{name} must be a finite value >= 0, got {value!r}")
        if not math.isfinite(self.epsilon) or self.epsilon <= 0:
            raise ConfigError(f"loss.epsilon must be > 0, got {self.epsilon!r}")
        return self


@dataclass
class LossBreakdown:
    """Scalar values of each loss component; `graph` is the differentiable total"""
    seg: float
    dice: float
    ewc: float
    total: float
    graph: Optional[Tensor] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"seg": self.seg, "dice": self.dice, "ewc": self.ewc, "total": self.total}


def _mask_array(logits: SegLogits, mask: MaskLike) -> np.ndarray:
    values = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    batch, channels, height, width = logits.shape
    if channels != 2:
        raise DimensionError(f"segmentation logits need 2 channels, got {channels}")
    if values.shape != (batch, height, width):
        raise DimensionError(f"mask shape {values.shape} does not match logits {logits.shape}")
    if not np.all((values == 0.0) | (values == 1.0)):
        raise InputError("mask values must be 0 or 1")
    return values.astype(np.float64)


def seg_ce(logits: SegLogits, mask: MaskLike) -> Tensor:
    """Mean over batch and pixels of the 2-class cross-entropy (softmax over the channel axis)"""
    y = _mask_array(logits, mask)
    one_hot = Tensor(np.stack([1.0 - y, y], axis=1))
    log_probs = logits.values.log_softmax(axis=1)
    return -(log_probs * one_hot).sum(axis=1).mean()


def dice_loss(logits: SegLogits, mask: MaskLike, epsilon: float = 1e-6) -> Tensor:
    """1 - mean over the batch of 2 * sum(p_fg * y) / (sum(p_fg) + sum(y) + epsilon)"""
    y = _mask_array(logits, mask)
    p_fg = logits.values.softmax(axis=1)[:, 1]
    intersection = (p_fg * Tensor(y)).sum(axis=(1, 2))
    denominator = p_fg.sum(axis=(1, 2)) + Tensor(y.sum(axis=(1, 2)) + epsilon)
    return 1.0 - (2.0 * intersection / denominator).mean()


def ewc_penalty(params: Mapping[str, Tensor], snapshots: Sequence) -> Tensor:
    """
    Sum over snapshots j and blocks b of w_j[group_j(b)] * sum(F_j[b] * (theta_b - anchor_j[b])^2)

    Args:
        params: current named parameter tensors
        snapshots: FisherSnapshot objects, each carrying its own group tags and weights

    Returns:
        Scalar tensor, differentiable w.r.t. params (a constant zero when there are no terms)
    """
    terms = []
    for snapshot in snapshots:
        for name, fisher in snapshot.per_block_fisher.items():
            if name not in params:
                raise StateError(f"snapshot for task {snapshot.task_id} names unknown block '{name}'")
            anchor = snapshot.anchor[name]
            current = params[name]
            if anchor.shape != current.shape or fisher.shape != current.shape:
                raise StateError(
                    f"task {snapshot.task_id} block '{name}': anchor {anchor.shape} / fisher {fisher.shape} "
                    f"vs parameter {current.shape}"
                )
            weight = float(snapshot.group_weight.get(snapshot.group_of[name], 0.0))
            if weight == 0.0:
                continue
            displacement = current - Tensor(anchor)
            terms.append(weight * (Tensor(fisher) * displacement * displacement).sum())
    if not terms:
        return Tensor(0.0)
    penalty = terms[0]
    for term in terms[1:]:
        penalty = penalty + term
    return penalty


def total_loss(seg: Tensor, dice: Tensor, ewc: Tensor, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the three components, with a NumericError on any non-finite part"""
    components = {"seg": seg.item(), "dice": dice.item(), "ewc": ewc.item()}
    for name, value in components.items():
        if not math.isfinite(value):
            raise NumericError(f"loss component {name} is {value}")
    graph = weights.w_seg * seg + weights.w_dice * dice + weights.w_ewc * ewc
    total = graph.item()
    if not math.isfinite(total):
        raise NumericError(f"total loss is {total}")
    return LossBreakdown(seg=components["seg"], dice=components["dice"], ewc=components["ewc"],
                         total=total, graph=graph)
