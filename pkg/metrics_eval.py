"""
PA-EWC Desk Lab - Metrics Module

Dice coefficient on hard masks, foreground binarization of logits, test-set
evaluation and the forgetting rate of a sequential run.
"""

import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from errors import InputError, StateError
from synth_tasks import collate
from tensor_autodiff import no_tape
from toy_model import ParamStore, SegLogits, forward

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    """
    Summary of one completed run

    per_task_forgetting has one entry per task except the last one trained.
    forgetting_total is their sum (fraction of Dice); forgetting_mean_percent
    is their mean expressed in percent.
    """
    per_task_dice: List[float]
    average_dice: float
    per_task_forgetting: List[float]
    forgetting_total: float
    forgetting_mean_percent: float
    peak_dice: List[float]

    def to_dict(self) -> dict:
        return asdict(self)


def _binary(name: str, mask) -> np.ndarray:
    values = np.asarray(mask)
    if not np.all((values == 0) | (values == 1)):
        raise InputError(f"{name} must be a binary mask")
    return values.astype(bool)


def dice_coeff(pred_mask, gt_mask) -> float:
    """2|P & G| / (|P| + |G|); two empty masks agree perfectly (1.0)"""
    pred = _binary("pred_mask", pred_mask)
    gt = _binary("gt_mask", gt_mask)
    if pred.shape != gt.shape:
        raise InputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def binarize(logits: Union[SegLogits, np.ndarray]) -> np.ndarray:
    """Foreground where softmax p_fg > 0.5; exact ties go to background"""
    values = logits.values.data if isinstance(logits, SegLogits) else np.asarray(logits, dtype=np.float64)
    gap = values[:, 1] - values[:, 0]
    p_fg = 0.5 * (1.0 + np.tanh(0.5 * gap))
    return (p_fg > 0.5).astype(np.uint8)


def evaluate_dice(params: ParamStore, items: Sequence, vocab, batch_size: int = 32) -> float:
    """Mean per-image Dice of the model's hard predictions over a list of TaskItems"""
    if not items:
        raise InputError("cannot evaluate on an empty split")
    scores = []
    with no_tape():
        for start in range(0, len(items), batch_size):
            images, masks, tokens = collate(items[start:start + batch_size], vocab)
            predicted = binarize(forward(params, images, tokens))
            scores.extend(dice_coeff(p, m) for p, m in zip(predicted, masks))
    return float(np.mean(scores))


def _matrix_of(record) -> np.ndarray:
    rows = record.dice_matrix if hasattr(record, "dice_matrix") else record
    try:
        matrix = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise StateError(f"dice matrix is ragged or malformed: {e}")
    return matrix


def forgetting_rate(record) -> EvalResult:
    """
    Peak-minus-final Dice per task over a completed run

    Args:
        record: RunRecord (or a raw T x T checkpoint-by-task Dice matrix)

    Returns:
        EvalResult with peak taken as the max over checkpoints at or after
        each task's own training
    """
    matrix = _matrix_of(record)
    if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[0] != matrix.shape[1]:
        raise StateError(f"run record incomplete: dice matrix has shape {matrix.shape}")
    n_tasks = matrix.shape[0]
    lower = np.tril(np.ones((n_tasks, n_tasks), dtype=bool))
    if not np.all(np.isfinite(matrix[lower])):
        raise StateError("run record incomplete: missing Dice entries at or after a task's training")

    final = matrix[-1]
    peak = [float(matrix[i:, i].max()) for i in range(n_tasks)]
    per_task_forgetting = [peak[i] - float(final[i]) for i in range(n_tasks - 1)]
    total = float(sum(per_task_forgetting))
    mean_percent = 100.0 * total / len(per_task_forgetting) if per_task_forgetting else 0.0
    return EvalResult(
        per_task_dice=[float(v) for v in final],
        average_dice=float(np.mean(final)),
        per_task_forgetting=per_task_forgetting,
        forgetting_total=total,
        forgetting_mean_percent=mean_percent,
        peak_dice=peak,
    )


def relative_reduction(method_forgetting: float, baseline_forgetting: float) -> Optional[float]:
    """Fractional forgetting reduction of a method against a baseline (None when the baseline is 0)"""
    if baseline_forgetting == 0:
        return None
    return (baseline_forgetting - method_forgetting) / baseline_forgetting
