"""
PA-EWC Desk Lab - Adaptive Fisher Module

Per-task importance estimates for the EWC penalty:

    base Fisher      mean squared gradient of the ground-truth log-likelihood,
                     rescaled so its largest entry is 1000
    stability S_m    1 / (1 + exp(Var)) of per-minibatch gradient norms of group m
    similarity A     mean over probe layers of 1 / (1 + |d mu| + |d sigma|)
    adaptive Fisher  F_base * S_m * A
    group weight     mean adaptive Fisher of the group * (1 + C_i / C_max)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import InputError
from objectives import seg_ce
from prompt_taxonomy import Vocabulary
from synth_tasks import collate
from tensor_autodiff import Tape, no_tape
from toy_model import ACTIVATION_LAYERS, ParamStore, forward

logger = logging.getLogger(__name__)

FISHER_SCALE = 1000.0


@dataclass
class ActivationStats:
    """(mean, std) of each designated layer's outputs over a probe batch"""
    per_layer: Tuple[Tuple[float, float], ...]
    layers: Tuple[str, ...] = ACTIVATION_LAYERS

    @classmethod
    def from_layer_outputs(cls, outputs: Sequence[np.ndarray], layers: Optional[Sequence[str]] = None):
        stats = []
        for values in outputs:
            values = np.asarray(values, dtype=np.float64)
            if values.size == 0:
                raise InputError("cannot summarise an empty layer output")
            stats.append((float(values.mean()), float(values.std())))
        names = tuple(layers) if layers is not None else tuple(f"layer{i}" for i in range(len(stats)))
        return cls(per_layer=tuple(stats), layers=names)

    def to_dict(self) -> Dict[str, List[float]]:
        return {name: [mu, sigma] for name, (mu, sigma) in zip(self.layers, self.per_layer)}


@dataclass
class FisherSnapshot:
    """
    Frozen state of one finished task used by the EWC penalty

    Anchors and Fisher arrays are stored as read-only copies, and the group tags
    and weights active at this task travel with them.
    """
    task_id: int
    per_block_fisher: Dict[str, np.ndarray]
    anchor: Dict[str, np.ndarray]
    group_of: Dict[str, str]
    group_weight: Dict[str, float]
    stability: Dict[str, float]
    similarity: float
    complexity: float
    method: str = "pa_ewc"
    activation: Optional[ActivationStats] = None
    extra: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.per_block_fisher = {name: _frozen(value) for name, value in self.per_block_fisher.items()}
        self.anchor = {name: _frozen(value) for name, value in self.anchor.items()}


def _frozen(values: np.ndarray) -> np.ndarray:
    array = np.array(values, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def _items(data, n_samples: Optional[int] = None) -> list:
    items = list(data.train if hasattr(data, "train") else data)
    if not items:
        raise InputError("dataset is empty")
    if n_samples is not None:
        if n_samples < 1:
            raise InputError(f"n_samples must be >= 1, got {n_samples}")
        items = items[:n_samples]
    return items


def empirical_fisher(grad_samples: Sequence[Mapping[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Mean over samples of the elementwise squared gradients"""
    if not grad_samples:
        raise InputError("no gradient samples")
    fisher = {name: np.zeros_like(g, dtype=np.float64) for name, g in grad_samples[0].items()}
    for grads in grad_samples:
        for name, g in grads.items():
            fisher[name] += np.square(g)
    return {name: total / len(grad_samples) for name, total in fisher.items()}


def rescale_fisher(fisher: Mapping[str, np.ndarray], target: float = FISHER_SCALE) -> Dict[str, np.ndarray]:
    """Scale every block so the global maximum entry equals `target` (no-op when all zero)"""
    peak = max((float(v.max()) for v in fisher.values() if v.size), default=0.0)
    if peak <= 0.0:
        return {name: np.array(v, dtype=np.float64) for name, v in fisher.items()}
    return {name: v * (target / peak) for name, v in fisher.items()}


def base_fisher(params: ParamStore,
                data,
                n_samples: int = 32,
                vocab: Optional[Vocabulary] = None,
                rescale: bool = True,
                loss_scale: float = 1.0) -> Dict[str, np.ndarray]:
    """
    Empirical diagonal Fisher of the segmentation log-likelihood

    Args:
        params: converged parameters (left unchanged)
        data: TaskDataset (train split) or a sequence of TaskItems
        n_samples: number of items, each contributing one squared gradient
        vocab: token map for the model input
        rescale: pin the maximum entry to 1000 (False keeps raw values)
        loss_scale: multiplies the per-sample loss before differentiation

    Returns:
        {block name -> nonnegative array shaped like the block}
    """
    items = _items(data, n_samples)
    vocab = vocab or Vocabulary.default()
    samples = []
    for item in items:
        with Tape() as tape:
            logits = forward(params, item.image[None], [vocab.encode(item.prompt.text)])
            loss = seg_ce(logits, item.mask[None].astype(np.float64)) * loss_scale
        samples.append(tape.backward(loss, params))
    fisher = empirical_fisher(samples)
    if rescale:
        fisher = rescale_fisher(fisher)
    return fisher


def group_gradient_norms(params: ParamStore,
                         data,
                         n_batches: int = 8,
                         batch_size: int = 16,
                         vocab: Optional[Vocabulary] = None) -> Dict[str, List[float]]:
    """
    Per-group gradient L2 norm on each of `n_batches` consecutive train minibatches

    Minibatches walk the train split in order and wrap around, so no random
    stream is consumed.
    """
    items = _items(data)
    vocab = vocab or Vocabulary.default()
    groups = sorted(set(params.group_of.values()))
    norms: Dict[str, List[float]] = {group: [] for group in groups}
    for k in range(n_batches):
        batch = [items[(k * batch_size + j) % len(items)] for j in range(batch_size)]
        images, masks, tokens = collate(batch, vocab)
        with Tape() as tape:
            loss = seg_ce(forward(params, images, tokens), masks)
        grads = tape.backward(loss, params)
        for group in groups:
            squared = sum(float(np.sum(np.square(grads[name]))) for name in params.blocks_in(group))
            norms[group].append(math.sqrt(squared))
    return norms


def stability_factor(norm_samples: Mapping[str, Sequence[float]]) -> Dict[str, float]:
    """S_m = 1 / (1 + exp(Var_m)) with Var_m the population variance of the group's norm samples"""
    stability = {}
    for group, samples in norm_samples.items():
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size < 2:
            raise InputError(f"stability for group '{group}' needs at least 2 gradient samples, got {samples.size}")
        variance = float(np.var(samples))
        tail = math.exp(-variance)
        stability[group] = tail / (1.0 + tail)
    return stability


def activation_stats(params: ParamStore, probe, vocab: Optional[Vocabulary] = None) -> ActivationStats:
    """Mean and population std of every designated layer over the probe batch"""
    items = list(probe.probe if hasattr(probe, "probe") else probe)
    if not items:
        raise InputError("probe set is empty")
    vocab = vocab or Vocabulary.default()
    images, _, tokens = collate(items, vocab)
    outputs: Dict[str, np.ndarray] = {}
    with no_tape():
        forward(params, images, tokens, activations=outputs)
    return ActivationStats.from_layer_outputs([outputs[name] for name in ACTIVATION_LAYERS], ACTIVATION_LAYERS)


def task_similarity(prev: ActivationStats, cur: ActivationStats) -> float:
    """A = mean over layers of 1 / (1 + |mu_prev - mu_cur| + |sigma_prev - sigma_cur|), in (0, 1]"""
    if len(prev.per_layer) != len(cur.per_layer):
        raise InputError(f"activation stats cover {len(prev.per_layer)} vs {len(cur.per_layer)} layers")
    if not prev.per_layer:
        raise InputError("activation stats are empty")
    terms = [1.0 / (1.0 + abs(mu_a - mu_b) + abs(sd_a - sd_b))
             for (mu_a, sd_a), (mu_b, sd_b) in zip(prev.per_layer, cur.per_layer)]
    return float(sum(terms) / len(terms))


def adaptive_fisher(base: Mapping[str, np.ndarray],
                    stability: Mapping[str, float],
                    similarity: float,
                    group_of: Mapping[str, str]) -> Dict[str, np.ndarray]:
    """F_m = F_base,m * S_m * A for every block of group m"""
    return {name: values * stability[group_of[name]] * similarity for name, values in base.items()}


def group_fisher_scalars(fisher: Mapping[str, np.ndarray], group_of: Mapping[str, str]) -> Dict[str, float]:
    """Mean Fisher entry per group (groups without blocks are omitted)"""
    totals: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for name, values in fisher.items():
        group = group_of[name]
        totals[group] = totals.get(group, 0.0) + float(values.sum())
        counts[group] = counts.get(group, 0) + values.size
    return {group: totals[group] / counts[group] for group in totals if counts[group]}


def adaptive_weight(fisher_group_scalar: float, complexity: float, c_max: float) -> float:
    """w = fisher_group_scalar * (1 + C_i / C_max)"""
    if c_max <= 0:
        raise InputError(f"C_max must be > 0, got {c_max}")
    if complexity < 0:
        raise InputError(f"complexity must be >= 0, got {complexity}")
    return fisher_group_scalar * (1.0 + complexity / c_max)
