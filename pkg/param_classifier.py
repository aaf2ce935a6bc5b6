"""
PA-EWC Desk Lab - Parameter Classifier Module

Assigns every parameter block to the visual, spatial or medical group by
measuring how much of the block's gradient each core prompt category accounts
for on the probe prompts.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from errors import ClassificationError, InputError
from objectives import seg_ce
from prompt_taxonomy import (CORE_CATEGORIES, Lexicon, Vocabulary, category_phrases, generate_prompt, tokenize,
                             without_category)
from tensor_autodiff import Tape
from toy_model import GROUPS, ParamStore, forward

logger = logging.getLogger(__name__)


@dataclass
class ResponseMatrix:
    """Mean gradient response per (block, prompt category)"""
    rows: Tuple[str, ...]
    values: np.ndarray  # [n_blocks, 3]
    cols: Tuple[str, ...] = CORE_CATEGORIES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise InputError(f"response matrix shape {self.values.shape} does not match "
                             f"{len(self.rows)} blocks x {len(self.cols)} categories")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise InputError("response matrix entries must be finite and >= 0")

    def scaled(self, factor: float) -> "ResponseMatrix":
        return ResponseMatrix(self.rows, self.values * factor, self.cols)

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {block: dict(zip(self.cols, map(float, self.values[i]))) for i, block in enumerate(self.rows)}


RESPONSE_MODES = ("contrast", "tier")


def _block_grads(params: ParamStore, item, tokens, vocab: Vocabulary) -> Dict[str, np.ndarray]:
    with Tape() as tape:
        logits = forward(params, item.image[None], [vocab.encode(tokens)])
        loss = seg_ce(logits, item.mask[None].astype(np.float64))
    return tape.backward(loss, params)


def probe_responses(params: ParamStore,
                    probe,
                    lexicon: Optional[Lexicon] = None,
                    n_samples: int = 16,
                    vocab: Optional[Vocabulary] = None,
                    mode: str = "contrast") -> ResponseMatrix:
    """
    Gradient-response magnitude of every block under each core prompt category

    In "contrast" mode (default) the response of a block to a category is the
    mean ||g(comprehensive) - g(comprehensive without that category's phrase)||,
    i.e. how much of the block's gradient the category's words account for.
    "tier" mode rewrites each item as a single-category prompt and averages the
    raw ||g||; that measure tracks prompt length more than content.

    Args:
        params: model parameters (left unchanged)
        probe: TaskDataset (its probe subset is used) or a sequence of TaskItems
        lexicon: vocabulary used to sanity-check the prompt rewrites
        n_samples: number of probe items to use
        vocab: token map for the model input
        mode: "contrast" or "tier"

    Returns:
        ResponseMatrix of per-sample means over the probe items
    """
    if mode not in RESPONSE_MODES:
        raise InputError(f"unknown response mode '{mode}', expected one of {RESPONSE_MODES}")
    items = list(probe.probe if hasattr(probe, "probe") else probe)
    if not items:
        raise InputError("probe set is empty")
    if n_samples < 1:
        raise InputError(f"n_samples must be >= 1, got {n_samples}")
    lexicon = lexicon or Lexicon.default()
    vocab = vocab or Vocabulary.default(lexicon)
    items = items[:n_samples]
    names = params.names

    values = np.zeros((len(names), len(CORE_CATEGORIES)))
    missed = {category: 0 for category in CORE_CATEGORIES}
    for item in items:
        task_id = item.prompt.task_id
        full = None
        if mode == "contrast":
            full = _block_grads(params, item, generate_prompt("comprehensive", task_id, attributes=item.attributes).text, vocab)
        for col, category in enumerate(CORE_CATEGORIES):
            if mode == "contrast":
                removed = tokenize(category_phrases(task_id, item.attributes)[category])
                if lexicon.counts(removed)[col] == 0:
                    missed[category] += 1
                grads = _block_grads(params, item, without_category(category, task_id, item.attributes).text, vocab)
                for row, name in enumerate(names):
                    values[row, col] += float(np.linalg.norm(full[name] - grads[name]))
            else:
                prompt = generate_prompt(category, task_id, attributes=item.attributes)
                if lexicon.counts(prompt.text)[col] == 0:
                    missed[category] += 1
                grads = _block_grads(params, item, prompt.text, vocab)
                for row, name in enumerate(names):
                    values[row, col] += float(np.linalg.norm(grads[name]))
    for category, count in missed.items():
        if count:
            logger.warning(f"{count}/{len(items)} {category} probe phrases contain no {category} lexicon term")
    values /= len(items)
    logger.debug(f"Probe responses ({mode}) measured over {len(items)} samples for {len(names)} blocks")
    return ResponseMatrix(tuple(names), values)


def classify(matrix: ResponseMatrix, params: Optional[ParamStore] = None) -> Dict[str, str]:
    """
    Assign each block to the category with the largest response

    Ties resolve in the order visual, spatial, medical. When params is given the
    assignment is written into params.group_of.

    Raises:
        ClassificationError: a block has zero response under every category
    """
    assignment: Dict[str, str] = {}
    for i, block in enumerate(matrix.rows):
        row = matrix.values[i]
        if not np.any(row > 0):
            logger.error(f"Classification failed: block {block} has an all-zero response row")
            raise ClassificationError(block)
        assignment[block] = matrix.cols[int(np.argmax(row))]
    if params is not None:
        params.assign_groups(assignment)
    counts = {group: sum(1 for g in assignment.values() if g == group) for group in GROUPS}
    logger.info(f"Blocks classified: {counts}")
    return assignment


def save_assignment(path: Union[str, Path], assignment: Dict[str, str],
                    task_id: Optional[int] = None, matrix: Optional[ResponseMatrix] = None) -> Path:
    """Write {block -> group} (plus the response matrix when given) as sorted-key JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"task_id": task_id, "assignment": assignment}
    if matrix is not None:
        payload["responses"] = matrix.to_dict()
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
