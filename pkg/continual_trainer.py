"""
PA-EWC Desk Lab - Continual Trainer Module

Trains one toy model on a sequence of tasks and records the Dice of every task
after each task finishes. Three methods share one loop:

    sequential   plain fine-tuning, no penalty
    general_ewc  EWC with the raw base Fisher and one shared unit weight
    pa_ewc       prompt-aware EWC: per-task block classification, adaptive
                 Fisher and complexity-scaled group weights
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from errors import ConfigError, InputError, NumericError, StateError
from fisher_adaptive import (
    ActivationStats, FisherSnapshot, activation_stats, adaptive_fisher, adaptive_weight, base_fisher,
    group_fisher_scalars, group_gradient_norms, stability_factor, task_similarity,
)
from metrics_eval import evaluate_dice
from objectives import LossBreakdown, LossWeights, dice_loss, ewc_penalty, seg_ce, total_loss
from optimizer import AdamW
from param_classifier import ResponseMatrix, classify, probe_responses
from prompt_taxonomy import Lexicon, Vocabulary, complexity
from synth_tasks import TaskDataset, collate
from tensor_autodiff import Tape, Tensor, no_tape
from toy_model import UNASSIGNED, ParamStore, forward

logger = logging.getLogger(__name__)

METHODS = ("sequential", "general_ewc", "pa_ewc")


class TrainerState(Enum):
    """Trainer lifecycle states"""
    IDLE = "idle"
    CLASSIFYING = "classifying"
    TRAINING = "training"
    EVALUATING = "evaluating"
    SNAPSHOTTING = "snapshotting"
    FINISHED = "finished"
    ERROR = "error"


@dataclass
class TrainerConfig:
    """Training protocol for one run"""
    method: str = "pa_ewc"
    epochs_per_task: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 43
    early_stop_patience: int = 5
    fisher_samples: int = 32
    stability_batches: int = 8
    probe_samples: int = 16
    reclassify_each_task: bool = True
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "TrainerConfig":
        if self.method not in METHODS:
            raise ConfigError(f"trainer.method must be one of {METHODS}, got '{self.method}'")
        for name in ("epochs_per_task", "batch_size", "early_stop_patience", "fisher_samples", "probe_samples"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"trainer.{name} must be a positive integer, got {value!r}")
        if not isinstance(self.stability_batches, int) or self.stability_batches < 2:
            raise ConfigError("trainer.stability_batches must be an integer >= 2")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"trainer.learning_rate must be > 0, got {self.learning_rate!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("trainer.beta1 and trainer.beta2 must lie in [0, 1)")
        if self.adam_eps <= 0 or self.weight_decay < 0:
            raise ConfigError("trainer.adam_eps must be > 0 and trainer.weight_decay >= 0")
        self.loss.validate()
        return self


@dataclass
class EpochLog:
    epoch: int
    seg: float
    dice: float
    ewc: float
    total: float
    val_dice: float


@dataclass
class TrainingLog:
    """Per-task training history"""
    task_id: int
    epochs: List[EpochLog] = field(default_factory=list)
    step_totals: List[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_dice: float = 0.0
    stopped_early: bool = False
    initial_loss: Optional[LossBreakdown] = None
    final_loss: Optional[LossBreakdown] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_dice": self.best_val_dice,
            "stopped_early": self.stopped_early,
            "initial_loss": self.initial_loss.to_dict() if self.initial_loss else None,
            "final_loss": self.final_loss.to_dict() if self.final_loss else None,
        }


@dataclass
class RunRecord:
    """
    Dice trajectory of one run

    dice_matrix[k][i] is the test Dice of task order[i] after training the k-th
    task; entries with i > k are measured before that task was trained.
    """
    method: str
    seed: int
    order: List[int]
    dice_matrix: List[List[float]]
    order_name: str = "custom"
    tier: str = "comprehensive"
    config_hash: str = ""
    wall_time: float = 0.0
    logs: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def n_tasks(self) -> int:
        return len(self.order)

    @property
    def complete(self) -> bool:
        return (len(self.dice_matrix) == self.n_tasks
                and all(len(row) == self.n_tasks for row in self.dice_matrix))

    @property
    def peak(self) -> List[float]:
        matrix = np.array(self.dice_matrix)
        return [float(matrix[i:, i].max()) for i in range(len(self.dice_matrix))]

    @property
    def final(self) -> List[float]:
        if not self.dice_matrix:
            raise StateError("run record has no checkpoints")
        return list(self.dice_matrix[-1])

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RunRecord":
        return cls(**payload)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class ContinualTrainer:
    """
    Sequential multi-task trainer for the toy segmentation model

    Hooks:
        set_assignment_callback(fn(task_id, assignment, matrix))  after each classification
        set_snapshot_callback(fn(snapshot))                        after each Fisher snapshot
        set_checkpoint_callback(fn(index, task_id, dice_row))      after each post-task evaluation
    """

    def __init__(self,
                 params: ParamStore,
                 config: Optional[TrainerConfig] = None,
                 lexicon: Optional[Lexicon] = None,
                 vocab: Optional[Vocabulary] = None,
                 run_id: Optional[str] = None):
        self.params = params
        self.config = (config or TrainerConfig()).validate()
        self.lexicon = lexicon or Lexicon.default()
        self.vocab = vocab or Vocabulary.default(self.lexicon)
        self.vocab.check_fits(params.config.vocab_size)
        params.set_token_roles(self.vocab.roles(self.lexicon, params.config.vocab_size))
        self.run_id = run_id or self.config.method

        self.state = TrainerState.IDLE
        self.snapshots: List[FisherSnapshot] = []
        self.prev_stats: Optional[ActivationStats] = None
        self.c_max = 0.0
        self.logs: List[TrainingLog] = []

        self.assignment_callback: Optional[Callable[[int, Dict[str, str], ResponseMatrix], None]] = None
        self.snapshot_callback: Optional[Callable[[FisherSnapshot], None]] = None
        self.checkpoint_callback: Optional[Callable[[int, int, List[float]], None]] = None

        # Statistics
        self.tasks_trained = 0
        self.epochs_run = 0
        self.steps_taken = 0
        self.early_stops = 0
        self.classifications = 0
        self.train_seconds = 0.0

        logger.info(f"ContinualTrainer initialized: run {self.run_id}, method {self.config.method}, "
                    f"{self.config.epochs_per_task} epochs/task, lr {self.config.learning_rate}")

    def set_assignment_callback(self, callback: Callable[[int, Dict[str, str], ResponseMatrix], None]):
        self.assignment_callback = callback

    def set_snapshot_callback(self, callback: Callable[[FisherSnapshot], None]):
        self.snapshot_callback = callback

    def set_checkpoint_callback(self, callback: Callable[[int, int, List[float]], None]):
        self.checkpoint_callback = callback

    # ------------------------------------------------------------------
    # Loss
    # ------------------------------------------------------------------

    def _penalty(self) -> Tensor:
        if self.config.method == "sequential":
            return Tensor(0.0)
        return ewc_penalty(self.params, self.snapshots)

    def _batch_loss(self, items) -> LossBreakdown:
        images, masks, tokens = collate(items, self.vocab)
        logits = forward(self.params, images, tokens)
        seg = seg_ce(logits, masks)
        dice = dice_loss(logits, masks, self.config.loss.epsilon)
        return total_loss(seg, dice, self._penalty(), self.config.loss)

    def dataset_loss(self, items) -> LossBreakdown:
        """Mean loss breakdown over a list of items, without recording gradients"""
        parts = {"seg": 0.0, "dice": 0.0, "ewc": 0.0, "total": 0.0}
        size = self.config.batch_size
        batches = 0
        with no_tape():
            for start in range(0, len(items), size):
                breakdown = self._batch_loss(items[start:start + size])
                for key in parts:
                    parts[key] += getattr(breakdown, key)
                batches += 1
        return LossBreakdown(**{key: value / batches for key, value in parts.items()})

    # ------------------------------------------------------------------
    # Training
    # ------------------------------------------------------------------

    def train_task(self, task: TaskDataset) -> TrainingLog:
        """
        Minibatch AdamW on the total loss with early stopping on validation Dice

        The best-validation parameters are restored before returning.

        Raises:
            NumericError: the loss became non-finite (carries the epoch index)
        """
        if not task.train or not task.val:
            raise InputError(f"task {task.task_id} needs nonempty train and val splits")
        cfg = self.config
        self.state = TrainerState.TRAINING
        started = time.time()
        log = TrainingLog(task_id=task.task_id)
        rng = np.random.default_rng([cfg.seed, task.task_id])
        optimizer = AdamW(self.params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                          eps=cfg.adam_eps, weight_decay=cfg.weight_decay)

        log.initial_loss = self.dataset_loss(task.train)
        logger.info(f"Task {task.task_id}: training started, initial loss {log.initial_loss.total:.4f}")
        best_values = self.params.snapshot_values()
        stale = 0

        for epoch in range(cfg.epochs_per_task):
            order = rng.permutation(len(task.train))
            sums = {"seg": 0.0, "dice": 0.0, "ewc": 0.0, "total": 0.0}
            n_batches = 0
            try:
                for start in range(0, len(order), cfg.batch_size):
                    batch = [task.train[i] for i in order[start:start + cfg.batch_size]]
                    with Tape() as tape:
                        breakdown = self._batch_loss(batch)
                    grads = tape.backward(breakdown.graph, self.params)
                    optimizer.step(grads)
                    self.steps_taken += 1
                    log.step_totals.append(breakdown.total)
                    for key in sums:
                        sums[key] += getattr(breakdown, key)
                    n_batches += 1
            except NumericError as e:
                self.state = TrainerState.ERROR
                logger.error(f"Run {self.run_id}: training diverged on task {task.task_id} at epoch {epoch}: {e}")
                raise NumericError(f"run {self.run_id}, task {task.task_id}, epoch {epoch}: {e}",
                                   epoch=epoch, run_id=self.run_id) from e

            self.epochs_run += 1
            val_dice = evaluate_dice(self.params, task.val, self.vocab, cfg.batch_size)
            means = {key: value / n_batches for key, value in sums.items()}
            log.epochs.append(EpochLog(epoch=epoch, val_dice=val_dice, **means))
            logger.debug(f"Task {task.task_id} epoch {epoch}: total {means['total']:.4f} "
                         f"(seg {means['seg']:.4f}, dice {means['dice']:.4f}, ewc {means['ewc']:.4f}), "
                         f"val Dice {val_dice:.4f}")

            if val_dice > log.best_val_dice or log.best_epoch < 0:
                log.best_val_dice = val_dice
                log.best_epoch = epoch
                best_values = self.params.snapshot_values()
                stale = 0
            elif log.best_val_dice > 0:
                # Patience only runs once the task has produced any foreground overlap
                stale += 1
                if stale >= cfg.early_stop_patience:
                    log.stopped_early = True
                    self.early_stops += 1
                    logger.warning(f"Task {task.task_id}: early stop at epoch {epoch}, "
                                   f"best val Dice {log.best_val_dice:.4f} at epoch {log.best_epoch}")
                    break

        self.params.load_values(best_values)
        log.final_loss = self.dataset_loss(task.train)
        self.tasks_trained += 1
        self.train_seconds += time.time() - started
        self.logs.append(log)
        logger.info(f"Task {task.task_id}: training finished, loss {log.initial_loss.total:.4f} -> "
                    f"{log.final_loss.total:.4f}, best val Dice {log.best_val_dice:.4f}")
        return log

    def classify_blocks(self, task: TaskDataset) -> Dict[str, str]:
        """Refresh the block -> group tags from the task's probe data"""
        self.state = TrainerState.CLASSIFYING
        matrix = probe_responses(self.params, task, self.lexicon, self.config.probe_samples, self.vocab)
        assignment = classify(matrix, self.params)
        self.classifications += 1
        if self.assignment_callback:
            self.assignment_callback(task.task_id, assignment, matrix)
        return assignment

    def snapshot_task(self, task: TaskDataset) -> FisherSnapshot:
        """
        Freeze importance, anchors and weights for a task that just finished training

        general_ewc keeps the raw base Fisher under a single unit weight; pa_ewc
        combines the rescaled base Fisher with group stability, similarity to the
        previous task and the task's prompt complexity.
        """
        cfg = self.config
        if cfg.method == "sequential":
            raise StateError("sequential training keeps no Fisher snapshots")
        self.state = TrainerState.SNAPSHOTTING
        anchor = self.params.snapshot_values()
        score = complexity(task.prompts("train"), self.lexicon).value
        self.c_max = max(self.c_max, score)

        if cfg.method == "general_ewc":
            fisher = base_fisher(self.params, task, cfg.fisher_samples, self.vocab, rescale=False)
            snapshot = FisherSnapshot(
                task_id=task.task_id, per_block_fisher=fisher, anchor=anchor,
                group_of={name: UNASSIGNED for name in self.params.names},
                group_weight={UNASSIGNED: 1.0}, stability={}, similarity=1.0,
                complexity=score, method=cfg.method,
            )
        else:
            base = base_fisher(self.params, task, cfg.fisher_samples, self.vocab)
            norms = group_gradient_norms(self.params, task, cfg.stability_batches, cfg.batch_size, self.vocab)
            stability = stability_factor(norms)
            current = activation_stats(self.params, task, self.vocab)
            similarity = 1.0 if self.prev_stats is None else task_similarity(self.prev_stats, current)
            self.prev_stats = current
            group_of = dict(self.params.group_of)
            fisher = adaptive_fisher(base, stability, similarity, group_of)
            weights = {group: adaptive_weight(value, score, self.c_max)
                       for group, value in group_fisher_scalars(fisher, group_of).items()}
            snapshot = FisherSnapshot(
                task_id=task.task_id, per_block_fisher=fisher, anchor=anchor, group_of=group_of,
                group_weight=weights, stability=stability, similarity=similarity,
                complexity=score, method=cfg.method, activation=current,
            )

        logger.info(f"Task {task.task_id}: snapshot taken (similarity {snapshot.similarity:.4f}, "
                    f"complexity {score:.2f}, C_max {self.c_max:.2f}, weights "
                    f"{ {g: round(w, 4) for g, w in snapshot.group_weight.items()} })")
        if self.snapshot_callback:
            self.snapshot_callback(snapshot)
        return snapshot

    def evaluate_all(self, tasks: Sequence[TaskDataset]) -> List[float]:
        self.state = TrainerState.EVALUATING
        return [evaluate_dice(self.params, task.test, self.vocab, self.config.batch_size) for task in tasks]

    def run_sequence(self, tasks: Sequence[TaskDataset], order_name: str = "custom",
                     config_hash: str = "") -> RunRecord:
        """
        Train every task in order, evaluating all tasks after each one

        Returns:
            Complete RunRecord with a T x T Dice matrix
        """
        if len(tasks) < 2:
            raise InputError(f"a task sequence needs at least 2 tasks, got {len(tasks)}")
        cfg = self.config
        started = time.time()
        matrix: List[List[float]] = []
        try:
            for index, task in enumerate(tasks):
                if cfg.method == "pa_ewc" and (index == 0 or cfg.reclassify_each_task):
                    self.classify_blocks(task)
                self.train_task(task)
                row = self.evaluate_all(tasks)
                matrix.append(row)
                logger.info(f"Checkpoint {index} (task {task.task_id}): test Dice "
                            f"{', '.join(f'{d:.3f}' for d in row)}")
                if self.checkpoint_callback:
                    self.checkpoint_callback(index, task.task_id, row)
                if cfg.method != "sequential":
                    self.snapshots.append(self.snapshot_task(task))
        except Exception as e:
            self.state = TrainerState.ERROR
            logger.error(f"Run {self.run_id} failed: {e}")
            raise

        self.state = TrainerState.FINISHED
        return RunRecord(
            method=cfg.method,
            seed=cfg.seed,
            order=[task.task_id for task in tasks],
            dice_matrix=matrix,
            order_name=order_name,
            tier=tasks[0].tier,
            config_hash=config_hash,
            wall_time=time.time() - started,
            logs=[log.to_dict() for log in self.logs],
        )

    def get_training_stats(self) -> Dict[str, Any]:
        """Get trainer statistics"""
        return {
            "run_id": self.run_id,
            "method": self.config.method,
            "state": self.state.value,
            "tasks_trained": self.tasks_trained,
            "epochs_run": self.epochs_run,
            "steps_taken": self.steps_taken,
            "early_stops": self.early_stops,
            "classifications": self.classifications,
            "snapshots": len(self.snapshots),
            "c_max": self.c_max,
            "train_seconds": self.train_seconds,
        }
