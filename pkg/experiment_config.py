"""
PA-EWC Desk Lab - Experiment Configuration

YAML experiment files describe a grid of runs (method x order x prompt tier x
seed) plus the model, trainer and task settings shared by every run.

Schema (every key optional except methods/orders):

    methods: [sequential, general_ewc, pa_ewc]
    orders: [order_A]
    prompt_tiers: [comprehensive]        # basic | visual | spatial | medical | comprehensive | adaptive
    seeds: [43]
    output_dir: runs                     # relative to $PAEWC_OUTPUT_ROOT when that is set
    lexicon: null                        # optional lexicon text file
    model:   {image_size, channels, patch_size, embed_dim, vocab_size, n_heads}
    trainer: {epochs_per_task, batch_size, learning_rate, beta1, beta2, adam_eps, weight_decay,
              early_stop_patience, fisher_samples, stability_batches, probe_samples,
              reclassify_each_task, loss: {w_seg, w_dice, w_ewc, epsilon}}
    tasks:   {n_train, n_val, n_test, noise_sigma}

Unknown keys are rejected with the line they appear on.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import yaml

from continual_trainer import METHODS, TrainerConfig
from errors import ConfigError
from objectives import LossWeights
from prompt_taxonomy import TIER_SETTINGS
from synth_tasks import TASK_ORDERS, TaskSettings
from toy_model import ModelConfig

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PAEWC_OUTPUT_ROOT"
GRID_OWNED = {"method": "methods", "seed": "seeds"}


@dataclass(frozen=True)
class RunCell:
    """One point of the experiment grid"""
    method: str
    order: str
    tier: str
    seed: int

    @property
    def run_id(self) -> str:
        return f"{self.method}__{self.order}__{self.tier}__seed{self.seed}"


@dataclass
class ExperimentConfig:
    """Experiment grid plus shared component settings"""
    methods: List[str] = field(default_factory=lambda: ["sequential", "pa_ewc"])
    orders: List[str] = field(default_factory=lambda: ["order_A"])
    prompt_tiers: List[str] = field(default_factory=lambda: ["comprehensive"])
    seeds: List[int] = field(default_factory=lambda: [43])
    output_dir: str = "runs"
    lexicon: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    tasks: TaskSettings = field(default_factory=TaskSettings)

    def validate(self) -> "ExperimentConfig":
        for name, allowed in (("methods", METHODS), ("orders", tuple(TASK_ORDERS)), ("prompt_tiers", TIER_SETTINGS)):
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"{name} must be a nonempty list")
            unknown = [v for v in values if v not in allowed]
            if unknown:
                raise ConfigError(f"{name} has unknown entries {unknown}; allowed: {list(allowed)}")
            if len(set(values)) != len(values):
                raise ConfigError(f"{name} contains duplicates")
        if not self.seeds or any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of non-negative integers")
        self.model.validate()
        self.trainer.validate()
        self.tasks.validate()
        return self

    def grid(self) -> Iterator[RunCell]:
        for method in self.methods:
            for order in self.orders:
                for tier in self.prompt_tiers:
                    for seed in self.seeds:
                        yield RunCell(method, order, tier, seed)

    def trainer_for(self, cell: RunCell) -> TrainerConfig:
        return replace(self.trainer, method=cell.method, seed=cell.seed, loss=replace(self.trainer.loss))

    def resolved_output_dir(self) -> Path:
        path = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not path.is_absolute():
            path = Path(root) / path
        return path

    def run_payload(self, cell: RunCell) -> Dict[str, Any]:
        """Everything that determines one run's results"""
        return {
            "cell": asdict(cell),
            "order_ids": list(TASK_ORDERS[cell.order]),
            "model": asdict(self.model),
            "trainer": asdict(self.trainer_for(cell)),
            "tasks": asdict(self.tasks),
            "lexicon": _lexicon_text(self.lexicon),
        }

    def config_hash(self, cell: RunCell) -> str:
        canonical = json.dumps(self.run_payload(cell), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _lexicon_text(path: Optional[str]) -> Optional[str]:
    if path is None:
        return None
    return Path(path).read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# YAML loading
# ---------------------------------------------------------------------------

def _key_lines(node, prefix: str = "") -> Dict[str, int]:
    """Map dotted key paths to 1-based source lines from a composed YAML node"""
    lines: Dict[str, int] = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}{key_node.value}"
            lines[path] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, f"{path}."))
    return lines


def _coerce(value: Any, default: Any, path: str, line: Optional[int]) -> Any:
    """Coerce a YAML scalar to the type of the dataclass default"""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false, got {value!r}", line=line)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}", line=line)
        return value
    if isinstance(default, float) or (default is None and path.endswith("noise_sigma")):
        if value is None and default is None:
            return None
        if isinstance(value, bool):
            raise ConfigError(f"{path} must be a number, got {value!r}", line=line)
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path} must be a number, got {value!r}", line=line)
    return value


def _build(cls, data: Any, section: str, lines: Dict[str, int], nested: Optional[Dict[str, Any]] = None,
           forbidden: Optional[Dict[str, str]] = None):
    """Instantiate a dataclass from a YAML mapping with strict key checking"""
    line = lines.get(section)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be a mapping", line=line)
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{section}.{key}"
        key_line = lines.get(path)
        if forbidden and key in forbidden:
            raise ConfigError(f"{path} is set by the top-level '{forbidden[key]}' list", line=key_line)
        if key not in known:
            raise ConfigError(f"unknown key '{path}'", line=key_line)
        if nested and key in nested:
            kwargs[key] = _build(nested[key], value, path, lines)
        else:
            kwargs[key] = _coerce(value, getattr(defaults, key), path, key_line)
    instance = cls(**kwargs)
    try:
        instance.validate()
    except ConfigError as e:
        if e.line is None:
            raise ConfigError(str(e), line=line)
        raise
    return instance


TOP_LEVEL_LISTS = ("methods", "orders", "prompt_tiers", "seeds")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate experiment YAML text"""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(e, 'problem', e)}", line=mark.line + 1 if mark else None)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be a YAML mapping", line=1)
    lines = _key_lines(root)
    known = {f.name for f in fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{key}'", line=lines.get(key))

    kwargs: Dict[str, Any] = {}
    for key in TOP_LEVEL_LISTS:
        if key in data:
            value = data[key]
            if isinstance(value, (str, int)) and not isinstance(value, bool):
                value = [value]
            if not isinstance(value, list):
                raise ConfigError(f"{key} must be a list", line=lines.get(key))
            kwargs[key] = value
    for key in ("output_dir", "lexicon"):
        if key in data:
            if data[key] is not None and not isinstance(data[key], str):
                raise ConfigError(f"{key} must be a string", line=lines.get(key))
            kwargs[key] = data[key]
    if "model" in data:
        kwargs["model"] = _build(ModelConfig, data["model"], "model", lines)
    if "trainer" in data:
        kwargs["trainer"] = _build(TrainerConfig, data["trainer"], "trainer", lines,
                                   nested={"loss": LossWeights}, forbidden=GRID_OWNED)
    if "tasks" in data:
        kwargs["tasks"] = _build(TaskSettings, data["tasks"], "tasks", lines)

    config = ExperimentConfig(**kwargs)
    try:
        config.validate()
    except ConfigError as e:
        if e.line is not None:
            raise
        anchor = next((lines[k] for k in TOP_LEVEL_LISTS if k in lines and str(e).startswith(k)), None)
        raise ConfigError(str(e), line=anchor)
    if config.lexicon is not None and not Path(config.lexicon).is_file():
        raise ConfigError(f"lexicon file not found: {config.lexicon}", line=lines.get("lexicon"))
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    config = parse_config(path.read_text(encoding="utf-8"))
    logger.info(f"Experiment config loaded from {path}: {len(list(config.grid()))} runs")
    return config
