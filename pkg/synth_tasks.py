"""
PA-EWC Desk Lab - Synthetic Segmentation Tasks

Five desk-scale task families stand in for five imaging modalities. Each task
renders one object per image with OpenCV (filled shapes on a background), adds
Gaussian pixel noise and emits the exact binary mask plus a prompt whose visual
and spatial words describe the object actually drawn.

Every item draws from its own generator seeded with (seed, task_id, split, index),
so splits never share a random stream and generation order does not matter.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from errors import ConfigError, InputError
from prompt_taxonomy import (
    TASK_PHRASES, TIER_SETTINGS, PromptAttributes, PromptSpec, Vocabulary, generate_prompt, resolve_tier,
)

logger = logging.getLogger(__name__)

FAMILIES = ("blob", "ring", "box", "stripe", "crescent")
SPLITS = ("train", "val", "test")
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
ALL_CELLS = tuple((row, col) for row in range(3) for col in range(3))
PROBE_SIZE = 16


@dataclass(frozen=True)
class ColorOption:
    """Named object color with per-channel RGB intensity bounds in [0, 1]"""
    name: str
    low: Tuple[float, float, float]
    high: Tuple[float, float, float]


@dataclass(frozen=True)
class TaskSpec:
    """Generative parameters of one synthetic task"""
    task_id: int
    family: str
    colors: Tuple[ColorOption, ...]
    background: Tuple[float, float, float]
    size_range: Tuple[float, float]  # object radius as a fraction of the image side
    position_grid: Tuple[Tuple[int, int], ...] = ALL_CELLS
    noise_sigma: float = 0.05
    n_train: int = 256
    n_val: int = 64
    n_test: int = 64

    @property
    def noun(self) -> str:
        return TASK_PHRASES[self.task_id].noun

    @property
    def definition(self) -> str:
        return TASK_PHRASES[self.task_id].definition

    @property
    def adaptive_tier(self) -> str:
        return TASK_PHRASES[self.task_id].preferred_tier

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def validate(self, image_size: int = 32) -> "TaskSpec":
        if self.family not in FAMILIES:
            raise ConfigError(f"task {self.task_id}: unknown family '{self.family}'")
        if self.task_id not in TASK_PHRASES:
            raise ConfigError(f"task {self.task_id}: no prompt phrases registered")
        if not self.colors:
            raise ConfigError(f"task {self.task_id}: color profile is empty")
        if not self.position_grid or any(cell not in ALL_CELLS for cell in self.position_grid):
            raise ConfigError(f"task {self.task_id}: position grid must be a nonempty subset of the 3x3 cells")
        if self.noise_sigma < 0:
            raise ConfigError(f"task {self.task_id}: noise_sigma must be >= 0")
        for split in SPLITS:
            if self.split_size(split) < 1:
                raise ConfigError(f"task {self.task_id}: n_{split} must be >= 1")
        low, high = self.size_range
        if not 0.0 < low <= high:
            raise ConfigError(f"task {self.task_id}: size_range {self.size_range} must satisfy 0 < low <= high")
        if 2 * radius_pixels(high, image_size) > image_size // 2:
            raise ConfigError(
                f"task {self.task_id}: size_range {self.size_range} does not fit a {image_size}x{image_size} image"
            )
        return self


@dataclass
class TaskSettings:
    """Split sizes and noise overrides applied to every task of a suite"""
    n_train: int = 256
    n_val: int = 64
    n_test: int = 64
    noise_sigma: Optional[float] = None

    def validate(self) -> "TaskSettings":
        for name in ("n_train", "n_val", "n_test"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"tasks.{name} must be a positive integer, got {value!r}")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ConfigError("tasks.noise_sigma must be >= 0")
        return self

    def apply(self, spec: TaskSpec) -> TaskSpec:
        noise = spec.noise_sigma if self.noise_sigma is None else self.noise_sigma
        return TaskSpec(spec.task_id, spec.family, spec.colors, spec.background, spec.size_range,
                        spec.position_grid, noise, self.n_train, self.n_val, self.n_test)


@dataclass
class TaskItem:
    image: np.ndarray  # [C, H, W] float64 in [0, 1]
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    prompt: PromptSpec
    attributes: PromptAttributes


@dataclass
class TaskDataset:
    """Realized (image, mask, prompt) triples of one task at one prompt-tier setting"""
    spec: TaskSpec
    tier: str
    seed: int
    train: List[TaskItem] = field(default_factory=list)
    val: List[TaskItem] = field(default_factory=list)
    test: List[TaskItem] = field(default_factory=list)

    @property
    def task_id(self) -> int:
        return self.spec.task_id

    @property
    def probe(self) -> List[TaskItem]:
        """Fixed subset of train used for classification and activation statistics"""
        return self.train[:PROBE_SIZE]

    def split(self, name: str) -> List[TaskItem]:
        if name not in SPLITS:
            raise InputError(f"unknown split '{name}'")
        return getattr(self, name)

    def prompts(self, split: str = "train") -> List[PromptSpec]:
        return [item.prompt for item in self.split(split)]


def radius_pixels(fraction: float, image_size: int) -> int:
    return max(2, int(round(fraction * image_size)))


def size_bucket(fraction: float, size_range: Tuple[float, float]) -> str:
    low, high = size_range
    if high == low:
        return "medium"
    third = (high - low) / 3.0
    if fraction < low + third:
        return "small"
    if fraction < low + 2 * third:
        return "medium"
    return "large"


def centroid_cell(mask: np.ndarray) -> Tuple[int, int]:
    """3x3 grid cell (row, col) containing the mask's centroid"""
    rows, cols = np.nonzero(mask)
    height, width = mask.shape
    row = min(2, int(rows.mean() * 3 // height))
    col = min(2, int(cols.mean() * 3 // width))
    return row, col


def draw_mask(family: str, size: int, center: Tuple[int, int], radius: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterise one object of the given family into a {0,1} uint8 mask"""
    mask = np.zeros((size, size), np.uint8)
    if family == "blob":
        cv2.circle(mask, center, radius, 1, thickness=-1)
    elif family == "ring":
        thickness = max(1, radius // 3)
        cv2.circle(mask, center, radius, 1, thickness=thickness)
    elif family == "box":
        half_height = max(1, int(round(radius * 0.7)))
        cv2.rectangle(mask, (center[0] - radius, center[1] - half_height),
                      (center[0] + radius, center[1] + half_height), 1, thickness=-1)
    elif family == "stripe":
        angle = float(rng.uniform(0.0, 180.0))
        cv2.ellipse(mask, center, (radius, max(1, radius // 3)), angle, 0, 360, 1, thickness=-1)
    elif family == "crescent":
        cv2.circle(mask, center, radius, 1, thickness=-1)
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        offset = max(1, radius // 2)
        bite = np.zeros_like(mask)
        bite_center = (int(round(center[0] + offset * math.cos(theta))),
                       int(round(center[1] + offset * math.sin(theta))))
        cv2.circle(bite, bite_center, radius, 1, thickness=-1)
        mask[bite > 0] = 0
    else:
        raise ConfigError(f"unknown family '{family}'")
    return mask


def render_item(spec: TaskSpec, tier: str, rng: np.random.Generator,
                image_size: int = 32, channels: int = 3) -> TaskItem:
    """Draw one (image, mask, prompt) triple from the task distribution"""
    fraction = float(rng.uniform(*spec.size_range))
    radius = radius_pixels(fraction, image_size)
    row, col = spec.position_grid[int(rng.integers(len(spec.position_grid)))]
    cell = image_size / 3.0
    cx = int(np.clip((col + rng.uniform(0.3, 0.7)) * cell, 0, image_size - 1))
    cy = int(np.clip((row + rng.uniform(0.3, 0.7)) * cell, 0, image_size - 1))
    mask = draw_mask(spec.family, image_size, (cx, cy), radius, rng)
    if not mask.any():
        # Degenerate raster; fall back to a filled disc at the same spot
        cv2.circle(mask, (cx, cy), radius, 1, thickness=-1)

    color = spec.colors[int(rng.integers(len(spec.colors)))]
    rgb = rng.uniform(color.low, color.high)
    image = np.empty((channels, image_size, image_size))
    for c in range(channels):
        image[c] = np.where(mask > 0, rgb[c % 3], spec.background[c % 3])
    image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)

    attributes = PromptAttributes(size=size_bucket(fraction, spec.size_range), color=color.name,
                                  position=centroid_cell(mask))
    prompt = generate_prompt(tier, spec.task_id, attributes=attributes)
    return TaskItem(image=image, mask=mask, prompt=prompt, attributes=attributes)


def make_task(spec: TaskSpec, tier: str, seed: int, image_size: int = 32, channels: int = 3) -> TaskDataset:
    """
    Generate the train/val/test splits of one task

    Args:
        spec: task generative parameters
        tier: prompt tier, or "adaptive" for the task's preferred tier
        seed: base seed; each item derives its own stream from it
        image_size: pixels per side
        channels: image channels

    Returns:
        TaskDataset whose splits are a pure function of (spec, tier, seed, image_size, channels)
    """
    spec.validate(image_size)
    if tier not in TIER_SETTINGS:
        raise InputError(f"unknown prompt tier '{tier}'")
    resolved = resolve_tier(tier, spec.task_id)

    dataset = TaskDataset(spec=spec, tier=tier, seed=seed)
    for split in SPLITS:
        items = []
        for index in range(spec.split_size(split)):
            rng = np.random.default_rng([seed, spec.task_id, SPLIT_CODES[split], index])
            items.append(render_item(spec, resolved, rng, image_size, channels))
        setattr(dataset, split, items)
    logger.debug(f"Task {spec.task_id} ({spec.family}, tier {resolved}) generated: "
                 f"{len(dataset.train)}/{len(dataset.val)}/{len(dataset.test)} items")
    return dataset


def _spec(task_id, family, colors, background, size_range, noise_sigma=0.05) -> TaskSpec:
    return TaskSpec(task_id=task_id, family=family, colors=colors, background=background,
                    size_range=size_range, noise_sigma=noise_sigma)


DEFAULT_SPECS: Tuple[TaskSpec, ...] = (
    _spec(1, "blob", (ColorOption("pink", (0.95, 0.55, 0.65), (1.0, 0.7, 0.8)),
                      ColorOption("red", (0.8, 0.1, 0.1), (0.95, 0.25, 0.25))),
          (0.45, 0.2, 0.2), (0.08, 0.2)),
    _spec(2, "crescent", (ColorOption("brown", (0.35, 0.2, 0.1), (0.5, 0.3, 0.15)),
                          ColorOption("dark", (0.1, 0.05, 0.05), (0.2, 0.12, 0.1))),
          (0.85, 0.7, 0.6), (0.12, 0.22)),
    _spec(3, "stripe", (ColorOption("bright", (0.7, 0.7, 0.7), (0.85, 0.85, 0.85)),
                        ColorOption("white", (0.9, 0.9, 0.9), (1.0, 1.0, 1.0))),
          (0.2, 0.2, 0.2), (0.12, 0.24)),
    _spec(4, "box", (ColorOption("dark", (0.15, 0.15, 0.15), (0.25, 0.25, 0.25)),
                     ColorOption("gray", (0.3, 0.3, 0.3), (0.4, 0.4, 0.4))),
          (0.5, 0.5, 0.5), (0.08, 0.18), noise_sigma=0.08),
    _spec(5, "ring", (ColorOption("gray", (0.45, 0.45, 0.5), (0.6, 0.6, 0.65)),
                      ColorOption("bright", (0.75, 0.75, 0.8), (0.9, 0.9, 0.95))),
          (0.02, 0.02, 0.05), (0.12, 0.22)),
)

TASK_ORDERS: Dict[str, Tuple[int, ...]] = {
    "order_A": (1, 2, 3, 4, 5),
    "order_B": (3, 5, 4, 2, 1),
    "order_C": (5, 1, 3, 4, 2),
    "order_D": (2, 5, 1, 3, 4),
    "order_E": (3, 1, 5, 2, 4),
}


@dataclass
class TaskSuite:
    """The five task specs plus the named task orders"""
    seed: int
    specs: Dict[int, TaskSpec]
    orders: Dict[str, Tuple[int, ...]]

    def order(self, name: str) -> List[TaskSpec]:
        try:
            ids = self.orders[name]
        except KeyError:
            raise InputError(f"unknown task order '{name}' (known: {', '.join(sorted(self.orders))})")
        return [self.specs[task_id] for task_id in ids]

    def datasets(self, order: str, tier: str, image_size: int = 32, channels: int = 3) -> List[TaskDataset]:
        return [make_task(spec, tier, self.seed, image_size, channels) for spec in self.order(order)]


def default_suite(seed: int, settings: Optional[TaskSettings] = None) -> TaskSuite:
    """Five distinct task families and the order_A..order_E permutations"""
    specs = {spec.task_id: spec for spec in DEFAULT_SPECS}
    if settings is not None:
        settings.validate()
        specs = {task_id: settings.apply(spec) for task_id, spec in specs.items()}
    return TaskSuite(seed=seed, specs=specs, orders=dict(TASK_ORDERS))


def collate(items: Sequence[TaskItem], vocab: Vocabulary) -> Tuple[np.ndarray, np.ndarray, List[List[int]]]:
    """Stack items into (images [B,C,H,W], masks [B,H,W] float, token-id lists)"""
    if not items:
        raise InputError("cannot collate an empty batch")
    images = np.stack([item.image for item in items])
    masks = np.stack([item.mask for item in items]).astype(np.float64)
    tokens = [vocab.encode(item.prompt.text) for item in items]
    return images, masks, tokens


def pixel_statistics(dataset: TaskDataset, split: str = "train") -> np.ndarray:
    """Per-channel mean intensity over a split"""
    return np.stack([item.image for item in dataset.split(split)]).mean(axis=(0, 2, 3))


def dump_task(dataset: TaskDataset, out_dir: Union[str, Path]) -> Path:
    """
    Write a task to disk

    Layout:
        task<id>_<family>/<split>/images.npy    float64 [N, C, H, W]
        task<id>_<family>/<split>/masks/NNNN.png  0/255 single-channel PNG
        task<id>_<family>/<split>/prompts.txt   one prompt per line
    """
    root = Path(out_dir) / f"task{dataset.task_id}_{dataset.spec.family}"
    for split in SPLITS:
        items = dataset.split(split)
        split_dir = root / split
        (split_dir / "masks").mkdir(parents=True, exist_ok=True)
        np.save(split_dir / "images.npy", np.stack([item.image for item in items]))
        for index, item in enumerate(items):
            path = split_dir / "masks" / f"{index:04d}.png"
            if not cv2.imwrite(str(path), item.mask * 255):
                raise OSError(f"cv2 failed to write {path}")
        (split_dir / "prompts.txt").write_text("\n".join(item.prompt.sentence for item in items) + "\n",
                                               encoding="utf-8")
    logger.info(f"💾 Task {dataset.task_id} dumped to {root}")
    return root
