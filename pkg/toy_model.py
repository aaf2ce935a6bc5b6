"""
PA-EWC Desk Lab - Toy Prompt-Conditioned Segmentation Model

A desk-scale vision-language segmenter with four named regions:

    vision.*   patchify -> linear patch embedding (+ positions, + mean of the
               prompt's visual-word embeddings) -> residual MLP
    text.*     token embedding bag -> projection (mean-pooled text vector)
    xattn.*    multi-head cross-attention: position queries per patch over the
               prompt's spatial words, plus a zero null slot
    decoder.*  per-patch MLP -> 2 logits per patch -> nearest upsampling

Word roles (visual / spatial / medical / none) come from the lexicon through
ParamStore.token_roles. A prompt without visual words adds nothing to the
vision path; one without spatial words attends only to the null slot.

Parameters live in a ParamStore of named blocks. The prefix -> group mapping
in EXPECTED_GROUP_BY_PREFIX is documentation only; group tags are always
written by the gradient-response classifier.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, InputError
from prompt_taxonomy import ROLE_CODES, Lexicon, Vocabulary
from tensor_autodiff import Tensor, concat, embedding, upsample_nearest

logger = logging.getLogger(__name__)

GROUPS = ("visual", "spatial", "medical")
UNASSIGNED = "unassigned"
GROUP_TAGS = GROUPS + (UNASSIGNED,)

EXPECTED_GROUP_BY_PREFIX = {
    "vision.": "visual",
    "xattn.": "spatial",
    "text.": "medical",
}

# Layers whose outputs feed the activation statistics used for task similarity
ACTIVATION_LAYERS = ("vision_embed", "text_pool", "cross_attention", "decoder_hidden")

PAD_ID = 0
MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    """Toy model configuration"""
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    vocab_size: int = 128
    n_heads: int = 2

    def validate(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must leave room for <pad> and <unk>")
        return self

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads


# Block name -> (shape builder, kind). kind is "weight" (fan_in = shape[0]),
# "table" (fan_in = embed_dim) or "bias" (zeros).
ARCHITECTURE: Tuple[Tuple[str, Callable[[ModelConfig], Tuple[int, ...]], str], ...] = (
    ("vision.patch_embed.weight", lambda c: (c.patch_dim, c.embed_dim), "weight"),
    ("vision.patch_embed.bias", lambda c: (c.embed_dim,), "bias"),
    ("vision.pos_embed", lambda c: (c.n_patches, c.embed_dim), "table"),
    ("vision.attr_embed", lambda c: (c.vocab_size, c.embed_dim), "table"),
    ("vision.mlp.fc1.weight", lambda c: (c.embed_dim, c.embed_dim), "weight"),
    ("vision.mlp.fc1.bias", lambda c: (c.embed_dim,), "bias"),
    ("vision.mlp.fc2.weight", lambda c: (c.embed_dim, c.embed_dim), "weight"),
    ("vision.mlp.fc2.bias", lambda c: (c.embed_dim,), "bias"),
    ("text.embed.weight", lambda c: (c.vocab_size, c.embed_dim), "table"),
    ("text.proj.weight", lambda c: (c.embed_dim, c.embed_dim), "weight"),
    ("text.proj.bias", lambda c: (c.embed_dim,), "bias"),
    ("xattn.token_embed", lambda c: (c.vocab_size, c.embed_dim), "table"),
    ("xattn.query.weight", lambda c: (c.embed_dim, c.embed_dim), "weight"),
    ("xattn.key.weight", lambda c: (c.embed_dim, c.embed_dim), "weight"),
    ("xattn.value.weight", lambda c: (c.embed_dim, c.embed_dim), "weight"),
    ("xattn.out.weight", lambda c: (c.embed_dim, c.embed_dim), "weight"),
    ("xattn.out.bias", lambda c: (c.embed_dim,), "bias"),
    ("decoder.fc1.weight", lambda c: (c.embed_dim, c.embed_dim), "weight"),
    ("decoder.fc1.bias", lambda c: (c.embed_dim,), "bias"),
    ("decoder.fc2.weight", lambda c: (c.embed_dim, 2), "weight"),
    ("decoder.fc2.bias", lambda c: (2,), "bias"),
)


class ParamStore(Mapping):
    """
    Named parameter blocks of the toy model plus their group tags

    Behaves as a read-only mapping {block name -> Tensor}. Values are replaced
    (never mutated in place) by the optimizer so tensors already recorded on a
    tape keep their forward values. token_roles maps every token id to its word
    role code (0 none, then ROLE_CODES).
    """

    def __init__(self, config: ModelConfig, blocks: "OrderedDict[str, Tensor]",
                 group_of: Optional[Dict[str, str]] = None,
                 token_roles: Optional[np.ndarray] = None):
        self.config = config
        self.blocks = blocks
        self.group_of: Dict[str, str] = {name: UNASSIGNED for name in blocks}
        if group_of:
            self.assign_groups(group_of)
        self.set_token_roles(default_token_roles(config.vocab_size) if token_roles is None else token_roles)

    def __getitem__(self, name: str) -> Tensor:
        return self.blocks[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def names(self) -> List[str]:
        return list(self.blocks)

    def set_token_roles(self, roles: np.ndarray):
        roles = np.asarray(roles, dtype=np.int64)
        if roles.shape != (self.config.vocab_size,):
            raise InputError(f"token roles need shape ({self.config.vocab_size},), got {roles.shape}")
        if roles.min() < 0 or roles.max() > max(ROLE_CODES.values()):
            raise InputError("token role codes out of range")
        self.token_roles = roles.copy()

    def assign_groups(self, assignment: Mapping[str, str]):
        unknown = set(assignment) - set(self.blocks)
        if unknown:
            raise InputError(f"group assignment names unknown blocks: {sorted(unknown)}")
        for name, group in assignment.items():
            if group not in GROUP_TAGS:
                raise InputError(f"unknown group tag '{group}' for block '{name}'")
            self.group_of[name] = group

    def blocks_in(self, group: str) -> List[str]:
        return [name for name in self.blocks if self.group_of[name] == group]

    def snapshot_values(self) -> Dict[str, np.ndarray]:
        """Copies of every block's values"""
        return {name: t.data.copy() for name, t in self.blocks.items()}

    def load_values(self, values: Mapping[str, np.ndarray]):
        for name, tensor in self.blocks.items():
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise InputError(f"block '{name}' expects shape {tensor.shape}, got {value.shape}")
            tensor.data = value.copy()

    def copy(self) -> "ParamStore":
        blocks = OrderedDict(
            (name, Tensor(t.data, requires_grad=t.requires_grad, name=name)) for name, t in self.blocks.items()
        )
        return ParamStore(self.config, blocks, dict(self.group_of), self.token_roles)


@dataclass
class SegLogits:
    """Per-pixel 2-class logits; channel 1 is foreground"""
    values: Tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


def default_token_roles(vocab_size: int) -> np.ndarray:
    """Role codes of the default vocabulary under the default lexicon"""
    return Vocabulary.default().roles(Lexicon.default(), vocab_size)


def build_model(cfg: ModelConfig, seed: int) -> ParamStore:
    """
    Create and initialise every parameter block of the toy model

    Weights are uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero. Blocks
    are drawn in ARCHITECTURE order from one generator, so (cfg, seed) fully
    determines the values.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    blocks: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape_of, kind in ARCHITECTURE:
        shape = shape_of(cfg)
        if kind == "bias":
            values = np.zeros(shape)
        else:
            fan_in = shape[0] if kind == "weight" else cfg.embed_dim
            bound = 1.0 / math.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        blocks[name] = Tensor(values, requires_grad=True, name=name)
    logger.info(f"Toy model built: {len(blocks)} blocks, {sum(t.size for t in blocks.values())} scalars, seed {seed}")
    return ParamStore(cfg, blocks)


def pad_prompts(prompt_tokens: Sequence[Sequence[int]], vocab_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pad token-id lists to a [batch, T] array plus a {0,1} validity mask"""
    if not prompt_tokens:
        raise InputError("no prompts given")
    length = max(len(tokens) for tokens in prompt_tokens)
    ids = np.full((len(prompt_tokens), max(length, 1)), PAD_ID, dtype=np.int64)
    valid = np.zeros(ids.shape, dtype=np.float64)
    for row, tokens in enumerate(prompt_tokens):
        if len(tokens) == 0:
            raise InputError(f"prompt {row} is empty")
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.min() < 0 or arr.max() >= vocab_size:
            raise InputError(f"prompt {row} has token id outside [0, {vocab_size})")
        ids[row, :len(arr)] = arr
        valid[row, :len(arr)] = 1.0
    return ids, valid


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, n_patches, C * p * p], patches in row-major grid order"""
    batch, channels, height, width = images.shape
    gh, gw = height // patch_size, width // patch_size
    patches = images.reshape(batch, channels, gh, patch_size, gw, patch_size)
    return patches.transpose(0, 2, 4, 1, 3, 5).reshape(batch, gh * gw, channels * patch_size ** 2)


def forward(params: ParamStore,
            image,
            prompt_tokens: Sequence[Sequence[int]],
            activations: Optional[Dict[str, np.ndarray]] = None) -> SegLogits:
    """
    Run the toy model

    Args:
        params: model parameters (not modified)
        image: Tensor or array of shape [batch, C, H, W]
        prompt_tokens: one nonempty token-id list per sample
        activations: when given, filled with the outputs of ACTIVATION_LAYERS

    Returns:
        SegLogits with values of shape [batch, 2, H, W]
    """
    cfg = params.config
    images = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise InputError(f"image batch must have shape [B, {expected[0]}, {expected[1]}, {expected[2]}], got {images.shape}")
    batch = images.shape[0]
    if len(prompt_tokens) != batch:
        raise InputError(f"{len(prompt_tokens)} prompts for a batch of {batch} images")
    token_ids, valid = pad_prompts(prompt_tokens, cfg.vocab_size)
    n_tokens = token_ids.shape[1]
    heads, head_dim, dim = cfg.n_heads, cfg.head_dim, cfg.embed_dim
    n_patches = cfg.n_patches
    p = params.blocks

    roles = params.token_roles[token_ids]
    visual_words = valid * (roles == ROLE_CODES["visual"])
    spatial_words = valid * (roles == ROLE_CODES["spatial"])

    # Vision path: the prompt's visual words shift every patch embedding
    patches = Tensor(patchify(images, cfg.patch_size))
    attr_weights = visual_words / np.maximum(visual_words.sum(axis=1, keepdims=True), 1.0)
    attributes = Tensor(attr_weights[:, None, :]) @ embedding(p["vision.attr_embed"], token_ids)
    vision_embed = (patches @ p["vision.patch_embed.weight"] + p["vision.patch_embed.bias"]
                    + p["vision.pos_embed"] + attributes)
    hidden = (vision_embed @ p["vision.mlp.fc1.weight"] + p["vision.mlp.fc1.bias"]).relu()
    visual = vision_embed + hidden @ p["vision.mlp.fc2.weight"] + p["vision.mlp.fc2.bias"]

    # Text path: per-token projection; its mean over valid tokens is the pooled text vector
    token_features = embedding(p["text.embed.weight"], token_ids) @ p["text.proj.weight"] + p["text.proj.bias"]
    pool_weights = valid / valid.sum(axis=1, keepdims=True)
    text_pool = Tensor(pool_weights[:, None, :]) @ token_features

    # Cross-attention: position queries over spatial words; slot 0 is a zero null key/value
    positions = p["vision.pos_embed"] + Tensor(np.zeros((batch, 1, 1)))
    query = (positions @ p["xattn.query.weight"]).reshape(batch, n_patches, heads, head_dim).transpose(0, 2, 1, 3)
    spatial_features = embedding(p["xattn.token_embed"], token_ids)
    key = (spatial_features @ p["xattn.key.weight"]).reshape(batch, n_tokens, heads, head_dim).transpose(0, 2, 3, 1)
    value = (spatial_features @ p["xattn.value.weight"]).reshape(batch, n_tokens, heads, head_dim).transpose(0, 2, 1, 3)
    key_bias = Tensor(((1.0 - spatial_words) * MASK_BIAS)[:, None, None, :])
    scores = (query @ key) * (1.0 / math.sqrt(head_dim)) + key_bias
    scores = concat([Tensor(np.zeros((batch, heads, n_patches, 1))), scores], axis=3)
    value = concat([Tensor(np.zeros((batch, heads, 1, head_dim))), value], axis=2)
    context = (scores.softmax(axis=-1) @ value).transpose(0, 2, 1, 3).reshape(batch, n_patches, dim)
    attended = context @ p["xattn.out.weight"] + p["xattn.out.bias"]

    # Decoder
    fused = visual + attended + text_pool
    decoder_hidden = (fused @ p["decoder.fc1.weight"] + p["decoder.fc1.bias"]).relu()
    patch_logits = decoder_hidden @ p["decoder.fc2.weight"] + p["decoder.fc2.bias"]
    grid = patch_logits.reshape(batch, cfg.grid_size, cfg.grid_size, 2).transpose(0, 3, 1, 2)
    logits = upsample_nearest(grid, cfg.patch_size)

    if activations is not None:
        activations["vision_embed"] = vision_embed.data
        activations["text_pool"] = text_pool.data
        activations["cross_attention"] = attended.data
        activations["decoder_hidden"] = decoder_hidden.data
    return SegLogits(logits)


def architecture_table(cfg: Optional[ModelConfig] = None) -> List[Dict[str, object]]:
    """Rows (block, shape, region) describing the architecture for docs and reports"""
    cfg = (cfg or ModelConfig()).validate()
    return [{"block": name, "shape": shape_of(cfg), "region": name.split(".")[0]}
            for name, shape_of, _ in ARCHITECTURE]
