"""
PA-EWC Desk Lab - Prompt Taxonomy Module

Five prompt tiers (basic, visual, spatial, medical, comprehensive), the three
specialised lexicons, prompt generation for the synthetic tasks, the weighted
prompt-complexity score and the token vocabulary the model consumes.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, InputError

logger = logging.getLogger(__name__)

TIERS = ("basic", "visual", "spatial", "medical", "comprehensive")
CORE_CATEGORIES = ("visual", "spatial", "medical")
# Per-task tier selection, resolved through each task's preferred tier
ADAPTIVE_TIER = "adaptive"
TIER_SETTINGS = TIERS + (ADAPTIVE_TIER,)

COMPLEXITY_WEIGHTS = {"visual": 2.0, "spatial": 2.5, "medical": 3.0}
# Word role codes the model uses to route prompt tokens; 0 means no role
ROLE_CODES = {"visual": 1, "spatial": 2, "medical": 3}

SIZE_TERMS = ("small", "medium", "large")
ROW_TERMS = ("top", "center", "bottom")
COLUMN_TERMS = ("left", "center", "right")

DEFAULT_LEXICON_TEXT = """\
[visual]
round
irregular
pink
medium
small
large
shape
color
texture

[spatial]
located
center
left
right
top
bottom
four-chamber
two-chamber

[medical]
polyp
lesion
tumor
lump
pathology
malignant
benign
tissue
"""

_TOKEN_STRIP = re.compile(r"^[^\w]+|[^\w]+$")


def tokenize(text: str) -> List[str]:
    """
    Lowercase, split on whitespace and strip punctuation

    Internal hyphens survive, so "four-chamber" stays one token.
    """
    tokens = []
    for raw in text.lower().split():
        token = _TOKEN_STRIP.sub("", raw)
        token = re.sub(r"[^\w-]", "", token)
        if token:
            tokens.append(token)
    return tokens


@dataclass(frozen=True)
class Lexicon:
    """Specialised vocabulary for the three core prompt categories"""
    visual_terms: FrozenSet[str]
    spatial_terms: FrozenSet[str]
    medical_terms: FrozenSet[str]

    def __post_init__(self):
        sections = {"visual": self.visual_terms, "spatial": self.spatial_terms, "medical": self.medical_terms}
        for name, terms in sections.items():
            if not terms:
                raise ConfigError(f"lexicon section [{name}] is empty")
        names = list(sections)
        for i, first in enumerate(names):
            for second in names[i + 1:]:
                shared = sections[first] & sections[second]
                if shared:
                    raise ConfigError(f"lexicon sections [{first}] and [{second}] share terms {sorted(shared)}")

    @classmethod
    def default(cls) -> "Lexicon":
        return cls.from_text(DEFAULT_LEXICON_TEXT)

    @classmethod
    def from_text(cls, text: str) -> "Lexicon":
        """Parse `[visual]` / `[spatial]` / `[medical]` sections, one token per line"""
        sections: Dict[str, set] = {name: set() for name in CORE_CATEGORIES}
        current = None
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            header = re.fullmatch(r"\[(\w+)\]", line)
            if header:
                current = header.group(1).lower()
                if current not in sections:
                    raise ConfigError(f"unknown lexicon section [{current}]", line=number)
                continue
            if current is None:
                raise ConfigError("lexicon term before any section header", line=number)
            sections[current].add(line.lower())
        return cls(frozenset(sections["visual"]), frozenset(sections["spatial"]), frozenset(sections["medical"]))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "Lexicon":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def category_of(self, token: str) -> Optional[str]:
        if token in self.visual_terms:
            return "visual"
        if token in self.spatial_terms:
            return "spatial"
        if token in self.medical_terms:
            return "medical"
        return None

    def counts(self, tokens: Sequence[str]) -> Tuple[int, int, int]:
        """Lexicon hits (visual, spatial, medical) by exact token membership"""
        hits = {name: 0 for name in CORE_CATEGORIES}
        for token in tokens:
            category = self.category_of(token)
            if category:
                hits[category] += 1
        return hits["visual"], hits["spatial"], hits["medical"]

    def all_terms(self) -> FrozenSet[str]:
        return self.visual_terms | self.spatial_terms | self.medical_terms


@dataclass(frozen=True)
class PromptSpec:
    """One text prompt of a given tier for a given task"""
    tier: str
    text: Tuple[str, ...]
    task_id: int

    def __post_init__(self):
        if self.tier not in TIERS:
            raise InputError(f"unknown prompt tier '{self.tier}'")
        if not self.text:
            raise InputError("prompt text is empty")

    @property
    def sentence(self) -> str:
        return " ".join(self.text)


@dataclass(frozen=True)
class ComplexityScore:
    """Weighted prompt complexity; counts are (|W|, |V|, |S|, |M|) per prompt"""
    value: float
    counts: Tuple[Tuple[int, int, int, int], ...]


def prompt_score(tokens: Sequence[str], lexicon: Lexicon) -> Tuple[float, Tuple[int, int, int, int]]:
    """|W| + 2.0|V| + 2.5|S| + 3.0|M| for one tokenised prompt; |W| counts every token"""
    visual, spatial, medical = lexicon.counts(tokens)
    words = len(tokens)
    score = (words
             + COMPLEXITY_WEIGHTS["visual"] * visual
             + COMPLEXITY_WEIGHTS["spatial"] * spatial
             + COMPLEXITY_WEIGHTS["medical"] * medical)
    return score, (words, visual, spatial, medical)


def complexity(prompts: Iterable[Union[PromptSpec, str]], lexicon: Optional[Lexicon] = None) -> ComplexityScore:
    """
    Mean weighted complexity over a prompt set

    Args:
        prompts: PromptSpec objects or raw prompt strings
        lexicon: specialised vocabulary (defaults to the built-in lexicon)
    """
    lexicon = lexicon or Lexicon.default()
    scores = []
    counts = []
    for prompt in prompts:
        tokens = list(prompt.text) if isinstance(prompt, PromptSpec) else tokenize(prompt)
        if not tokens:
            raise InputError("prompt with zero tokens in complexity set")
        score, count = prompt_score(tokens, lexicon)
        scores.append(score)
        counts.append(count)
    if not scores:
        raise InputError("complexity needs a nonempty prompt set")
    return ComplexityScore(value=float(np.mean(scores)), counts=tuple(counts))


@dataclass(frozen=True)
class PromptAttributes:
    """Observable properties of one rendered object, used to phrase prompts"""
    size: str
    color: str
    position: Tuple[int, int]

    def __post_init__(self):
        if self.size not in SIZE_TERMS:
            raise InputError(f"unknown size bucket '{self.size}'")
        row, col = self.position
        if not (0 <= row < 3 and 0 <= col < 3):
            raise InputError(f"position cell {self.position} outside the 3x3 grid")


@dataclass(frozen=True)
class TaskPhrases:
    """Wording for one synthetic task's prompts"""
    task_id: int
    noun: str
    definition: str
    shape: str
    colors: Tuple[str, ...]
    preferred_tier: str


TASK_PHRASES: Dict[int, TaskPhrases] = {
    1: TaskPhrases(1, "polyp", "a small lump in colon", "round", ("pink", "red"), "visual"),
    2: TaskPhrases(2, "skin lesion", "an abnormal tissue growth", "irregular", ("brown", "dark"), "visual"),
    3: TaskPhrases(3, "lung opacity", "a pathology in lung tissue", "elongated", ("bright", "white"), "spatial"),
    4: TaskPhrases(4, "breast tumor", "a benign lump in breast tissue", "rectangular", ("dark", "gray"), "medical"),
    5: TaskPhrases(5, "myocardium", "a ring of heart muscle tissue", "round", ("gray", "bright"), "spatial"),
}

CONNECTIVE_WORDS = ("located", "in", "which", "is", "a", "an", "the", "image", "view", "of")


def position_phrase(position: Tuple[int, int]) -> str:
    """Grid cell -> phrase such as "top left", "center" or "bottom center" """
    row, col = position
    if row == 1 and col == 1:
        return "center"
    return f"{ROW_TERMS[row]} {COLUMN_TERMS[col]}"


def resolve_tier(tier: str, task_id: int) -> str:
    """Map the `adaptive` setting to the task's preferred tier"""
    if tier == ADAPTIVE_TIER:
        return _phrases(task_id).preferred_tier
    if tier not in TIERS:
        raise InputError(f"unknown prompt tier '{tier}'")
    return tier


def _phrases(task_id: int) -> TaskPhrases:
    try:
        return TASK_PHRASES[task_id]
    except KeyError:
        raise InputError(f"unknown task id {task_id}")


def sample_attributes(task_id: int, rng: np.random.Generator) -> PromptAttributes:
    phrases = _phrases(task_id)
    size = SIZE_TERMS[int(rng.integers(len(SIZE_TERMS)))]
    color = phrases.colors[int(rng.integers(len(phrases.colors)))]
    position = (int(rng.integers(3)), int(rng.integers(3)))
    return PromptAttributes(size=size, color=color, position=position)


def generate_prompt(tier: str,
                    task_id: int,
                    rng: Optional[np.random.Generator] = None,
                    attributes: Optional[PromptAttributes] = None) -> PromptSpec:
    """
    Build a prompt of the given tier for a task

    Args:
        tier: one of TIERS, or "adaptive" for the task's preferred tier
        task_id: key into TASK_PHRASES
        rng: draws the attributes when none are given
        attributes: actual size/color/position of the rendered object

    Patterns:
        basic          noun
        visual         size color shape noun
        spatial        noun located in position
        medical        noun which is definition
        comprehensive  size color shape noun which is definition located in position
    """
    phrases = _phrases(task_id)
    tier = resolve_tier(tier, task_id)
    if attributes is None:
        attributes = sample_attributes(task_id, rng if rng is not None else np.random.default_rng(task_id))

    parts = category_phrases(task_id, attributes)
    if tier == "basic":
        text = phrases.noun
    elif tier == "visual":
        text = f"{parts['visual']} {phrases.noun}"
    elif tier == "spatial":
        text = f"{phrases.noun} {parts['spatial']}"
    elif tier == "medical":
        text = f"{phrases.noun} {parts['medical']}"
    else:
        text = f"{parts['visual']} {phrases.noun} {parts['medical']} {parts['spatial']}"
    return PromptSpec(tier=tier, text=tuple(tokenize(text)), task_id=task_id)


def category_phrases(task_id: int, attributes: PromptAttributes) -> Dict[str, str]:
    """The phrase each core category adds to the task noun"""
    phrases = _phrases(task_id)
    return {
        "visual": f"{attributes.size} {attributes.color} {phrases.shape}",
        "spatial": f"located in {position_phrase(attributes.position)}",
        "medical": f"which is {phrases.definition}",
    }


def without_category(category: str, task_id: int, attributes: PromptAttributes) -> PromptSpec:
    """Comprehensive prompt with one category's phrase left out"""
    if category not in CORE_CATEGORIES:
        raise InputError(f"unknown prompt category '{category}'")
    parts = category_phrases(task_id, attributes)
    parts[category] = ""
    text = " ".join([parts["visual"], _phrases(task_id).noun, parts["medical"], parts["spatial"]])
    return PromptSpec(tier="comprehensive", text=tuple(tokenize(text)), task_id=task_id)


class Vocabulary:
    """
    Deterministic token -> id map for the toy model's embedding table

    Id 0 is padding, id 1 is the unknown token; known words follow in sorted order.
    """

    PAD = "<pad>"
    UNK = "<unk>"

    def __init__(self, words: Iterable[str]):
        self.tokens: List[str] = [self.PAD, self.UNK] + sorted(set(words) - {self.PAD, self.UNK})
        self.index: Dict[str, int] = {token: i for i, token in enumerate(self.tokens)}

    @classmethod
    def default(cls, lexicon: Optional[Lexicon] = None) -> "Vocabulary":
        lexicon = lexicon or Lexicon.default()
        words = set(lexicon.all_terms()) | set(CONNECTIVE_WORDS) | set(SIZE_TERMS)
        words |= set(ROW_TERMS) | set(COLUMN_TERMS)
        for phrases in TASK_PHRASES.values():
            words |= set(tokenize(f"{phrases.noun} {phrases.definition} {phrases.shape}"))
            words |= set(phrases.colors)
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index.get(token, 1) for token in tokens]

    def roles(self, lexicon: Lexicon, size: int) -> np.ndarray:
        """Role code per token id (0 none, then ROLE_CODES), zero-padded or cut to `size`"""
        codes = np.zeros(size, dtype=np.int64)
        for token_id, token in enumerate(self.tokens[:size]):
            category = lexicon.category_of(token)
            if category:
                codes[token_id] = ROLE_CODES[category]
        return codes

    def check_fits(self, vocab_size: int):
        if len(self) > vocab_size:
            raise ConfigError(f"vocabulary has {len(self)} tokens but model.vocab_size is {vocab_size}")
