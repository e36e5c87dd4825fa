"""Keypoint registry, prompt styles, round pairing and conversation rendering."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, TypeVar

import numpy as np

from .errors import ConfigError, RegistryError
from .tokenizer import COORD_TEMPLATE, DEFAULT_DIGITS, Vocabulary, answer_slot, encode_coords

NO_DESCRIPTION = "There is no description to refer to."
DEFAULT_REPLACE_PROBS = (0.6, 0.2, 0.2)  # detail, replaced, removed

T = TypeVar("T")


@dataclass(frozen=True)
class KeypointSpec:
    name: str
    description: str
    category: str
    alt_description: str | None = None
    vague_description: str | None = None


class Registry:
    """Keypoint specs per category, in annotation order."""

    def __init__(self, categories: dict[str, list[KeypointSpec]]):
        for cat, specs in categories.items():
            names = [s.name for s in specs]
            if len(set(names)) != len(names):
                raise RegistryError(f"duplicate keypoint names in category {cat!r}")
        self.categories = {c: list(s) for c, s in categories.items()}

    def __contains__(self, category: str) -> bool:
        return category in self.categories

    def __getitem__(self, category: str) -> list[KeypointSpec]:
        if category not in self.categories:
            raise RegistryError(f"unknown category {category!r}; known: {sorted(self.categories)}")
        return self.categories[category]

    def lookup(self, category: str, name: str) -> KeypointSpec:
        for s in self[category]:
            if s.name == name:
                return s
        raise RegistryError(
            f"unknown keypoint {name!r} in category {category!r}; candidates: {[s.name for s in self[category]]}")

    def merged(self, other: "Registry") -> "Registry":
        return Registry({**self.categories, **other.categories})

    def to_json(self) -> dict:
        out = {}
        for cat, specs in self.categories.items():
            rows = []
            for s in specs:
                row = {"name": s.name, "description": s.description}
                if s.alt_description is not None:
                    row["alt_description"] = s.alt_description
                if s.vague_description is not None:
                    row["vague_description"] = s.vague_description
                rows.append(row)
            out[cat] = rows
        return out

    @classmethod
    def from_json(cls, data: dict) -> "Registry":
        cats = {}
        for cat, rows in data.items():
            cats[cat] = [KeypointSpec(r["name"], r.get("description", ""), cat,
                                      r.get("alt_description"), r.get("vague_description")) for r in rows]
        return cls(cats)

    @classmethod
    def load(cls, path: str | Path) -> "Registry":
        return cls.from_json(json.loads(Path(path).read_text()))


def builtin_registry(name: str = "animal_body") -> Registry:
    text = resources.files("kptlm.resources.registries").joinpath(f"{name}.json").read_text()
    return Registry.from_json(json.loads(text))


def load_template(name: str) -> str:
    return resources.files("kptlm.resources.templates").joinpath(f"{name}.txt").read_text()


def _question_pool() -> list[str]:
    return [q for q in load_template("diverse_questions").splitlines() if q.strip()]


class PromptKind(str, enum.Enum):
    BASE = "base"
    STEP_BY_STEP = "step_by_step"
    DIRECT_QA_PRETRAIN = "direct_qa_pretrain"
    STEP_BY_STEP_QA_PRETRAIN = "step_by_step_qa_pretrain"


@dataclass(frozen=True)
class PromptStyle:
    kind: PromptKind = PromptKind.BASE
    use_description: bool = True
    use_keypoint_list: bool = False
    vague_descriptions: bool = False
    description_replaced: bool = False
    description_removed: bool = False
    diverse_questions: bool = False
    conversation_outline: bool = False
    random_replace_in_training: bool = False
    replace_probs: tuple[float, float, float] = DEFAULT_REPLACE_PROBS

    def __post_init__(self):
        object.__setattr__(self, "kind", PromptKind(self.kind))
        object.__setattr__(self, "replace_probs", tuple(float(p) for p in self.replace_probs))
        if sum([self.vague_descriptions, self.description_replaced, self.description_removed]) > 1:
            raise ConfigError("at most one of vague_descriptions, description_replaced, description_removed")
        if len(self.replace_probs) != 3 or abs(sum(self.replace_probs) - 1) > 1e-9 or min(self.replace_probs) < 0:
            raise ConfigError(f"replace_probs must be three non-negative weights summing to 1, got {self.replace_probs}")

    @classmethod
    def from_dict(cls, d: dict) -> "PromptStyle":
        return cls(**d)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "use_description": self.use_description,
                "use_keypoint_list": self.use_keypoint_list, "vague_descriptions": self.vague_descriptions,
                "description_replaced": self.description_replaced, "description_removed": self.description_removed,
                "diverse_questions": self.diverse_questions, "conversation_outline": self.conversation_outline,
                "random_replace_in_training": self.random_replace_in_training,
                "replace_probs": list(self.replace_probs)}


@dataclass(frozen=True)
class Turn:
    question: str
    answer: str | None  # None means "the coordinate answer of this round"
    supervised: bool


@dataclass(frozen=True)
class Round:
    keypoint: KeypointSpec
    turns: tuple[Turn, ...]
    description_source: str = "detail"

    @property
    def question(self) -> str:
        return self.turns[-1].question

    @property
    def answer_slot(self) -> str:
        return answer_slot()


def _simplified(desc: str) -> str:
    first = desc.split(". ")[0].rstrip(".")
    return first + "." if first else NO_DESCRIPTION


def choose_description(spec: KeypointSpec, style: PromptStyle, rng: np.random.Generator | None = None) -> tuple[str, str]:
    """Return ``(description_text, source)`` where source is detail/replaced/removed/vague/none."""
    if style.random_replace_in_training:
        if rng is None:
            raise ConfigError("random_replace_in_training needs an rng")
        source = ("detail", "replaced", "removed")[int(rng.choice(3, p=style.replace_probs))]
    elif style.description_removed:
        source = "removed"
    elif style.description_replaced:
        source = "replaced"
    elif style.vague_descriptions:
        source = "vague"
    elif style.use_description:
        source = "detail"
    else:
        return "", "none"
    if source == "removed":
        return NO_DESCRIPTION, source
    if source == "replaced":
        return spec.alt_description or _simplified(spec.description), source
    if source == "vague":
        return spec.vague_description or f"It is a point on the {spec.category}.", source
    return spec.description, source


def build_round(spec: KeypointSpec, style: PromptStyle = PromptStyle(), registry: Registry | None = None,
                rng: np.random.Generator | None = None, target: tuple[float, float] | None = None,
                candidates: Sequence[KeypointSpec] = ()) -> Round:
    """Build the question turns for one keypoint.

    ``target`` is required for the pretraining styles, whose questions quote
    the coordinates and whose answers are the keypoint name.
    """
    if registry is not None and not (style.description_removed or style.description_replaced):
        registry.lookup(spec.category, spec.name)
    desc, source = choose_description(spec, style, rng)
    kind = style.kind
    if kind in (PromptKind.DIRECT_QA_PRETRAIN, PromptKind.STEP_BY_STEP_QA_PRETRAIN):
        if target is None:
            raise ConfigError(f"{kind.value} rounds need the target coordinates")
        coords = encode_coords(*target)
        if kind is PromptKind.DIRECT_QA_PRETRAIN:
            turns = (Turn(load_template("direct_qa").format(coords=coords), spec.name, True),)
        else:
            names = ", ".join(c.name for c in candidates) if candidates else spec.name
            turns = (Turn(load_template("step_object"), spec.category, False),
                     Turn(load_template("step_qa_exists").format(name=spec.name), "yes", False),
                     Turn(load_template("step_qa_select").format(coords=coords, names=names), spec.name, True))
        return Round(spec, turns, source)

    if style.diverse_questions:
        if rng is None:
            raise ConfigError("diverse_questions needs an rng")
        pool = _question_pool()
        template = pool[int(rng.integers(len(pool)))]
    elif kind is PromptKind.STEP_BY_STEP:
        template = load_template("step_coords")
    else:
        template = load_template("base") if desc else load_template("base_no_description")
    question = " ".join(template.format(name=spec.name, description=desc, category=spec.category).split())
    if kind is PromptKind.STEP_BY_STEP:
        turns = (Turn(load_template("step_object"), spec.category, False), Turn(question, None, True))
    else:
        turns = (Turn(question, None, True),)
    return Round(spec, turns, source)


# -- pairing -----------------------------------------------------------------

def _chunk_with_padding(items: list[T], sizes: Iterable[int], pad: str) -> list[list[T]]:
    groups, pos, n = [], 0, len(items)
    for size in sizes:
        if pos >= n:
            break
        group = items[pos:pos + size]
        pos += len(group)
        if len(group) < size and pad == "pad_cycle":
            # fill from the start of the order, avoiding repeats while possible
            fillers = [it for it in items if it not in group] or items
            i = 0
            while len(group) < size:
                group.append(fillers[i % len(fillers)])
                i += 1
        groups.append(group)
    return groups


def fixed_round_pairing(keypoints: Sequence[T], k: int, rng: np.random.Generator | None = None,
                        pad: str = "pad_cycle") -> list[list[T]]:
    """Split keypoints into ``ceil(K / k)`` groups of exactly ``k``.

    The order is shuffled when ``rng`` is given. A short final group is
    topped up by cycling through already-grouped keypoints (``pad_cycle``) or
    left short (``short_final_group``).
    """
    if not keypoints:
        raise ValueError("cannot pair an empty keypoint list")
    if k < 1:
        raise ConfigError(f"round size k must be >= 1, got {k}")
    if pad not in ("pad_cycle", "short_final_group"):
        raise ConfigError(f"unknown padding mode {pad!r}")
    items = list(keypoints)
    if rng is not None:
        items = [items[i] for i in rng.permutation(len(items))]
    count = math.ceil(len(items) / k)
    return _chunk_with_padding(items, [k] * count, pad)


def dynamic_round_pairing(keypoints: Sequence[T], rng: np.random.Generator,
                          round_range: tuple[int, int] = (1, 8), pad: str = "pad_cycle") -> list[list[T]]:
    """Partition keypoints into groups whose sizes are drawn uniformly from ``round_range``.

    The range is clipped to ``[1, K]``, so a single keypoint always yields a
    single one-round group.
    """
    if not keypoints:
        raise ValueError("cannot pair an empty keypoint list")
    lo, hi = round_range
    if lo < 1 or lo > hi:
        raise ConfigError(f"invalid round range {round_range}")
    n = len(keypoints)
    lo, hi = min(lo, n), min(hi, n)
    items = [keypoints[i] for i in rng.permutation(n)]
    sizes, covered = [], 0
    while covered < n:
        s = int(rng.integers(lo, hi + 1))
        sizes.append(s)
        covered += s
    return _chunk_with_padding(items, sizes, pad)


# -- conversations -----------------------------------------------------------

@dataclass
class Conversation:
    image_id: int
    category: str
    rounds: list[Round]
    targets: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class RenderedConversation:
    ids: np.ndarray  # int64 token ids
    mask: np.ndarray  # uint8, 1 on supervised answer tokens
    text: str
    spans: list[tuple[int, int]]  # [start, end) token ranges of supervised answers

    def __len__(self) -> int:
        return len(self.ids)


def preamble_text(style: PromptStyle, category_specs: Sequence[KeypointSpec] = ()) -> str:
    parts = []
    if style.conversation_outline:
        parts.append(load_template("outline"))
    if style.use_keypoint_list and category_specs:
        parts.append(load_template("keypoint_list").format(names=", ".join(s.name for s in category_specs)))
    return " ".join(parts)


class _Builder:
    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.ids: list[int] = []
        self.mask: list[int] = []
        self.spans: list[tuple[int, int]] = []

    def special(self, tok: int):
        self.ids.append(tok)
        self.mask.append(0)

    def text(self, s: str, supervised: bool = False):
        start = len(self.ids)
        toks = self.vocab.encode(s)
        self.ids.extend(toks)
        self.mask.extend([int(supervised)] * len(toks))
        if supervised and toks:
            self.spans.append((start, len(self.ids)))


def render_tokens(vocab: Vocabulary, turns: Sequence[tuple[str, str | None, bool]], preamble: str = "",
                  close: bool = True) -> RenderedConversation:
    """Lay out ``(question, answer, supervised)`` turns as token ids.

    Structure: ``<bos> preamble (<sep-user> q <sep-assistant> a)* <eos>``. An
    answer of ``None`` on the last turn leaves the sequence open after
    ``<sep-assistant>`` for generation.
    """
    b = _Builder(vocab)
    b.special(vocab.bos)
    if preamble:
        b.text(preamble)
    for i, (q, a, supervised) in enumerate(turns):
        b.special(vocab.sep_user)
        b.text(q)
        b.special(vocab.sep_assistant)
        if a is None:
            if i != len(turns) - 1:
                raise ValueError("only the final turn may be left open")
            close = False
            break
        b.text(a, supervised)
    if close:
        b.special(vocab.eos)
    ids = np.asarray(b.ids, dtype=np.int64)
    return RenderedConversation(ids, np.asarray(b.mask, dtype=np.uint8), vocab.decode(ids), b.spans)


def render_conversation(conv: Conversation, vocab: Vocabulary, style: PromptStyle = PromptStyle(),
                        category_specs: Sequence[KeypointSpec] = (), digits: int = DEFAULT_DIGITS,
                        template: str = COORD_TEMPLATE) -> RenderedConversation:
    if len(conv.targets) != len(conv.rounds):
        raise ValueError(f"conversation has {len(conv.rounds)} rounds but {len(conv.targets)} targets")
    turns = []
    for rnd, (x, y) in zip(conv.rounds, conv.targets):
        for t in rnd.turns:
            ans = encode_coords(x, y, digits, template) if t.answer is None else t.answer
            turns.append((t.question, ans, t.supervised))
    return render_tokens(vocab, turns, preamble_text(style, category_specs))


def make_conversation(image_id: int, specs: Sequence[KeypointSpec], targets: Sequence[tuple[float, float]],
                      style: PromptStyle, rng: np.random.Generator | None = None,
                      registry: Registry | None = None, category_specs: Sequence[KeypointSpec] = ()) -> Conversation:
    if not specs:
        raise ValueError("a conversation needs at least one round")
    rounds = [build_round(s, style, registry, rng, target=t, candidates=category_specs)
              for s, t in zip(specs, targets)]
    return Conversation(image_id, specs[0].category, rounds, [tuple(t) for t in targets])


def with_options(style: PromptStyle, **changes) -> PromptStyle:
    return replace(style, **changes)
