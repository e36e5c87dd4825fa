"""Token selection strategies and coordinate generation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

from .errors import ConfigError, CoordParseError
from .instructions import KeypointSpec, PromptStyle, build_round, preamble_text, render_tokens
from .tokenizer import COORD_TEMPLATE, DEFAULT_DIGITS, Vocabulary, encode_coords, parse_coords, template_layout


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class Temperature:
    t: float = 1.0

    def __post_init__(self):
        if not self.t > 0:
            raise ConfigError(f"temperature must be > 0, got {self.t}")


@dataclass(frozen=True)
class TopK:
    k: int = 3
    t: float = 1.0

    def __post_init__(self):
        if self.k < 1 or not self.t > 0:
            raise ConfigError(f"top-k needs k >= 1 and t > 0, got k={self.k}, t={self.t}")


@dataclass(frozen=True)
class Nucleus:
    p: float = 0.92
    t: float = 1.0

    def __post_init__(self):
        if not (0 < self.p <= 1) or not self.t > 0:
            raise ConfigError(f"nucleus needs p in (0, 1] and t > 0, got p={self.p}, t={self.t}")


@dataclass(frozen=True)
class Contrastive:
    alpha: float = 0.6
    k: int = 4

    def __post_init__(self):
        if not (0 <= self.alpha <= 1) or self.k < 1:
            raise ConfigError(f"contrastive search needs alpha in [0, 1] and k >= 1, got {self.alpha}, {self.k}")


Strategy = Union[Greedy, Temperature, TopK, Nucleus, Contrastive]
_KINDS = {"greedy": Greedy, "temperature": Temperature, "top_k": TopK, "nucleus": Nucleus,
          "contrastive": Contrastive}


def strategy_from_dict(d: dict) -> Strategy:
    d = dict(d)
    kind = d.pop("kind", "greedy")
    if kind not in _KINDS:
        raise ConfigError(f"unknown decoding strategy {kind!r}; choose from {sorted(_KINDS)}")
    return _KINDS[kind](**d)


def strategy_to_dict(s: Strategy) -> dict:
    kind = {v: k for k, v in _KINDS.items()}[type(s)]
    return {"kind": kind, **asdict(s)}


def is_stochastic(s: Strategy) -> bool:
    return isinstance(s, (Temperature, TopK, Nucleus))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z[np.isfinite(z)].max()
    e = np.where(np.isfinite(z), np.exp(z), 0.0)
    return e / e.sum()


def _restrict(logits, allowed) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if allowed is None:
        return logits.copy()
    out = np.full_like(logits, -np.inf)
    out[allowed] = logits[allowed]
    return out


def _ranked(p: np.ndarray) -> np.ndarray:
    # descending probability, ties broken by lower id
    return np.argsort(-p, kind="stable")


def transformed_distribution(logits, strategy: Strategy, allowed=None) -> np.ndarray:
    """The distribution a strategy samples from (one-hot for deterministic ones)."""
    z = _restrict(logits, allowed)
    if isinstance(strategy, (Greedy, Contrastive)):
        p = np.zeros_like(z)
        p[int(np.argmax(z))] = 1.0
        return p
    p = _softmax(z / strategy.t)
    if isinstance(strategy, TopK):
        keep = _ranked(p)[: strategy.k]
        q = np.zeros_like(p)
        q[keep] = p[keep]
        return q / q.sum()
    if isinstance(strategy, Nucleus):
        order = _ranked(p)
        csum = np.cumsum(p[order])
        n = int(np.searchsorted(csum, strategy.p - 1e-12)) + 1
        keep = order[:n]
        q = np.zeros_like(p)
        q[keep] = p[keep]
        return q / q.sum()
    return p


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(p) - 1)


def decode_next(logits, strategy: Strategy, rng: np.random.Generator | None = None,
                history: np.ndarray | None = None, candidate_hidden=None, allowed=None) -> int:
    """Pick the next token id.

    Contrastive search needs ``candidate_hidden(ids) -> (len(ids), D)`` giving
    the hidden state each candidate would produce, and ``history`` holding the
    hidden states of the tokens generated so far.
    """
    z = _restrict(logits, allowed)
    if isinstance(strategy, Greedy):
        return int(np.argmax(z))
    if isinstance(strategy, Contrastive):
        p = _softmax(z)
        cands = [int(c) for c in _ranked(p)[: strategy.k] if p[c] > 0]
        if history is None or len(history) == 0 or candidate_hidden is None or strategy.alpha == 0:
            return cands[0]
        h = np.asarray(candidate_hidden(cands), dtype=np.float64)
        hist = np.asarray(history, dtype=np.float64)
        hn = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        sn = hist / np.maximum(np.linalg.norm(hist, axis=1, keepdims=True), 1e-12)
        penalty = (hn @ sn.T).max(axis=1)
        score = (1 - strategy.alpha) * p[cands] - strategy.alpha * penalty
        return cands[int(np.argmax(score))]
    if rng is None:
        raise ConfigError("sampling strategies need an rng")
    return _draw(transformed_distribution(z, strategy), rng)


# -- logit sources ---------------------------------------------------------------------

class ModelSource:
    """Next-token logits of a model for one image, with a reusable prefix cache."""

    def __init__(self, model, image):
        self.model = model
        self._base = model.start(image)
        self._state = self._base
        self.forward_calls = 0

    @property
    def n_image(self) -> int:
        return self._base.n_image

    def _state_for(self, prefix: Sequence[int]):
        prefix = [int(t) for t in prefix]
        cached = self._state.text_ids
        n = 0
        for a, b in zip(cached, prefix):
            if a != b:
                break
            n += 1
        st = self._state if n == len(cached) else self._state.truncate(n)
        if n < len(prefix):
            self.forward_calls += 1
            st = self.model.extend(st, prefix[n:])
        self._state = st
        return st

    def hidden(self, prefix: Sequence[int]) -> torch.Tensor:
        st = self._state_for(prefix)
        return st.hidden[st.n_image:]

    def __call__(self, prefix: Sequence[int]) -> np.ndarray:
        st = self._state_for(prefix)
        with torch.no_grad():
            return self.model.logits_at(st.hidden[-1]).double().numpy()

    def candidate_hidden(self, prefix: Sequence[int], cands: Sequence[int]) -> np.ndarray:
        rows = [self.hidden(list(prefix) + [c])[-1].double().numpy() for c in cands]
        self._state_for(prefix)
        return np.stack(rows)


@dataclass
class Answer:
    text: str
    x: float
    y: float
    ids: list[int]
    flags: list[str] = field(default_factory=list)


def generate_answer(source, prompt: Sequence[int], strategy: Strategy, vocab: Vocabulary,
                    rng: np.random.Generator | None = None, constrained: bool = True,
                    digits: int = DEFAULT_DIGITS, template: str = COORD_TEMPLATE,
                    max_new_tokens: int | None = None) -> Answer:
    """Generate one coordinate answer after ``prompt``.

    Constrained decoding forces the template scaffolding and lets the strategy
    choose only among digit tokens. Unconstrained decoding runs until
    ``<eos>`` or the length cap; an unparsable answer falls back to the image
    center and is flagged.
    """
    ctx = [int(t) for t in prompt]
    start = len(ctx)
    gen_start = start
    allowed_digits = vocab.digit_ids

    def pick(allowed):
        logits = source(ctx)
        history = cand_fn = None
        if isinstance(strategy, Contrastive):
            history = source.hidden(ctx)[gen_start - 1:].double().numpy() if len(ctx) > gen_start else None
            cand_fn = lambda cands: source.candidate_hidden(ctx, cands)  # noqa: E731
        return decode_next(logits, strategy, rng, history, cand_fn, allowed)

    if constrained:
        for fixed, _axis in template_layout(digits, template):
            ctx.append(vocab.index[fixed] if fixed is not None else pick(allowed_digits))
        text = vocab.decode(ctx[start:])
        x, y = parse_coords(text, digits, template)
        return Answer(text, x, y, ctx[start:])

    cap = max_new_tokens or len(template_layout(digits, template)) + 6
    for _ in range(cap):
        tok = pick(None)
        if tok == vocab.eos:
            break
        ctx.append(tok)
    text = vocab.decode(ctx[start:])
    try:
        x, y = parse_coords(text, digits, template)
        return Answer(text, x, y, ctx[start:])
    except CoordParseError:
        return Answer(text, 0.5, 0.5, ctx[start:], ["parse_failure"])


@dataclass
class KeypointPrediction:
    name: str
    x: float
    y: float
    flags: list[str]
    context_length: int


def infer_keypoints(model, image, specs: Sequence[KeypointSpec], vocab: Vocabulary, mode: str = "single",
                    strategy: Strategy = Greedy(), style: PromptStyle = PromptStyle(),
                    rng: np.random.Generator | None = None, constrained: bool = True,
                    teacher_targets: Sequence[tuple[float, float]] | None = None,
                    category_specs: Sequence[KeypointSpec] = (), source=None) -> list[KeypointPrediction]:
    """Query each keypoint in order.

    single: every keypoint gets a fresh context with only its own round.
    cumulative: earlier rounds, with their answers, precede the current one.
    Answers are the model's own unless ``teacher_targets`` supplies ground truth.
    """
    if mode not in ("single", "cumulative"):
        raise ConfigError(f"unknown inference mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    source = source or ModelSource(model, image)
    preamble = preamble_text(style, category_specs)
    answer_len = len(template_layout())
    limit = model.cfg.context - source.n_image
    history: list[tuple[str, str | None, bool]] = []
    history_sizes: list[int] = []
    out = []
    for i, spec in enumerate(specs):
        rnd = build_round(spec, style, rng=rng)
        turns = [(t.question, t.answer, t.supervised) for t in rnd.turns]
        flags = []
        hist = history if mode == "cumulative" else []
        sizes = history_sizes if mode == "cumulative" else []
        while True:
            prompt = render_tokens(vocab, hist + turns, preamble, close=False).ids
            if len(prompt) + answer_len + 1 <= limit or not hist:
                break
            hist, sizes = hist[sizes[0]:], sizes[1:]
            flags.append("truncated")
        if mode == "cumulative":
            history, history_sizes = hist, sizes
        ans = generate_answer(source, prompt, strategy, vocab, rng, constrained)
        flags += ans.flags
        out.append(KeypointPrediction(spec.name, ans.x, ans.y, flags, len(prompt)))
        if mode == "cumulative":
            answer_text = ans.text if teacher_targets is None else encode_coords(*teacher_targets[i])
            done = turns[:-1] + [(turns[-1][0], answer_text, True)]
            history = history + done
            history_sizes = history_sizes + [len(done)]
    return out
