"""Character vocabulary and the digit-token coordinate codec.

Coordinates are written as ``[0.abc, 0.def]``: each decimal digit is its own
token, so the probability of a coordinate factorizes over its digits.
"""

from __future__ import annotations

import json
import math
import re
import string
from decimal import ROUND_FLOOR, Decimal
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import CoordParseError, DomainError

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep-user>", "<sep-assistant>")
PUNCTUATION = "[],.:;?!'-()/&\""
COORD_TEMPLATE = "[0.%s, 0.%s]"
DEFAULT_DIGITS = 3


class Vocabulary:
    """Ordered symbol list; single characters plus a handful of special tokens."""

    def __init__(self, symbols: Sequence[str] | None = None):
        if symbols is None:
            symbols = list(SPECIALS) + list(string.digits) + list(string.ascii_lowercase) \
                + list(string.ascii_uppercase) + [" "] + list(PUNCTUATION)
        self.symbols = list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        for s in self.symbols:
            if s not in SPECIALS and len(s) != 1:
                raise ValueError(f"non-special symbol {s!r} must be a single character")
        d0 = self.index.get("0")
        if d0 is None or [self.index.get(d) for d in string.digits] != list(range(d0, d0 + 10)):
            raise ValueError("digits 0-9 must occupy 10 consecutive ids")
        for s in SPECIALS:
            if s not in self.index:
                raise ValueError(f"missing special token {s}")

    def __len__(self) -> int:
        return len(self.symbols)

    pad = property(lambda self: self.index["<pad>"])
    bos = property(lambda self: self.index["<bos>"])
    eos = property(lambda self: self.index["<eos>"])
    sep_user = property(lambda self: self.index["<sep-user>"])
    sep_assistant = property(lambda self: self.index["<sep-assistant>"])

    @cached_property
    def digit_ids(self) -> np.ndarray:
        return np.arange(self.index["0"], self.index["0"] + 10)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[c] for c in text]
        except KeyError as e:
            raise DomainError(f"character {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.symbols[int(i)] for i in ids)

    def to_json(self) -> str:
        return json.dumps(self.symbols)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))


def _truncate(value: float, digits: int) -> int:
    # Decimal(repr) so that 0.123 truncates to 123, not 122.
    q = (Decimal(repr(float(value))) * (10 ** digits)).to_integral_value(rounding=ROUND_FLOOR)
    return min(int(q), 10 ** digits - 1)


def encode_coords(x: float, y: float, digits: int = DEFAULT_DIGITS, template: str = COORD_TEMPLATE) -> str:
    """Render a normalized point; values are truncated and clamped to ``1 - 10**-digits``."""
    for v in (x, y):
        if not math.isfinite(v) or v < 0:
            raise DomainError(f"coordinate must be finite and non-negative, got {v!r}")
    return template % (f"{_truncate(x, digits):0{digits}d}", f"{_truncate(y, digits):0{digits}d}")


def answer_slot(digits: int = DEFAULT_DIGITS, template: str = COORD_TEMPLATE) -> str:
    return template % ("_" * digits, "_" * digits)


def _pattern(digits: int, template: str) -> re.Pattern:
    parts = [re.escape(p) for p in template.split("%s")]
    return re.compile(f"(\\d{{{digits}}})".join(parts))


def parse_coords(text: str, digits: int = DEFAULT_DIGITS, template: str = COORD_TEMPLATE) -> tuple[float, float]:
    m = _pattern(digits, template).search(text)
    if m is None:
        start = text.find(template[0])
        fragment = text[start:start + len(answer_slot(digits, template)) + 2] if start >= 0 else text[:40]
        raise CoordParseError("no coordinate answer found", fragment)
    scale = 10 ** digits
    return int(m.group(1)) / scale, int(m.group(2)) / scale


def template_layout(digits: int = DEFAULT_DIGITS, template: str = COORD_TEMPLATE) -> list[tuple[str | None, int | None]]:
    """Character layout of a coordinate answer.

    Each entry is ``(char, None)`` for fixed scaffolding or ``(None, axis)`` for
    a digit slot, axis 0 for x and 1 for y.
    """
    parts = template.split("%s")
    if len(parts) != 3:
        raise ValueError("coordinate template needs exactly two %s slots")
    layout: list[tuple[str | None, int | None]] = []
    for axis, part in enumerate(parts):
        layout.extend((c, None) for c in part)
        if axis < 2:
            layout.extend((None, axis) for _ in range(digits))
    return layout


LogitSource = Callable[[Sequence[int]], "np.ndarray"]


def coord_posterior(source: LogitSource, prefix: Sequence[int], coord_text: str, vocab: Vocabulary,
                    digits: int = DEFAULT_DIGITS, axis: int | None = None, digits_only: bool = True,
                    template: str = COORD_TEMPLATE) -> float:
    """Probability of ``coord_text`` as a product over its digit tokens.

    ``source`` maps a token prefix to next-token logits. Scaffolding characters
    are appended as given without contributing a factor. With ``axis`` set,
    only that axis's digits are multiplied in. ``digits_only`` renormalizes
    each step over the ten digit tokens.
    """
    layout = template_layout(digits, template)
    if len(coord_text) != len(layout):
        raise CoordParseError("coordinate text does not match template", coord_text)
    ctx = list(prefix)
    prob = 1.0
    digit_ids = vocab.digit_ids
    for ch, (fixed, slot_axis) in zip(coord_text, layout):
        if fixed is not None:
            if ch != fixed:
                raise CoordParseError("coordinate text does not match template", coord_text)
        elif axis is None or slot_axis == axis:
            if not ch.isdigit():
                raise CoordParseError("expected a digit", coord_text)
            logits = np.asarray(source(ctx), dtype=np.float64)
            if digits_only:
                logits = logits[digit_ids]
                idx = int(ch)
            else:
                idx = vocab.index[ch]
            z = logits - logits.max()
            p = np.exp(z)
            prob *= float(p[idx] / p.sum())
        ctx.append(vocab.index[ch])
    return prob
