"""Tokenization, string similarity and token counting."""

from __future__ import annotations

import math
import re
from typing import Callable

from rapidfuzz.distance import Levenshtein

_TOKEN_RE = re.compile(r"[^\W_]+")

STOPWORDS = frozenset(
    """a an and are as at be but by did do does for from had has have he her his
    i in is it its me my of on or our she so that the their them they this to was
    we were what when where which who why will with you your""".split()
)

TokenCounter = Callable[[str], int]


def tokenize(text: str, *, drop_stopwords: bool = False) -> list[str]:
    """Case-fold ``text`` and split it into alphanumeric runs.

    Punctuation and underscores act as separators.
    """
    tokens = _TOKEN_RE.findall(text.casefold())
    if drop_stopwords:
        tokens = [t for t in tokens if t not in STOPWORDS]
    return tokens


def string_similarity(a: str, b: str) -> float:
    """Normalized edit-distance similarity over case-folded strings.

    Returns ``1 - lev(a, b) / max(len(a), len(b))``; two empty strings are
    identical (1.0) and an empty string against a non-empty one scores 0.0.
    """
    a, b = a.casefold(), b.casefold()
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - Levenshtein.distance(a, b) / longest


def count_tokens(text: str) -> int:
    """Default backbone-agnostic token estimate: one token per four characters."""
    return math.ceil(len(text) / 4)


# Sentence-initial second-person subjects and their first-person rewrites.
# Longer keys come first so "You are" wins over "You".
_PERSON_TABLE = {
    "you are": "I am",
    "you were": "I was",
    "you're": "I'm",
    "you've": "I've",
    "you'll": "I'll",
    "you'd": "I'd",
    "your": "My",
    "you": "I",
}
_PERSON_RE = re.compile(
    r"(^|[.!?][\"')\]]*\s+)(" + "|".join(re.escape(k) for k in _PERSON_TABLE) + r")\b(?!')",
    re.IGNORECASE,
)


def normalize_first_person(text: str) -> str:
    """Rewrite sentence-initial second-person subjects into first person.

    ``"You are a creative engineer"`` becomes ``"I am a creative engineer"``.
    Only sentence openings change, so the rewrite is idempotent.
    """
    return _PERSON_RE.sub(lambda m: m.group(1) + _PERSON_TABLE[m.group(2).casefold()], text)


def is_first_person(text: str) -> bool:
    """True when no sentence opens with a second-person subject."""
    return normalize_first_person(text) == text
