"""Shared word splitter used by curation, vocab building, and retrieval."""

import re

_WORD_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _WORD_RE.findall(text.lower())


def curation_tokens(text: str) -> list[str]:
    """Curation variant: split_words with pure-digit tokens dropped."""
    return [t for t in split_words(text) if not t.isdigit()]
