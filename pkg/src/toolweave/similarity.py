"""Edit-distance text similarity shared by edge validation and the confusable-tool matcher."""

from __future__ import annotations


def levenshtein(a: str, b: str) -> int:
    """Classic dynamic-programming edit distance."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ch_a in enumerate(a, start=1):
        current = [i]
        for j, ch_b in enumerate(b, start=1):
            cost = 0 if ch_a == ch_b else 1
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + cost))
        previous = current
    return previous[-1]


def lexical_similarity(a: str, b: str) -> float:
    """Normalized edit similarity: 1 - distance / max length, in [0, 1]."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest
