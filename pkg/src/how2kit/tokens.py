"""Pluggable token counting.

All length-sensitive formulas (length reward, gen/ref ratios, average
token reports) go through a named scheme so they stay testable offline.
Two schemes ship by default:

* ``whitespace`` — ``len(text.split())``; the mandatory fallback.
* ``bpe`` — greedy byte-pair merging driven by a bundled merge table.

A byte-pair scheme is just data: any merge table in the same JSON shape
(``{"merges": [["a", "b"], ...]}``, highest priority first) can be
registered under a new name, so a production vocabulary can be dropped in
without code changes.
"""

from __future__ import annotations

import json
from importlib import resources
from typing import Callable

DEFAULT_SCHEME = "whitespace"


class UnknownSchemeError(Exception):
    """Raised when a tokenization scheme was never registered."""

    def __init__(self, scheme: str, known: tuple[str, ...]):
        super().__init__(f"unknown tokenization scheme {scheme!r}; registered: {known}")
        self.scheme = scheme


_REGISTRY: dict[str, Callable[[str], int]] = {}


def register_scheme(name: str, counter: Callable[[str], int]) -> None:
    _REGISTRY[name] = counter


def registered_schemes() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def count_tokens(text: str, scheme: str = DEFAULT_SCHEME) -> int:
    """Deterministic token count of ``text`` under a registered scheme."""
    try:
        counter = _REGISTRY[scheme]
    except KeyError:
        raise UnknownSchemeError(scheme, registered_schemes()) from None
    if not text:
        return 0
    return counter(text)


def bpe_tokenize(text: str, ranks: dict[tuple[str, str], int]) -> list[str]:
    """Greedy byte-pair merging over the UTF-8 bytes of ``text``.

    Starts from one symbol per byte (rendered ``b{value}``) and repeatedly
    applies the best-ranked adjacent merge until none applies. Words are
    split on whitespace first; whitespace itself carries no tokens.
    """
    out: list[str] = []
    for word in text.split():
        symbols = [f"b{byte}" for byte in word.encode("utf-8")]
        while len(symbols) > 1:
            best_rank = None
            best_idx = -1
            for i in range(len(symbols) - 1):
                rank = ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_idx = i
            if best_idx < 0:
                break
            merged = symbols[best_idx] + "+" + symbols[best_idx + 1]
            symbols[best_idx : best_idx + 2] = [merged]
        out.extend(symbols)
    return out


def load_merge_table(payload: dict) -> dict[tuple[str, str], int]:
    merges = payload["merges"]
    ranks: dict[tuple[str, str], int] = {}
    for rank, pair in enumerate(merges):
        left, right = pair
        ranks[(left, right)] = rank
    return ranks


def register_bpe_scheme(name: str, ranks: dict[tuple[str, str], int]) -> None:
    register_scheme(name, lambda text: len(bpe_tokenize(text, ranks)))


def _load_bundled_bpe() -> dict[tuple[str, str], int]:
    raw = resources.files("how2kit.data").joinpath("bpe_merges.json").read_text("utf-8")
    return load_merge_table(json.loads(raw))


register_scheme("whitespace", lambda text: len(text.split()))
register_bpe_scheme("bpe", _load_bundled_bpe())
