"""Character-level vocabulary and the herb-name registry."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from herbgen.errors import DataError

logger = logging.getLogger(__name__)

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"
MASK = "[MASK]"
DELIM = "、"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, DELIM)


@dataclass(frozen=True)
class Vocabulary:
    """Bidirectional token/id map. Ids 0-5 are the special tokens in fixed order."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        tokens = tuple(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise DataError(f"vocabulary must start with {SPECIAL_TOKENS}")
        index = {tok: i for i, tok in enumerate(tokens)}
        if len(index) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        return cls(tokens, index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def mask_id(self) -> int:
        return 4

    @property
    def delim_id(self) -> int:
        return 5

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(range(len(SPECIAL_TOKENS)))

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(ch, unk) for ch in text]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        n = len(self.tokens)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise DataError(f"token id {i} outside vocabulary of size {n}")
            out.append(self.tokens[i])
        return "".join(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls.from_tokens(lines)


@dataclass(frozen=True)
class EntityRegistry:
    """Registered herb names, matched greedily longest-first over token ids."""

    herbs: frozenset[str]
    by_ids: dict[tuple[int, ...], str] = field(compare=False, repr=False)
    prefixes: dict[tuple[int, ...], frozenset[str]] = field(compare=False, repr=False)

    @classmethod
    def build(cls, herbs: Iterable[str], vocab: Vocabulary) -> "EntityRegistry":
        by_ids: dict[tuple[int, ...], str] = {}
        prefixes: dict[tuple[int, ...], set[str]] = {}
        for herb in herbs:
            ids = tuple(vocab.encode(herb))
            if not ids:
                raise DataError("empty herb name")
            if vocab.unk_id in ids or vocab.delim_id in ids:
                raise DataError(f"herb {herb!r} contains characters outside the vocabulary")
            by_ids[ids] = herb
            for k in range(1, len(ids) + 1):
                prefixes.setdefault(ids[:k], set()).add(herb)
        frozen = {k: frozenset(v) for k, v in prefixes.items()}
        return cls(frozenset(by_ids.values()), by_ids, frozen)

    @property
    def max_len(self) -> int:
        return max((len(k) for k in self.by_ids), default=0)

    def __contains__(self, herb: str) -> bool:
        return herb in self.herbs

    def __len__(self) -> int:
        return len(self.herbs)

    def completions(self, prefix: Sequence[int]) -> frozenset[str]:
        """Registered herbs whose id sequence starts with ``prefix``."""
        return self.prefixes.get(tuple(prefix), frozenset())

    def resolve(self, ids: Sequence[int]) -> str | None:
        """The herb named by a partial id sequence, if exactly one is possible."""
        ids = tuple(ids)
        if not ids:
            return None
        cands = self.prefixes.get(ids)
        if cands is None:
            return None
        if len(cands) == 1:
            return next(iter(cands))
        return None


def find_herb_spans(ids: Sequence[int], registry: EntityRegistry) -> list[tuple[int, int, str]]:
    """Greedy left-to-right, longest-first herb matching.

    Returns non-overlapping ``(start, end, herb)`` spans sorted by start.
    """
    ids = tuple(int(i) for i in ids)
    longest = registry.max_len
    spans = []
    i = 0
    while i < len(ids):
        for k in range(min(longest, len(ids) - i), 0, -1):
            herb = registry.by_ids.get(ids[i : i + k])
            if herb is not None:
                spans.append((i, i + k, herb))
                i += k
                break
        else:
            i += 1
    return spans


def build_vocabulary(
    corpus_lines: Iterable[str], herb_list: Iterable[str]
) -> tuple[Vocabulary, EntityRegistry, int]:
    """Build the vocabulary and registry.

    Returns ``(vocab, registry, n_duplicate_herbs)``. Non-special characters are
    sorted by code point so the result does not depend on corpus order.
    """
    lines = [line for line in corpus_lines if line]
    if not lines:
        raise DataError("empty corpus")
    herbs: list[str] = []
    seen: set[str] = set()
    duplicates = 0
    for herb in herb_list:
        herb = herb.strip()
        if not herb:
            raise DataError("herb names must be non-empty")
        if herb in seen:
            duplicates += 1
            continue
        seen.add(herb)
        herbs.append(herb)
    if duplicates:
        logger.warning("dropped %d duplicate herb names", duplicates)

    chars = set()
    for text in lines:
        chars.update(text)
    for herb in herbs:
        chars.update(herb)
    chars.difference_update(SPECIAL_TOKENS)
    vocab = Vocabulary.from_tokens(SPECIAL_TOKENS + tuple(sorted(chars)))
    return vocab, EntityRegistry.build(herbs, vocab), duplicates


def load_herb_list(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip()]
