"""Herb-centric knowledge graph: storage, per-herb lookup, linearization."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from herbgen.errors import DataError

RELATIONS = ("has_nature", "has_taste", "has_channel", "has_effect")
_RELATION_RANK = {rel: i for i, rel in enumerate(RELATIONS)}
KNOWLEDGE_MODES = ("all", "random", "none")


class Triple(NamedTuple):
    head: str
    relation: str
    tail: str


def make_triple(head: str, relation: str, tail: str) -> Triple:
    if relation not in _RELATION_RANK:
        raise DataError(f"unknown relation {relation!r}; expected one of {RELATIONS}")
    if not head or not tail:
        raise DataError("triple head and tail must be non-empty")
    return Triple(head, relation, tail)


@dataclass
class KnowledgeGraph:
    triples: set[Triple] = field(default_factory=set)
    by_head: dict[str, list[Triple]] = field(default_factory=dict)

    def add(self, triple: Triple) -> bool:
        """Insert a triple; returns False for duplicates."""
        if triple in self.triples:
            return False
        triple = make_triple(*triple)
        self.triples.add(triple)
        bucket = self.by_head.setdefault(triple.head, [])
        bucket.append(triple)
        # stable sort keeps insertion order within a relation kind
        bucket.sort(key=lambda t: _RELATION_RANK[t.relation])
        return True

    @classmethod
    def from_triples(cls, triples: Iterable[Triple]) -> "KnowledgeGraph":
        kg = cls()
        for t in triples:
            kg.add(Triple(*t))
        return kg

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, herb: str) -> bool:
        return herb in self.by_head

    def herbs(self) -> list[str]:
        return list(self.by_head)

    def knowledge_for(
        self, herb: str, mode: str = "all", rng: np.random.Generator | None = None
    ) -> list[Triple]:
        triples = self.by_head.get(herb, [])
        if mode == "none" or not triples:
            return []
        if mode == "all":
            return list(triples)
        if mode == "random":
            if rng is None:
                raise ValueError("random knowledge mode needs an rng")
            return [triples[int(rng.integers(len(triples)))]]
        raise ValueError(f"unknown knowledge mode {mode!r}")

    def save(self, path: str | Path) -> None:
        rows = [f"{t.head}\t{t.relation}\t{t.tail}" for h in self.by_head for t in self.by_head[h]]
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_kg(path: str | Path) -> KnowledgeGraph:
    kg = KnowledgeGraph()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            head, relation, tail = (p.strip() for p in parts)
            if relation not in _RELATION_RANK:
                raise DataError(f"{path}:{lineno}: unknown relation {relation!r}")
            if not head or not tail:
                raise DataError(f"{path}:{lineno}: empty head or tail")
            kg.add(Triple(head, relation, tail))
    return kg


def linearize(herb: str, triples: Iterable[Triple]) -> str:
    """Render triples as ``herb + tail`` per triple; relations carry no surface marker."""
    parts = []
    for t in triples:
        if t.head != herb:
            raise DataError(f"triple head {t.head!r} does not match herb {herb!r}")
        parts.append(herb + t.tail)
    return "".join(parts)


def parse_linearized(herb: str, text: str, kg: KnowledgeGraph) -> list[Triple]:
    """Invert :func:`linearize` using the graph to recover relation kinds.

    Requires that no tail contains the herb name and that a herb's tails are
    distinct across relation kinds (true for graphs emitted by ``synth``).
    """
    if not text:
        return []
    if not text.startswith(herb):
        raise DataError(f"text does not start with herb {herb!r}")
    tails = text.split(herb)[1:]
    lookup = {t.tail: t for t in kg.by_head.get(herb, [])}
    out = []
    for tail in tails:
        if tail not in lookup:
            raise DataError(f"tail {tail!r} is not a known attribute of {herb!r}")
        out.append(lookup[tail])
    return out
