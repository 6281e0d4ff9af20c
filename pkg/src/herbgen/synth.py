"""Synthetic desk-scale worlds: herb inventory, knowledge graph, corpus, dataset.

Rule system: every symptom text names one or more *anchor* herbs and one or
more relation *markers* among filler symptom characters. Each marker stands
for one relation; each anchor then brings, per marked relation, the
*companion* herb registered for the anchor's value under that relation.
Companions are therefore identifiable only through the knowledge graph: the
anchor and its companion share that attribute value. Prescriptions list each
anchor followed by its companions (relations in canonical order), with later
duplicates dropped.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from herbgen.errors import DataError
from herbgen.kg import RELATIONS, KnowledgeGraph, Triple, linearize
from herbgen.training import Record, load_records, save_records
from herbgen.vocab import DELIM, build_vocabulary

MAX_HERBS = 20
_CJK_START, _CJK_END = 0x4E00, 0x9FA5


@dataclass(frozen=True)
class SynthSpec:
    num_anchors: int = 16
    attrs_per_relation: int = 3
    num_examples: int = 32
    anchors_per_example: tuple[int, int] = (1, 1)
    relations_per_example: tuple[int, int] = (1, 2)
    symptom_length: tuple[int, int] = (2, 4)
    num_symptom_chars: int = 12
    name_length: int = 2
    seed: int = 0

    @property
    def num_companions(self) -> int:
        return len(RELATIONS) * self.attrs_per_relation

    @property
    def num_herbs(self) -> int:
        return self.num_anchors + self.num_companions

    @property
    def herbs_per_prescription(self) -> tuple[int, int]:
        (a_lo, a_hi), (r_lo, r_hi) = self.anchors_per_example, self.relations_per_example
        return 1 + r_lo, min(a_hi * (1 + r_hi), self.num_herbs)

    def validate(self) -> None:
        lo, hi = self.anchors_per_example
        if not 1 <= lo <= hi:
            raise DataError("anchors_per_example must satisfy 1 <= lo <= hi")
        if hi > self.num_anchors:
            raise DataError("anchors_per_example exceeds the number of anchor herbs")
        r_lo, r_hi = self.relations_per_example
        if not 1 <= r_lo <= r_hi <= len(RELATIONS):
            raise DataError(f"relations_per_example must satisfy 1 <= lo <= hi <= {len(RELATIONS)}")
        if hi * (1 + r_hi) > MAX_HERBS:
            raise DataError(f"prescriptions could exceed {MAX_HERBS} herbs")
        s_lo, s_hi = self.symptom_length
        if not 0 <= s_lo <= s_hi or (self.num_symptom_chars < 1 and s_hi > 0):
            raise DataError("invalid symptom_length range")
        if self.attrs_per_relation < 1 or self.name_length < 1 or self.num_examples < 1:
            raise DataError("attrs_per_relation, name_length and num_examples must be positive")


@dataclass
class World:
    spec: SynthSpec
    anchors: list[str]
    markers: dict[str, str]  # relation -> marker character
    companions: dict[str, dict[str, str]]  # relation -> attribute value -> companion herb
    attributes: dict[str, dict[str, str]]  # herb -> relation -> value
    records: list[Record]
    splits: dict[str, list[int]] = field(default_factory=dict)

    @property
    def herbs(self) -> list[str]:
        comp = [self.companions[r][v] for r in RELATIONS for v in self.companions[r]]
        return self.anchors + comp

    def kg(self) -> KnowledgeGraph:
        return KnowledgeGraph.from_triples(
            Triple(h, r, self.attributes[h][r]) for h in self.herbs for r in RELATIONS
        )

    def prescription(self, anchors: list[str], relations: list[str],
                     kg: KnowledgeGraph | None = None) -> list[str]:
        """Apply the rule; attributes come from ``kg`` when given."""
        out: list[str] = []
        for a in anchors:
            if kg is not None:
                attrs = {t.relation: t.tail for t in kg.by_head.get(a, [])}
            else:
                attrs = self.attributes[a]
            for h in [a] + [self.companions[r][attrs[r]] for r in relations]:
                if h not in out:
                    out.append(h)
        return out

    def find_anchors(self, symptom: str) -> list[str]:
        """Anchor names in order of appearance (names never overlap other characters)."""
        hits = []
        for a in self.anchors:
            i = symptom.find(a)
            if i >= 0:
                hits.append((i, a))
        return [a for _, a in sorted(hits)]

    def find_relations(self, symptom: str) -> list[str]:
        """Marked relations in canonical order."""
        return [r for r in RELATIONS if self.markers[r] in symptom]

    def solve(self, symptom: str, kg: KnowledgeGraph | None = None) -> list[str]:
        return self.prescription(self.find_anchors(symptom), self.find_relations(symptom), kg)

    def split(self, name: str) -> list[Record]:
        return [self.records[i] for i in self.splits[name]]

    def corpus(self) -> list[str]:
        kg = self.kg()
        lines = [linearize(h, kg.by_head[h]) for h in self.herbs]
        lines += [r.symptom + DELIM.join(r.herbs) for r in self.split("train")]
        return lines


def _split_sizes(n: int) -> tuple[int, int, int]:
    valid = int(round(n * 0.05))
    test = int(round(n * 0.05))
    return n - valid - test, valid, test


def generate_world(spec: SynthSpec) -> World:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_attr_values = len(RELATIONS) * spec.attrs_per_relation
    n_chars = spec.num_herbs * spec.name_length + n_attr_values + len(RELATIONS) + spec.num_symptom_chars
    pool = [chr(c) for c in rng.choice(np.arange(_CJK_START, _CJK_END), size=n_chars, replace=False)]
    cursor = 0

    def take(k: int) -> list[str]:
        nonlocal cursor
        out = pool[cursor : cursor + k]
        cursor += k
        return out

    names = ["".join(take(spec.name_length)) for _ in range(spec.num_herbs)]
    values = {r: take(spec.attrs_per_relation) for r in RELATIONS}
    markers = dict(zip(RELATIONS, take(len(RELATIONS))))
    fillers = take(spec.num_symptom_chars)

    anchors = names[: spec.num_anchors]
    comp_names = iter(names[spec.num_anchors :])
    companions = {r: {v: next(comp_names) for v in values[r]} for r in RELATIONS}

    attributes: dict[str, dict[str, str]] = {}
    for a in anchors:
        attributes[a] = {r: values[r][int(rng.integers(spec.attrs_per_relation))] for r in RELATIONS}
    for r in RELATIONS:
        for v, c in companions[r].items():
            attrs = {q: values[q][int(rng.integers(spec.attrs_per_relation))] for q in RELATIONS}
            attrs[r] = v  # every attribute value is carried by at least one herb
            attributes[c] = attrs

    world = World(spec, anchors, markers, companions, attributes, [])
    a_lo, a_hi = spec.anchors_per_example
    r_lo, r_hi = spec.relations_per_example
    s_lo, s_hi = spec.symptom_length
    for _ in range(spec.num_examples):
        chosen = [anchors[i] for i in rng.choice(spec.num_anchors, size=int(rng.integers(a_lo, a_hi + 1)),
                                                 replace=False)]
        rels = [RELATIONS[i] for i in rng.choice(len(RELATIONS), size=int(rng.integers(r_lo, r_hi + 1)),
                                                 replace=False)]
        pieces = [fillers[i] for i in rng.integers(spec.num_symptom_chars, size=int(rng.integers(s_lo, s_hi + 1)))]
        for unit in chosen + [markers[r] for r in rels]:
            pieces.insert(int(rng.integers(len(pieces) + 1)), unit)
        symptom = "".join(pieces)
        world.records.append(Record(symptom, world.solve(symptom)))

    order = rng.permutation(spec.num_examples)
    n_train, n_valid, _ = _split_sizes(spec.num_examples)
    world.splits = {
        "train": sorted(int(i) for i in order[:n_train]),
        "valid": sorted(int(i) for i in order[n_train : n_train + n_valid]),
        "test": sorted(int(i) for i in order[n_train + n_valid :]),
    }
    return world


def write_world(world: World, out_dir: str | Path) -> dict[str, Path]:
    """Emit herbs.txt, kg.tsv, corpus.txt, vocab.txt, dataset/split JSON-lines and world.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / fname for name, fname in [
        ("herbs", "herbs.txt"), ("kg", "kg.tsv"), ("corpus", "corpus.txt"), ("vocab", "vocab.txt"),
        ("dataset", "dataset.jsonl"), ("train", "train.jsonl"), ("valid", "valid.jsonl"),
        ("test", "test.jsonl"), ("world", "world.json"),
    ]}
    paths["herbs"].write_text("\n".join(world.herbs) + "\n", encoding="utf-8")
    world.kg().save(paths["kg"])
    corpus = world.corpus()
    paths["corpus"].write_text("\n".join(corpus) + "\n", encoding="utf-8")
    vocab, _, _ = build_vocabulary(corpus + [r.symptom for r in world.records], world.herbs)
    vocab.save(paths["vocab"])
    save_records(world.records, paths["dataset"])
    for name in ("train", "valid", "test"):
        save_records(world.split(name), paths[name])
    meta = {
        "spec": asdict(world.spec),
        "anchors": world.anchors,
        "markers": world.markers,
        "companions": world.companions,
        "attributes": world.attributes,
        "splits": world.splits,
    }
    paths["world"].write_text(json.dumps(meta, ensure_ascii=False, sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")
    return paths


def load_world(path: str | Path) -> World:
    """Rebuild a world from its world.json and the dataset next to it."""
    path = Path(path)
    meta = json.loads(path.read_text(encoding="utf-8"))
    raw = meta["spec"]
    spec = SynthSpec(**{**raw, "anchors_per_example": tuple(raw["anchors_per_example"]),
                        "relations_per_example": tuple(raw["relations_per_example"]),
                        "symptom_length": tuple(raw["symptom_length"])})
    records = load_records(path.parent / "dataset.jsonl")
    return World(spec, meta["anchors"], meta["markers"], meta["companions"], meta["attributes"], records, meta["splits"])
