"""Model inputs: token/segment/position ids, additive attention masks, loss targets.

Sequence layout for seq2seq examples::

    [CLS] X [SEP] Y [SEP] Z

X is the symptom text, Y the herbs joined by the delimiter token, and Z the
linearized knowledge of each herb in Y. Masks are additive (0 = visible,
-inf = hidden):

* source rows ([CLS], X, first [SEP]) see exactly the source columns;
* a Y row sees the source, Y columns up to and including itself, and the Z
  span of the herb that owns it (delimiters and the closing [SEP] belong to
  the herb they close);
* a Z row sees the source and its own Z span.

Training targets are shifted: the logits of row ``p - 1`` are scored against
the token at loss position ``p``.

Position ids run ``0..N-1`` by default (``positions="sequential"``). With
``positions="herb"`` each Z span instead continues from the end of its owner
herb's name, so a span gets the same position ids during training and at every
decoding step (sequential Z positions depend on the full length of Y, which is
unknown while decoding).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from herbgen.errors import DataError
from herbgen.kg import KnowledgeGraph, Triple, linearize
from herbgen.vocab import EntityRegistry, Vocabulary, find_herb_spans

NEG_INF = float("-inf")
SEG_A = 0
SEG_B = 1
POSITION_SCHEMES = ("sequential", "herb")


@dataclass(frozen=True)
class SegmentLayout:
    cls: int
    x_range: tuple[int, int]
    sep: int
    y_range: tuple[int, int]
    closing: int  # final [SEP] in training, the [MASK] slot at inference
    z_ranges: tuple[tuple[int, int], ...]
    length: int

    @property
    def source_end(self) -> int:
        return self.sep + 1

    def tiles(self) -> list[tuple[int, int]]:
        """Ranges in sequence order; together they partition ``0..length-1``."""
        out = [(self.cls, self.cls + 1), self.x_range, (self.sep, self.sep + 1), self.y_range,
               (self.closing, self.closing + 1)]
        out.extend(self.z_ranges)
        return out


@dataclass
class EncodedExample:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    mask: np.ndarray
    loss_positions: np.ndarray
    targets: np.ndarray
    shift: int = 1
    layout: SegmentLayout | None = None
    herb_spans: list[tuple[int, int]] = field(default_factory=list)
    knowledge_spans: list[tuple[int, int, int]] = field(default_factory=list)
    owners: np.ndarray | None = None
    truncated: bool = False
    query_row: int | None = None

    def __len__(self) -> int:
        return len(self.token_ids)

    def loss_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Rows whose logits are scored, and the target id for each."""
        pos = np.flatnonzero(self.loss_positions)
        return pos - self.shift, self.targets[pos]


def _herb_ids(vocab: Vocabulary, herb: str) -> list[int]:
    ids = vocab.encode(herb)
    if not ids:
        raise DataError("empty herb name")
    if vocab.unk_id in ids:
        raise DataError(f"herb {herb!r} contains characters outside the vocabulary")
    if vocab.delim_id in ids:
        raise DataError(f"herb {herb!r} contains the delimiter")
    return ids


def _knowledge_parts(
    herbs: Sequence[str | None],
    vocab: Vocabulary,
    kg: KnowledgeGraph | None,
    mode: str,
    rng: np.random.Generator | None,
) -> list[tuple[int, list[list[int]]]]:
    """Per owner herb index: encoded triples (one id list per triple)."""
    if kg is None or mode == "none":
        return []
    parts = []
    for i, herb in enumerate(herbs):
        if herb is None:
            continue
        triples: list[Triple] = kg.knowledge_for(herb, mode, rng)
        if triples:
            parts.append((i, [vocab.encode(linearize(herb, [t])) for t in triples]))
    return parts


def _fit_knowledge(parts, budget: int) -> tuple[list[tuple[int, list[int]]], bool]:
    """Drop whole triples from the tail until the knowledge fits ``budget`` tokens."""
    parts = [(owner, [list(t) for t in triples]) for owner, triples in parts]
    total = sum(len(t) for _, triples in parts for t in triples)
    truncated = False
    while total > budget and parts:
        owner, triples = parts[-1]
        total -= len(triples.pop())
        truncated = True
        if not triples:
            parts.pop()
    flat = [(owner, [i for t in triples for i in t]) for owner, triples in parts]
    return flat, truncated


def _position_ids(n: int, z_spans, herb_ends: dict[int, int], scheme: str) -> np.ndarray:
    if scheme not in POSITION_SCHEMES:
        raise ValueError(f"positions must be one of {POSITION_SCHEMES}")
    pos = np.arange(n, dtype=np.int64)
    if scheme == "herb":
        for s, e, owner in z_spans:
            pos[s:e] = herb_ends[owner] + np.arange(e - s)
    return pos


def _assemble(
    vocab: Vocabulary,
    x_ids: Sequence[int],
    y_ids: Sequence[int],
    y_owner: Sequence[int],
    closing_id: int,
    closing_owner: int,
    z_parts: Sequence[tuple[int, list[int]]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, SegmentLayout, list[tuple[int, int, int]], np.ndarray]:
    n_x, n_y = len(x_ids), len(y_ids)
    src_end = n_x + 2
    closing = src_end + n_y
    tokens = [vocab.cls_id, *x_ids, vocab.sep_id, *y_ids, closing_id]
    segments = [SEG_A] * src_end + [SEG_B] * (n_y + 1)
    owners = [-1] * src_end + list(y_owner) + [closing_owner]
    z_spans = []
    for owner, ids in z_parts:
        start = len(tokens)
        tokens.extend(ids)
        segments.extend([SEG_A] * len(ids))
        owners.extend([owner] * len(ids))
        z_spans.append((start, len(tokens), owner))
    n = len(tokens)

    mask = np.full((n, n), NEG_INF)
    mask[:src_end, :src_end] = 0.0
    span_of = {owner: (s, e) for s, e, owner in z_spans}
    for p in range(src_end, closing + 1):
        mask[p, :src_end] = 0.0
        mask[p, src_end : p + 1] = 0.0
        span = span_of.get(owners[p])
        if span is not None:
            mask[p, span[0] : span[1]] = 0.0
    for s, e, _ in z_spans:
        mask[s:e, :src_end] = 0.0
        mask[s:e, s:e] = 0.0

    layout = SegmentLayout(
        cls=0,
        x_range=(1, 1 + n_x),
        sep=1 + n_x,
        y_range=(src_end, closing),
        closing=closing,
        z_ranges=tuple((s, e) for s, e, _ in z_spans),
        length=n,
    )
    return (np.asarray(tokens, dtype=np.int64), np.asarray(segments, dtype=np.int64), mask,
            layout, z_spans, np.asarray(owners, dtype=np.int64))


def build_finetune_example(
    symptoms: str,
    herbs: Sequence[str],
    vocab: Vocabulary,
    kg: KnowledgeGraph | None = None,
    mode: str = "all",
    rng: np.random.Generator | None = None,
    max_len: int = 256,
    positions: str = "sequential",
) -> EncodedExample:
    """Teacher-forced seq2seq example with per-herb knowledge visibility."""
    if not herbs:
        raise DataError("a prescription needs at least one herb")
    x_ids = vocab.encode(symptoms)
    if not x_ids:
        raise DataError("empty symptom text")
    y_ids: list[int] = []
    y_owner: list[int] = []
    herb_spans = []
    base = len(x_ids) + 2
    for i, herb in enumerate(herbs):
        if i:
            y_ids.append(vocab.delim_id)
            y_owner.append(i - 1)
        ids = _herb_ids(vocab, herb)
        herb_spans.append((base + len(y_ids), base + len(y_ids) + len(ids)))
        y_ids.extend(ids)
        y_owner.extend([i] * len(ids))
    fixed = base + len(y_ids) + 1
    if fixed > max_len:
        raise DataError(f"symptoms + prescription need {fixed} positions; max_len is {max_len}")
    z_parts, truncated = _fit_knowledge(_knowledge_parts(herbs, vocab, kg, mode, rng), max_len - fixed)
    tokens, segments, mask, layout, z_spans, owners = _assemble(
        vocab, x_ids, y_ids, y_owner, vocab.sep_id, len(herbs) - 1, z_parts
    )
    n = len(tokens)
    loss = np.zeros(n, dtype=bool)
    loss[layout.y_range[0] : layout.closing + 1] = True
    targets = np.where(loss, tokens, -1)
    herb_ends = {i: end for i, (_, end) in enumerate(herb_spans)}
    return EncodedExample(
        token_ids=tokens,
        segment_ids=segments,
        position_ids=_position_ids(n, z_spans, herb_ends, positions),
        mask=mask,
        loss_positions=loss,
        targets=targets,
        shift=1,
        layout=layout,
        herb_spans=herb_spans,
        knowledge_spans=z_spans,
        owners=owners,
        truncated=truncated,
    )


def split_generated(ids: Sequence[int], delim_id: int) -> list[list[int]]:
    """Split generated Y ids on the delimiter; the last segment may be partial or empty."""
    segments: list[list[int]] = [[]]
    for i in ids:
        if i == delim_id:
            segments.append([])
        else:
            segments[-1].append(int(i))
    return segments


def resolve_generated_herbs(
    ids: Sequence[int], vocab: Vocabulary, registry: EntityRegistry | None
) -> list[str | None]:
    """Herb identity of each generated segment.

    Closed segments are identified by their text; the trailing partial segment
    only when exactly one registered herb is consistent with it.
    """
    segments = split_generated(ids, vocab.delim_id)
    out: list[str | None] = [vocab.decode(seg) if seg else None for seg in segments[:-1]]
    partial = segments[-1]
    out.append(registry.resolve(partial) if (registry is not None and partial) else None)
    return out


def build_inference_prefix(
    symptoms: str,
    generated: Sequence[int],
    vocab: Vocabulary,
    kg: KnowledgeGraph | None = None,
    registry: EntityRegistry | None = None,
    knowledge_at_inference: bool = True,
    max_len: int = 256,
    mode: str = "all",
    positions: str = "sequential",
) -> EncodedExample:
    """``[CLS] X [SEP] y_1 ... [MASK] Z`` for one decoding step.

    ``generated`` holds the Y token ids produced so far. The next token is read
    from the row just before ``[MASK]``; the ``[MASK]`` row itself sees no
    knowledge span.
    """
    x_ids = vocab.encode(symptoms)
    if not x_ids:
        raise DataError("empty symptom text")
    y_ids = [int(i) for i in generated]
    y_owner = []
    seg = 0
    for i in y_ids:
        y_owner.append(seg)
        seg += i == vocab.delim_id
    fixed = len(x_ids) + 2 + len(y_ids) + 1
    if fixed > max_len:
        raise DataError(f"prefix needs {fixed} positions; max_len is {max_len}")
    z_parts: list[tuple[int, list[int]]] = []
    herb_ends: dict[int, int] = {}
    truncated = False
    if knowledge_at_inference and kg is not None:
        herbs = resolve_generated_herbs(y_ids, vocab, registry)
        z_parts, truncated = _fit_knowledge(_knowledge_parts(herbs, vocab, kg, mode, None), max_len - fixed)
        start = len(x_ids) + 2
        for i, seg in enumerate(split_generated(y_ids, vocab.delim_id)):
            if herbs[i] is not None:
                herb_ends[i] = start + len(vocab.encode(herbs[i]))
            start += len(seg) + 1
    tokens, segments, mask, layout, z_spans, owners = _assemble(
        vocab, x_ids, y_ids, y_owner, vocab.mask_id, -1, z_parts
    )
    n = len(tokens)
    return EncodedExample(
        token_ids=tokens,
        segment_ids=segments,
        position_ids=_position_ids(n, z_spans, herb_ends, positions),
        mask=mask,
        loss_positions=np.zeros(n, dtype=bool),
        targets=np.full(n, -1, dtype=np.int64),
        shift=1,
        layout=layout,
        knowledge_spans=z_spans,
        owners=owners,
        truncated=truncated,
        query_row=layout.closing - 1,
    )


def build_pretrain_example(
    text: str,
    mask_rate: float,
    vocab: Vocabulary,
    registry: EntityRegistry | None,
    rng: np.random.Generator,
    max_len: int = 512,
) -> EncodedExample:
    """Whole-entity masked LM example over ``[CLS] text [SEP]``.

    Registered herb spans are selection units: a selected herb is masked in
    full. Every other character is its own unit. When ``mask_rate > 0`` at
    least one unit is masked.
    """
    if not 0.0 <= mask_rate <= 1.0:
        raise ValueError("mask_rate must lie in [0, 1]")
    ids = vocab.encode(text)[: max_len - 2]
    if not ids:
        raise DataError("empty text")
    units: list[tuple[int, int]] = []
    covered = 0
    spans = find_herb_spans(ids, registry) if registry is not None else []
    for s, e, _ in spans:
        units.extend((i, i + 1) for i in range(covered, s))
        units.append((s, e))
        covered = e
    units.extend((i, i + 1) for i in range(covered, len(ids)))

    chosen = rng.random(len(units)) < mask_rate
    if mask_rate > 0 and not chosen.any():
        chosen[int(rng.integers(len(units)))] = True

    tokens = np.asarray([vocab.cls_id, *ids, vocab.sep_id], dtype=np.int64)
    n = len(tokens)
    loss = np.zeros(n, dtype=bool)
    for (s, e), c in zip(units, chosen):
        if c:
            loss[s + 1 : e + 1] = True
    targets = np.where(loss, tokens, -1)
    masked = tokens.copy()
    masked[loss] = vocab.mask_id
    return EncodedExample(
        token_ids=masked,
        segment_ids=np.zeros(n, dtype=np.int64),
        position_ids=np.arange(n, dtype=np.int64),
        mask=np.zeros((n, n)),
        loss_positions=loss,
        targets=targets,
        shift=0,
        herb_spans=[(s + 1, e + 1) for s, e, _ in spans],
    )


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, N)
    segment_ids: np.ndarray
    position_ids: np.ndarray
    mask: np.ndarray  # (B, N, N)
    row_batch: np.ndarray  # scored rows: batch index
    row_pos: np.ndarray  # scored rows: position
    row_targets: np.ndarray
    row_weights: np.ndarray  # 1 / (examples with targets * rows in that example)

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def collate(examples: Sequence[EncodedExample], pad_id: int = 0) -> Batch:
    """Right-pad examples into one batch.

    Padding columns are hidden from every row; a padding row sees only itself.
    The weights make the batch loss the mean of per-example mean losses.
    """
    b = len(examples)
    n = max(len(ex) for ex in examples)
    tokens = np.full((b, n), pad_id, dtype=np.int64)
    segments = np.zeros((b, n), dtype=np.int64)
    positions = np.zeros((b, n), dtype=np.int64)
    mask = np.full((b, n, n), NEG_INF)
    diag = np.arange(n)
    scored = [ex.loss_rows() for ex in examples]
    b_eff = sum(1 for rows, _ in scored if len(rows)) or 1
    rb, rp, rt, rw = [], [], [], []
    for i, ex in enumerate(examples):
        m = len(ex)
        tokens[i, :m] = ex.token_ids
        segments[i, :m] = ex.segment_ids
        positions[i, :m] = ex.position_ids
        mask[i, :m, :m] = ex.mask
        mask[i, diag[m:], diag[m:]] = 0.0
        rows, tgt = scored[i]
        if len(rows):
            rb.append(np.full(len(rows), i))
            rp.append(rows)
            rt.append(tgt)
            rw.append(np.full(len(rows), 1.0 / (b_eff * len(rows))))
    if rb:
        cat = np.concatenate
        row_batch, row_pos, row_targets, row_weights = cat(rb), cat(rp), cat(rt), cat(rw)
    else:
        row_batch = row_pos = row_targets = np.zeros(0, dtype=np.int64)
        row_weights = np.zeros(0)
    return Batch(tokens, segments, positions, mask, row_batch.astype(np.int64),
                 row_pos.astype(np.int64), row_targets.astype(np.int64), row_weights)
