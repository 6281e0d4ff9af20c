"""Set-based precision / recall / F1 for generated prescriptions."""

from __future__ import annotations

import csv
import math
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from herbgen.errors import DataError


@dataclass(frozen=True)
class EvalResult:
    precision: float
    recall: float
    f1: float
    n_generated: int
    n_reference: int
    n_overlap: int

    def as_percent(self, ndigits: int = 2) -> dict[str, float]:
        return {
            "precision": round(100 * self.precision, ndigits),
            "recall": round(100 * self.recall, ndigits),
            "f1": round(100 * self.f1, ndigits),
        }


def harmonic_mean(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _herb_set(herbs: Iterable[str]) -> set[str]:
    return {h.strip() for h in herbs if h.strip()}


def from_counts(n_generated: int, n_reference: int, n_overlap: int) -> EvalResult:
    if n_reference <= 0:
        raise DataError("reference prescription is empty")
    if not 0 <= n_overlap <= min(n_generated, n_reference):
        raise ValueError("overlap count out of range")
    p = n_overlap / n_generated if n_generated else 0.0
    r = n_overlap / n_reference
    return EvalResult(p, r, harmonic_mean(p, r), n_generated, n_reference, n_overlap)


def score(generated: Iterable[str], reference: Iterable[str]) -> EvalResult:
    """Compare herb sets; duplicates and surrounding whitespace are ignored."""
    g, r = _herb_set(generated), _herb_set(reference)
    if not r:
        raise DataError("reference prescription is empty")
    return from_counts(len(g), len(r), len(g & r))


@dataclass(frozen=True)
class Aggregate:
    macro: EvalResult
    micro: EvalResult
    n_examples: int


def aggregate(results: Sequence[EvalResult]) -> Aggregate:
    """Macro (mean of per-example metrics) and micro (pooled counts) aggregates.

    Macro F1 is the mean of per-example F1, so it need not equal the harmonic
    mean of macro precision and macro recall.
    Sums use ``math.fsum`` so the result does not depend on example order.
    """
    if not results:
        raise ValueError("nothing to aggregate")
    n = len(results)
    tg = sum(r.n_generated for r in results)
    tr = sum(r.n_reference for r in results)
    to = sum(r.n_overlap for r in results)
    mp = math.fsum(r.precision for r in results) / n
    mr = math.fsum(r.recall for r in results) / n
    mf = math.fsum(r.f1 for r in results) / n
    macro = EvalResult(mp, mr, mf, tg, tr, to)
    return Aggregate(macro=macro, micro=from_counts(tg, tr, to), n_examples=n)


def build_report(rows: Sequence[dict]) -> dict:
    """Evaluation report from rows carrying ``generated`` and ``reference`` herb lists."""
    per_example = []
    results = []
    for i, row in enumerate(rows):
        res = score(row["generated"], row["reference"])
        results.append(res)
        entry = {"index": i, **({"symptom": row["symptom"]} if "symptom" in row else {}),
                 "generated": list(row["generated"]), "reference": list(row["reference"]),
                 **asdict(res)}
        per_example.append(entry)
    agg = aggregate(results)
    return {
        "schema": "herbgen.eval/1",
        "n_examples": agg.n_examples,
        "macro": {**asdict(agg.macro), "percent": agg.macro.as_percent()},
        "micro": {**asdict(agg.micro), "percent": agg.micro.as_percent()},
        "examples": per_example,
    }


def write_report(report: dict, path: str | Path, csv_path: str | Path | None = None) -> None:
    Path(path).write_text(json.dumps(report, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
    if csv_path is not None:
        cols = ["index", "precision", "recall", "f1", "n_generated", "n_reference", "n_overlap"]
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in report["examples"]:
                w.writerow([row[c] for c in cols])
