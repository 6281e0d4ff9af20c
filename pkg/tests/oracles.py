"""Independent re-derivations used as test oracles."""

import numpy as np

from herbgen.encoding import NEG_INF
from herbgen.kg import linearize

from conftest import HERBS


def expected_mask(symptoms, herbs, vocab, kg, mode="all"):
    """Mask rebuilt from first principles: ownership from the herb list, spans from lengths."""
    n_x = len(symptoms)
    src = n_x + 2
    owner = []
    for i, h in enumerate(herbs):
        owner += [i] * len(h)
        owner.append(i)  # the delimiter (or closing [SEP]) that ends herb i
    n_y = len(owner)
    z = []
    start = src + n_y
    for i, h in enumerate(herbs):
        text = "" if kg is None or mode == "none" else linearize(h, kg.knowledge_for(h, "all"))
        if text:
            z.append((start, start + len(text), i))
            start += len(text)
    n = start
    m = np.full((n, n), NEG_INF)
    for r in range(n):
        for c in range(n):
            if r < src:
                ok = c < src
            elif r < src + n_y:
                o = owner[r - src]
                ok = c < src or src <= c <= r or any(s <= c < e and own == o for s, e, own in z)
            else:
                (s, e, _), = [span for span in z if span[0] <= r < span[1]]
                ok = c < src or s <= c < e
            if ok:
                m[r, c] = 0.0
    return m


def random_prescription(rng, k=None):
    k = k or int(rng.integers(1, len(HERBS) + 1))
    return [HERBS[i] for i in rng.choice(len(HERBS), size=k, replace=False)]


def reachable(mask: np.ndarray, layers: int) -> np.ndarray:
    """``out[i, j]``: can token j influence the output at row i through ``layers`` attention layers."""
    step = (mask == 0).astype(np.int64)
    np.fill_diagonal(step, 1)  # residual path
    out = np.eye(len(mask), dtype=np.int64)
    for _ in range(layers):
        out = np.minimum(out @ step, 1)
    return out.astype(bool)
