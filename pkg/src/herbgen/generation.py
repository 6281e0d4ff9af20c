"""Autoregressive prescription decoding.

Each step rebuilds ``[CLS] X [SEP] y_1 ... [MASK] Z`` and reads the next-token
distribution from the model. Herbs are delimited by the delimiter token;
decoding stops on ``[SEP]`` or once ``max_herbs`` herbs are closed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Protocol, Sequence

import numpy as np

from herbgen.compute import log_softmax
from herbgen.encoding import EncodedExample, build_inference_prefix
from herbgen.errors import DataError
from herbgen.kg import KnowledgeGraph
from herbgen.vocab import EntityRegistry, Vocabulary

STRATEGIES = ("greedy", "beam", "top_k", "top_p", "temperature", "mixed")


class NextTokenModel(Protocol):
    def next_token_logits(self, example: EncodedExample) -> np.ndarray: ...


@dataclass(frozen=True)
class GenerationConfig:
    strategy: str = "mixed"
    temperature: float = 0.2
    top_p: float = 0.8
    top_k: int = 3
    beam_size: int = 5
    max_herbs: int = 20
    ban_repeats: bool = True
    knowledge_at_inference: bool = True
    seed: int = 0
    max_herb_len: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.strategy in ("temperature", "mixed") and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.strategy in ("top_p", "mixed") and not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.strategy == "top_k" and self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.strategy == "beam" and self.beam_size < 1:
            raise ValueError("beam_size must be at least 1")
        if self.max_herbs < 1:
            raise ValueError("max_herbs must be at least 1")


# -- sampling ----------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def nucleus_support(probs: np.ndarray, p: float) -> np.ndarray:
    """Smallest probability-sorted prefix with mass >= p, plus ties with its last member."""
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p * (1 - 1e-12), side="left")) + 1
    k = min(k, len(order))
    cutoff = probs[order[k - 1]]
    while k < len(order) and probs[order[k]] == cutoff:
        k += 1
    return np.sort(order[:k])


def next_token_distribution(
    logits: np.ndarray, config: GenerationConfig, banned: Iterable[int] = ()
) -> np.ndarray:
    """The distribution ``sample_next`` draws from (one-hot for greedy/beam)."""
    z = np.array(logits, dtype=np.float64)
    banned = list(banned)
    if banned:
        z[banned] = -np.inf
    if not np.isfinite(z).any():
        raise DataError("every token is banned")
    s = config.strategy
    if s in ("greedy", "beam"):
        out = np.zeros_like(z)
        out[int(np.argmax(z))] = 1.0
        return out
    if s in ("temperature", "mixed"):
        if not config.temperature > 0:
            raise ValueError("temperature must be positive")
        z = z / config.temperature
    probs = softmax(z)
    if s == "top_k":
        keep = np.argsort(-probs, kind="stable")[: config.top_k]
    elif s in ("top_p", "mixed"):
        keep = nucleus_support(probs, config.top_p)
    else:
        return probs
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def sample_next(
    logits: np.ndarray, config: GenerationConfig, rng: np.random.Generator, banned: Iterable[int] = ()
) -> int:
    probs = next_token_distribution(logits, config, banned)
    if config.strategy in ("greedy", "beam"):
        return int(np.argmax(probs))
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    idx = min(idx, len(probs) - 1)
    while probs[idx] == 0.0:  # guard against landing on a zero-width bin at the top end
        idx -= 1
    return idx


# -- decoding state ------------------------------------------------------------

@dataclass(frozen=True)
class DecodeState:
    tokens: tuple[int, ...] = ()
    herbs: tuple[str, ...] = ()
    partial: tuple[int, ...] = ()
    done: bool = False


class _Rules:
    """Token bans and state transitions shared by sampling and beam search."""

    def __init__(self, vocab: Vocabulary, registry: EntityRegistry | None, config: GenerationConfig):
        self.vocab = vocab
        self.registry = registry
        self.config = config
        self.max_herb_len = config.max_herb_len or (registry.max_len if registry and len(registry) else 8)
        self.always_banned = [vocab.pad_id, vocab.unk_id, vocab.cls_id, vocab.mask_id]
        self.char_ids = np.array([i for i in range(len(vocab)) if i not in vocab.special_ids], dtype=np.int64)

    def banned(self, st: DecodeState, relax: bool = False) -> list[int]:
        v = self.vocab
        out = list(self.always_banned)
        if not st.partial:
            out.append(v.delim_id)
        if len(st.partial) >= self.max_herb_len:
            out.extend(self.char_ids.tolist())
        if self.config.ban_repeats and not relax:
            emitted = set(st.herbs)
            if st.partial and v.decode(st.partial) in emitted:
                out.extend([v.delim_id, v.sep_id])
            if emitted:
                out.extend(self._dead_end_chars(st.partial, emitted))
        return out

    def _closed_off(self, ids: tuple[int, ...], emitted: set[str]) -> bool:
        """A herb starting with ``ids`` can only end as a repeat."""
        if self.vocab.decode(ids) not in emitted:
            return False
        if len(ids) >= self.max_herb_len:
            return True
        return all(self._closed_off(ids + (int(c),), emitted) for c in self.char_ids)

    def _dead_end_chars(self, partial: tuple[int, ...], emitted: set[str]) -> list[int]:
        """Chars that would steer the current herb into a repeat.

        Banned: extensions that are closed off, and (herb-level ban) extensions
        whose every registered completion has already been emitted.
        """
        k = len(partial)
        out = set()
        for herb in emitted:
            ids = tuple(self.vocab.encode(herb))
            if len(ids) <= k or ids[:k] != partial:
                continue
            t = ids[k]
            if self._closed_off(partial + (t,), emitted):
                out.add(t)
            elif self.registry is not None and herb in self.registry:
                if self.registry.completions(partial + (t,)) <= emitted:
                    out.add(t)
        return sorted(out)

    def advance(self, st: DecodeState, tok: int) -> DecodeState:
        v = self.vocab
        tokens = st.tokens + (tok,)
        if tok in (v.sep_id, v.delim_id):
            herbs = st.herbs + ((v.decode(st.partial),) if st.partial else ())
            done = tok == v.sep_id or len(herbs) >= self.config.max_herbs
            return DecodeState(tokens, herbs, (), done)
        return DecodeState(tokens, st.herbs, st.partial + (tok,), False)

    def force_close(self, st: DecodeState) -> DecodeState:
        herbs = st.herbs + ((self.vocab.decode(st.partial),) if st.partial else ())
        return DecodeState(st.tokens + (self.vocab.sep_id,), herbs, (), True)

    def finalize(self, st: DecodeState) -> list[str]:
        herbs = list(st.herbs)
        if self.config.ban_repeats:
            herbs = list(dict.fromkeys(herbs))
        return herbs


class Generator:
    """Bundles model, vocabulary, registry and knowledge graph for decoding."""

    def __init__(
        self,
        model: NextTokenModel,
        vocab: Vocabulary,
        registry: EntityRegistry | None = None,
        kg: KnowledgeGraph | None = None,
        max_len: int | None = None,
        positions: str = "sequential",
    ):
        self.model = model
        self.positions = positions
        self.vocab = vocab
        self.registry = registry
        self.kg = kg
        cfg = getattr(model, "cfg", None)
        self.max_len = max_len or (cfg.max_len if cfg is not None else 256)

    def _prefix(self, symptoms: str, st: DecodeState, config: GenerationConfig) -> EncodedExample:
        return build_inference_prefix(
            symptoms, st.tokens, self.vocab, self.kg, self.registry,
            knowledge_at_inference=config.knowledge_at_inference, max_len=self.max_len,
            positions=self.positions,
        )

    def _fits(self, symptoms: str, st: DecodeState) -> bool:
        return len(symptoms) + len(st.tokens) + 4 <= self.max_len

    def _step_budget(self, rules: _Rules, config: GenerationConfig) -> int:
        return config.max_herbs * (rules.max_herb_len + 1) + 1

    def generate(self, symptoms: str, config: GenerationConfig | None = None,
                 rng: np.random.Generator | None = None) -> list[str]:
        config = config or GenerationConfig()
        if not self.vocab.encode(symptoms):
            raise DataError("symptom text is empty")
        if config.strategy == "beam":
            return self.beam_search(symptoms, config)
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        rules = _Rules(self.vocab, self.registry, config)
        st = DecodeState()
        for _ in range(self._step_budget(rules, config)):
            if st.done:
                break
            if not self._fits(symptoms, st):
                st = rules.force_close(st)
                break
            logits = self.model.next_token_logits(self._prefix(symptoms, st, config))
            banned = rules.banned(st)
            if len(set(banned)) >= len(logits):
                banned = rules.banned(st, relax=True)
            st = rules.advance(st, sample_next(logits, config, rng, banned))
        if not st.done:
            st = rules.force_close(st)
        return rules.finalize(st)

    def generate_many(self, symptoms: Sequence[str], config: GenerationConfig) -> list[list[str]]:
        """Decode each input with its own RNG stream ``(seed, index)``."""
        return [self.generate(s, config, np.random.default_rng([config.seed, i]))
                for i, s in enumerate(symptoms)]

    def beam_search(self, symptoms: str, config: GenerationConfig) -> list[str]:
        """Highest cumulative log-probability finished hypothesis.

        Ties go to the hypothesis that finished first, then to candidate order
        (beam rank, then token id).
        """
        if not self.vocab.encode(symptoms):
            raise DataError("symptom text is empty")
        rules = _Rules(self.vocab, self.registry, config)
        k = config.beam_size
        alive: list[tuple[float, DecodeState]] = [(0.0, DecodeState())]
        finished: list[tuple[float, int, int, DecodeState]] = []
        for step in range(self._step_budget(rules, config)):
            cands = []
            for score, st in alive:
                if not self._fits(symptoms, st):
                    cands.append((score, rules.force_close(st)))
                    continue
                logits = np.array(self.model.next_token_logits(self._prefix(symptoms, st, config)), dtype=np.float64)
                banned = rules.banned(st)
                if len(set(banned)) >= len(logits):
                    banned = rules.banned(st, relax=True)
                logits[banned] = -np.inf
                logp = log_softmax(logits)
                order = np.argsort(-logp, kind="stable")[:k]
                cands.extend((score + float(logp[t]), rules.advance(st, int(t))) for t in order if np.isfinite(logp[t]))
            ranked = sorted(range(len(cands)), key=lambda i: (-cands[i][0], i))[:k]
            alive = []
            for i in ranked:
                score, st = cands[i]
                if st.done:
                    finished.append((score, step, len(finished), st))
                else:
                    alive.append((score, st))
            if not alive:
                break
            if finished and max(f[0] for f in finished) >= alive[0][0]:
                break
        else:
            finished.extend((s, self._step_budget(rules, config), len(finished) + j, rules.force_close(st))
                            for j, (s, st) in enumerate(alive))
        if not finished:
            return []
        best = min(finished, key=lambda f: (-f[0], f[1], f[2]))
        return rules.finalize(best[3])


def generate(
    symptoms: str,
    model: NextTokenModel,
    vocab: Vocabulary,
    registry: EntityRegistry | None = None,
    kg: KnowledgeGraph | None = None,
    config: GenerationConfig | None = None,
    rng: np.random.Generator | None = None,
) -> list[str]:
    return Generator(model, vocab, registry, kg).generate(symptoms, config, rng)


def beam_search(
    symptoms: str,
    model: NextTokenModel,
    vocab: Vocabulary,
    config: GenerationConfig,
    registry: EntityRegistry | None = None,
    kg: KnowledgeGraph | None = None,
) -> list[str]:
    return Generator(model, vocab, registry, kg).beam_search(symptoms, replace(config, strategy="beam"))
