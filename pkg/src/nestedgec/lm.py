"""Interpolated modified Kneser-Ney n-gram language model and n-best reranking.

Sentences are scored as ``<s> w1 .. wn </s>`` with a single start symbol.
Highest-order n-grams and n-grams starting with ``<s>`` keep their raw
counts; every other lower-order n-gram uses its continuation count (number
of distinct left extensions). Each order has three discounts D1, D2, D3+
estimated from count-of-counts. The unigram level is interpolated with a
uniform distribution over the vocabulary, which includes ``<unk>`` and
``</s>``; any word outside the training vocabulary is scored as ``<unk>``.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .records import json_record, read_json_record, read_records, write_records

LM_MAGIC = b"NKLM"
LM_BOS = "<s>"
LM_EOS = "</s>"
LM_UNK = "<unk>"
DEFAULT_DISCOUNTS = (0.5, 1.0, 1.5)


def estimate_discounts(count_of_counts: Counter) -> tuple[float, float, float]:
    """D1, D2, D3+ from the numbers n1..n4 of n-grams seen exactly 1..4 times.

    Any discount the statistics cannot support (a zero denominator or a
    value outside (0, k]) falls back to the corresponding default.
    """
    n = [count_of_counts.get(k, 0) for k in range(1, 5)]
    out = []
    y = n[0] / (n[0] + 2 * n[1]) if n[0] + 2 * n[1] > 0 else float("nan")
    for k in (1, 2, 3):
        d = k - (k + 1) * y * n[k] / n[k - 1] if n[k - 1] > 0 else float("nan")
        if not (math.isfinite(d) and 0 < d <= k):
            d = DEFAULT_DISCOUNTS[k - 1]
        out.append(float(d))
    return tuple(out)


@dataclass
class _Context:
    """Adjusted counts following one context at one order."""

    counts: dict[str, int]
    total: int
    gamma: float


class NgramModel:
    """Query interface over stored adjusted counts and discounts."""

    def __init__(self, order: int, vocab: Sequence[str], counts: list[dict[tuple[str, ...], int]],
                 discounts: list[tuple[float, float, float]]):
        if order < 1:
            raise ValueError("order must be at least 1")
        self.order = order
        self.vocab = tuple(vocab)                      # predictable words, incl. </s> and <unk>
        self.vocab_set = frozenset(self.vocab)
        self.counts = counts                           # counts[k-1]: n-gram of length k -> adjusted count
        self.discounts = discounts
        self.tables: list[dict[tuple[str, ...], _Context]] = []
        for k in range(order):
            by_ctx: dict[tuple[str, ...], dict[str, int]] = defaultdict(dict)
            for gram, c in counts[k].items():
                by_ctx[gram[:-1]][gram[-1]] = c
            d = discounts[k]
            table = {}
            for ctx, words in by_ctx.items():
                total = sum(words.values())
                kinds = Counter(min(c, 3) for c in words.values())
                gamma = (d[0] * kinds[1] + d[1] * kinds[2] + d[2] * kinds[3]) / total
                table[ctx] = _Context(words, total, gamma)
            self.tables.append(table)

    def _discount(self, k: int, c: int) -> float:
        return self.discounts[k][min(c, 3) - 1]

    def map_word(self, w: str) -> str:
        return w if w in self.vocab_set or w == LM_BOS else LM_UNK

    def prob(self, word: str, context: Sequence[str] = ()) -> float:
        """p(word | context) using at most ``order - 1`` context words."""
        word = self.map_word(word)
        if word == LM_BOS:
            raise ValueError("the start symbol is never predicted")
        ctx = tuple(self.map_word(w) for w in context)[max(0, len(context) - self.order + 1):]
        return self._prob(word, ctx)

    def _prob(self, word: str, ctx: tuple[str, ...]) -> float:
        k = len(ctx)
        lower = 1.0 / len(self.vocab) if k == 0 else self._prob(word, ctx[1:])
        entry = self.tables[k].get(ctx)
        if entry is None:
            return lower
        c = entry.counts.get(word, 0)
        own = max(c - self._discount(k, c), 0.0) / entry.total if c else 0.0
        return own + entry.gamma * lower

    def logprob(self, word: str, context: Sequence[str] = ()) -> float:
        return math.log(self.prob(word, context))

    def backoff(self, context: Sequence[str]) -> float:
        """Weight given to the shorter context after ``context`` (1 if unseen)."""
        ctx = tuple(context)
        entry = self.tables[len(ctx)].get(ctx) if len(ctx) < self.order else None
        return entry.gamma if entry is not None else 1.0

    def contexts(self) -> list[tuple[str, ...]]:
        """Every context observed in training, shortest first."""
        return [ctx for table in self.tables for ctx in sorted(table)]

    # -- persistence ---------------------------------------------------------------

    def _payload(self) -> dict:
        return {"order": self.order, "vocab": list(self.vocab),
                "discounts": [list(d) for d in self.discounts],
                "counts": [[[list(g), c] for g, c in sorted(table.items())] for table in self.counts]}

    def save(self, path) -> None:
        write_records(path, LM_MAGIC, {"lm/model": json_record(self._payload())})

    @classmethod
    def load(cls, path) -> "NgramModel":
        p = read_json_record(read_records(path, LM_MAGIC)["lm/model"])
        counts = [{tuple(g): int(c) for g, c in table} for table in p["counts"]]
        return cls(p["order"], p["vocab"], counts, [tuple(d) for d in p["discounts"]])

    def write_arpa(self, path) -> None:
        """ARPA text export: log10 interpolated probabilities and backoff weights."""
        sections = []
        sizes = []
        for k in range(self.order):
            if k == 0:
                grams = [(w,) for w in sorted(self.vocab)] + [(LM_BOS,)]
            else:
                grams = sorted(self.counts[k])
            lines = []
            for g in grams:
                p = -99.0 if g == (LM_BOS,) else math.log10(self._prob(g[-1], g[:-1]))
                line = f"{p:.7f}\t{' '.join(g)}"
                if k + 1 < self.order and g in self.tables[k + 1]:
                    line += f"\t{math.log10(self.tables[k + 1][g].gamma) if self.tables[k + 1][g].gamma > 0 else -99.0:.7f}"
                lines.append(line)
            sizes.append(len(grams))
            sections.append(f"\\{k + 1}-grams:\n" + "\n".join(lines) + "\n")
        header = "\\data\\\n" + "".join(f"ngram {k + 1}={n}\n" for k, n in enumerate(sizes))
        Path(path).write_text(header + "\n" + "\n".join(sections) + "\n\\end\\\n", encoding="utf-8")


def _ngrams(tokens: Sequence[str], k: int) -> Iterable[tuple[str, ...]]:
    """k-grams ending at each predicted position of ``<s> tokens </s>``."""
    seq = (LM_BOS,) + tuple(tokens) + (LM_EOS,)
    for i in range(max(1, k - 1), len(seq)):
        if i - k + 1 >= 0:
            yield seq[i - k + 1:i + 1]


def train_kn_lm(corpus: Sequence[Sequence[str]], order: int = 5) -> NgramModel:
    """Estimate an interpolated modified Kneser-Ney model from tokenized sentences."""
    if order < 1:
        raise ValueError("order must be at least 1")
    corpus = [tuple(s) for s in corpus]
    if not corpus:
        raise ValueError("cannot train a language model on an empty corpus")
    for s in corpus:
        if LM_BOS in s or LM_EOS in s:
            raise ValueError("training text must not contain sentence boundary symbols")
    raw = [Counter() for _ in range(order)]
    for s in corpus:
        for k in range(1, order + 1):
            raw[k - 1].update(_ngrams(s, k))
    adjusted: list[dict[tuple[str, ...], int]] = [dict() for _ in range(order)]
    adjusted[order - 1] = dict(raw[order - 1])
    for k in range(order - 1, 0, -1):
        cont = Counter(g[1:] for g in raw[k])      # distinct left extensions
        table = {}
        for g, c in raw[k - 1].items():
            table[g] = c if g[0] == LM_BOS else cont.get(g, 0)
        adjusted[k - 1] = {g: c for g, c in table.items() if c > 0}
    discounts = [estimate_discounts(Counter(min(c, 4) for c in adjusted[k].values())) for k in range(order)]
    words = sorted({w for s in corpus for w in s} | {LM_EOS, LM_UNK})
    return NgramModel(order, words, adjusted, discounts)


def lm_logprob(model: NgramModel, tokens: Sequence[str]) -> float:
    """Natural-log probability of ``<s> tokens </s>``; unknown words score as ``<unk>``."""
    seq = [LM_BOS] + list(tokens)
    total = 0.0
    for i in range(1, len(seq) + 1):
        word = seq[i] if i < len(seq) else LM_EOS
        total += model.logprob(word, seq[max(0, i - model.order + 1):i])
    return total


# -- reranking ------------------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    tokens: tuple[str, ...]
    nn_logprob: float


def rerank_scores(candidates: Sequence[Candidate], model: NgramModel | None, lam: float) -> list[float]:
    if lam < 0:
        raise ValueError("interpolation weight must be non-negative")
    if lam == 0 or model is None:
        return [c.nn_logprob for c in candidates]
    return [c.nn_logprob + lam * lm_logprob(model, c.tokens) for c in candidates]


def rerank(candidates: Sequence[Candidate], model: NgramModel | None, lam: float) -> list[int]:
    """Indices of ``candidates`` ordered by ``log P_NN + lam * log P_LM``, best first.

    Ties fall back to the neural score and then to the token sequence, so the
    result does not depend on the input order. A list already in n-best
    order (neural score descending, ties by tokens) is unchanged at lam=0.
    """
    s = rerank_scores(candidates, model, lam)
    return sorted(range(len(candidates)),
                  key=lambda i: (-s[i], -candidates[i].nn_logprob, candidates[i].tokens, i))


def lambda_grid(lo: float = 0.0, hi: float = 2.0, step: float = 0.1) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


def tune_lambda(nbest: Sequence[Sequence[Candidate]], model: NgramModel,
                evaluate: Callable[[list[tuple[str, ...]]], float],
                grid: Sequence[float] | None = None) -> tuple[float, dict[float, float]]:
    """Pick the weight maximising ``evaluate`` (e.g. dev F0.5) of the reranked 1-best.

    Returns the chosen weight and the score at every grid point; ties go to
    the smaller weight.
    """
    grid = lambda_grid() if grid is None else list(grid)
    if not grid:
        raise ValueError("empty search grid for the interpolation weight")
    lm_scores = [[lm_logprob(model, c.tokens) for c in cands] for cands in nbest]
    results: dict[float, float] = {}
    for lam in grid:
        outputs = []
        for cands, lms in zip(nbest, lm_scores):
            if not cands:
                outputs.append(())
                continue
            s = [c.nn_logprob + (lam * l if lam else 0.0) for c, l in zip(cands, lms)]
            best = min(range(len(cands)), key=lambda i: (-s[i], -cands[i].nn_logprob, cands[i].tokens, i))
            outputs.append(cands[best].tokens)
        results[lam] = float(evaluate(outputs))
    best_lam = min(results, key=lambda lam: (-results[lam], lam))
    return best_lam, results


def group_nbest(entries, n_sentences: int | None = None) -> list[list[Candidate]]:
    """Group n-best file entries (with ``index``/``tokens``/``nn_logprob``) per sentence."""
    size = n_sentences if n_sentences is not None else (max((e.index for e in entries), default=-1) + 1)
    out: list[list[Candidate]] = [[] for _ in range(size)]
    for e in entries:
        if not 0 <= e.index < size:
            raise ValueError(f"n-best index {e.index} out of range")
        out[e.index].append(Candidate(tuple(e.tokens), float(e.nn_logprob)))
    return out


def sample_contexts(model: NgramModel, n: int, rng: np.random.Generator) -> list[tuple[str, ...]]:
    """Random contexts of every length up to ``order - 1``, mixing seen and unseen ones."""
    seen = model.contexts()
    words = list(model.vocab)
    out = []
    for i in range(n):
        if i % 2 == 0 and seen:
            out.append(seen[int(rng.integers(len(seen)))])
        else:
            k = int(rng.integers(model.order))
            ctx = [words[int(j)] for j in rng.integers(len(words), size=k)]
            if k and rng.random() < 0.3:
                ctx[0] = LM_BOS
            out.append(tuple(ctx))
    return out
