"""Edit extraction, F-beta scoring against M2 gold edits, and error analysis.

System edits come from a token-level Levenshtein alignment of source and
hypothesis in which adjacent non-matching operations are merged. A system
edit is correct iff some gold edit has the same span and replacement; for
multi-annotator gold, each sentence greedily uses the annotator that
maximises the running corpus F-beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Container, Sequence

from .corpus import GoldEdit, M2Document


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class Edit:
    start: int
    end: int
    correction: str          # replacement tokens joined by single spaces ("" = deletion)
    type: str = ""

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.start, self.end, self.correction)

    def source_text(self, source: Sequence[str]) -> str:
        return " ".join(source[self.start:self.end])


# -- alignment -------------------------------------------------------------------------


def _levenshtein_table(a: Sequence, b: Sequence) -> list[list[int]]:
    n, m = len(a), len(b)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, prev, ai = dist[i], dist[i - 1], a[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ai != b[j - 1]), prev[j] + 1, row[j - 1] + 1)
    return dist


def align_ops(source: Sequence[str], hypothesis: Sequence[str]) -> list[tuple[str, int, int]]:
    """Minimal-cost alignment as ("match"|"sub"|"del"|"ins", i, j) ops in order.

    Ties in the backtrace prefer the diagonal, then deletion, then insertion.
    """
    dist = _levenshtein_table(source, hypothesis)
    i, j = len(source), len(hypothesis)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (source[i - 1] != hypothesis[j - 1]):
            ops.append(("match" if source[i - 1] == hypothesis[j - 1] else "sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            ops.append(("del", i - 1, j))
            i -= 1
        else:
            ops.append(("ins", i, j - 1))
            j -= 1
    ops.reverse()
    return ops


def extract_edits(source: Sequence[str], hypothesis: Sequence[str]) -> list[Edit]:
    """Minimal contiguous edits turning ``source`` into ``hypothesis``."""
    source, hypothesis = list(source), list(hypothesis)
    edits = []
    i = j = 0                 # current positions in source / hypothesis
    start = None              # (i, j) where the current run of non-matches began
    for op, oi, oj in align_ops(source, hypothesis) + [("match", len(source), len(hypothesis))]:
        if op == "match":
            if start is not None:
                si, sj = start
                corr = " ".join(hypothesis[sj:j])
                if source[si:i] != hypothesis[sj:j]:
                    edits.append(Edit(si, i, corr))
                start = None
            i, j = i + 1, j + 1
            continue
        if start is None:
            start = (i, j)
        if op == "sub":
            i, j = i + 1, j + 1
        elif op == "del":
            i += 1
        else:
            j += 1
    return edits


def apply_edits(edits: Sequence[Edit | GoldEdit], source: Sequence[str]) -> list[str]:
    """Apply non-overlapping edits to ``source``."""
    out: list[str] = []
    pos = 0
    for e in sorted(edits, key=lambda e: (e.start, e.end)):
        if e.start < pos or e.end > len(source) or e.start > e.end:
            raise ScoringError(f"overlapping or out-of-range edit {e}")
        out.extend(source[pos:e.start])
        out.extend(e.correction.split())
        pos = e.end
    out.extend(source[pos:])
    return out


# -- F-measure ----------------------------------------------------------------------------


def f_measure(precision: float, recall: float, beta: float = 0.5) -> float:
    """F-beta from precision and recall (any common scale, e.g. percent)."""
    b2 = beta * beta
    denom = b2 * precision + recall
    return (1 + b2) * precision * recall / denom if denom > 0 else 0.0


def f_beta(tp: int, proposed: int, gold: int, beta: float = 0.5) -> tuple[float, float, float]:
    """(P, R, F-beta) in percent.

    P is 0 with nothing proposed and R is 0 with no gold edits; if both
    counts are 0 the F-score is 100 (nothing to do, nothing done).
    """
    if min(tp, proposed, gold) < 0:
        raise ScoringError("edit counts must be non-negative")
    if tp > proposed or tp > gold:
        raise ScoringError(f"impossible counts: tp={tp}, proposed={proposed}, gold={gold}")
    p = 100.0 * tp / proposed if proposed else 0.0
    r = 100.0 * tp / gold if gold else 0.0
    if proposed == 0 and gold == 0:
        return p, r, 100.0
    return p, r, f_measure(p, r, beta)


# -- M2 scoring ------------------------------------------------------------------------------

EditFilter = Callable[[Sequence[str], "Edit | GoldEdit"], bool]


@dataclass
class SentenceScore:
    index: int
    annotator: int
    tp: int
    proposed: int
    gold: int
    system_edits: list[Edit]


@dataclass
class ScoreReport:
    tp: int
    proposed: int
    gold: int
    beta: float = 0.5
    sentences: list[SentenceScore] = field(default_factory=list)

    @property
    def prf(self) -> tuple[float, float, float]:
        return f_beta(self.tp, self.proposed, self.gold, self.beta)

    @property
    def precision(self) -> float:
        return self.prf[0]

    @property
    def recall(self) -> float:
        return self.prf[1]

    @property
    def f(self) -> float:
        return self.prf[2]

    def text(self, title: str = "") -> str:
        p, r, f = self.prf
        rows = [("Precision", f"{p:.2f}"), ("Recall", f"{r:.2f}"), (f"F{self.beta:g}", f"{f:.2f}")]
        head = [title] if title else []
        return "\n".join(head + [f"{k:<10}{v:>8}" for k, v in rows]) + "\n"

    def key_values(self, prefix: str = "") -> str:
        p, r, f = self.prf
        items = [("tp", self.tp), ("proposed", self.proposed), ("gold", self.gold),
                 ("precision", f"{p:.4f}"), ("recall", f"{r:.4f}"), (f"f{self.beta:g}", f"{f:.4f}")]
        return "".join(f"{prefix}{k}={v}\n" for k, v in items)


def score_m2(outputs: Sequence[Sequence[str]], doc: M2Document, beta: float = 0.5,
             edit_filter: EditFilter | None = None) -> ScoreReport:
    """Corpus-level P/R/F-beta of system outputs against M2 gold edits.

    ``edit_filter`` restricts both system and gold edits (used for the
    small/large breakdown).
    """
    if len(outputs) != len(doc):
        raise ScoringError(f"{len(outputs)} system sentences but {len(doc)} M2 sentences")
    keep = edit_filter or (lambda src, e: True)
    tp = proposed = gold = 0
    details = []
    for idx, (out, sent) in enumerate(zip(outputs, doc)):
        sys_edits = [e for e in extract_edits(sent.source, out) if keep(sent.source, e)]
        sys_keys = {e.key for e in sys_edits}
        best = None
        for ann in sorted(sent.annotators):
            gold_edits = [g for g in sent.annotators[ann] if keep(sent.source, g)]
            gold_keys = {(g.start, g.end, g.correction) for g in gold_edits}
            s_tp = len(sys_keys & gold_keys)
            f = f_beta(tp + s_tp, proposed + len(sys_keys), gold + len(gold_keys), beta)[2]
            if best is None or f > best[0]:
                best = (f, ann, s_tp, len(gold_keys))
        _, ann, s_tp, s_gold = best
        tp, proposed, gold = tp + s_tp, proposed + len(sys_keys), gold + s_gold
        details.append(SentenceScore(idx, ann, s_tp, len(sys_keys), s_gold, sys_edits))
    return ScoreReport(tp, proposed, gold, beta, details)


# -- edit classification --------------------------------------------------------------------


def char_edit_distance(a: str, b: str) -> int:
    """Unit-cost Levenshtein distance over characters."""
    return _levenshtein_table(a, b)[len(a)][len(b)]


def edit_ratio(src: str, tgt: str) -> float:
    return char_edit_distance(src, tgt) / (min(len(src), len(tgt)) + 0.1)


SMALL, LARGE = "small", "large"


def classify_edit(src: str, tgt: str) -> str:
    """"small" for spelling-like changes, else "large".

    Small iff the character distance is at most 2 and either side has at
    most 8 characters, or the distance relative to the shorter side is
    below 0.25. Multi-token spans are compared with their spaces.
    """
    d = char_edit_distance(src, tgt)
    if d <= 2 and (len(src) <= 8 or len(tgt) <= 8):
        return SMALL
    return SMALL if d / (min(len(src), len(tgt)) + 0.1) < 0.25 else LARGE


def classify(source: Sequence[str], edit: Edit | GoldEdit) -> str:
    return classify_edit(" ".join(source[edit.start:edit.end]), edit.correction)


def portion_filter(portion: str) -> EditFilter:
    if portion not in (SMALL, LARGE):
        raise ValueError(f"unknown portion {portion!r}")
    return lambda source, edit: classify(source, edit) == portion


# -- OOV segmentation / analysis ------------------------------------------------------------


def segment_oov(sources: Sequence[Sequence[str]], vocab: Container[str]) -> tuple[list[int], list[int]]:
    """Indices of sentences with at least one OOV token, and of the rest."""
    oov, non_oov = [], []
    for i, s in enumerate(sources):
        (oov if any(tok not in vocab for tok in s) else non_oov).append(i)
    return oov, non_oov


def _subset(seq, idx):
    return [seq[i] for i in idx]


def analysis_report(outputs: Sequence[Sequence[str]], doc: M2Document, vocab: Container[str],
                    beta: float = 0.5) -> str:
    """OOV/NonOOV and small/large breakdowns as an aligned table plus key=value lines."""
    oov, non_oov = segment_oov([s.source for s in doc], vocab)
    rows = []
    for name, idx in (("OOV", oov), ("NonOOV", non_oov), ("All", list(range(len(doc))))):
        rows.append((name, len(idx), score_m2(_subset(outputs, idx), _subset(doc, idx), beta)))
    for portion in (SMALL, LARGE):
        rows.append((portion, len(doc), score_m2(outputs, doc, beta, portion_filter(portion))))
    fname = f"F{beta:g}"
    lines = [f"{'segment':<10}{'sents':>7}{'P':>9}{'R':>9}{fname:>9}"]
    for name, n, rep in rows:
        p, r, f = rep.prf
        lines.append(f"{name:<10}{n:>7}{p:>9.2f}{r:>9.2f}{f:>9.2f}")
    lines.append("")
    for name, n, rep in rows:
        lines.append(f"{name}.sentences={n}")
        lines.append(rep.key_values(prefix=f"{name}.").rstrip("\n"))
    return "\n".join(lines) + "\n"
