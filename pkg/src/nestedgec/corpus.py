"""Parallel-corpus and M2 ingestion, vocabularies and batch encoding."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")

# character vocabulary framing ids
CPAD, BOW, EOW, CUNK = 0, 1, 2, 3
CHAR_RESERVED = ("<cpad>", "<w>", "</w>", "<cunk>")

MAX_TOKENS = 100
MIN_LENGTH_RATIO = 0.5


class CorpusError(ValueError):
    """Malformed input data (bad line, bad encoding, bad M2 record)."""


@dataclass(frozen=True)
class SentencePair:
    source: tuple[str, ...]
    target: tuple[str, ...]

    def __post_init__(self):
        for tok in self.source + self.target:
            if not tok or any(ch.isspace() for ch in tok):
                raise CorpusError(f"invalid token {tok!r}")


@dataclass(frozen=True)
class CorpusFilter:
    """Noise filter for crowd-sourced pairs.

    Drops pairs with a side longer than ``max_tokens`` and pairs whose
    target has fewer than ``min_ratio`` times as many tokens as the source.
    """

    max_tokens: int = MAX_TOKENS
    min_ratio: float = MIN_LENGTH_RATIO

    def keep(self, pair: SentencePair) -> bool:
        if len(pair.source) > self.max_tokens or len(pair.target) > self.max_tokens:
            return False
        return len(pair.target) >= self.min_ratio * len(pair.source)


def parse_pair_line(line: str, lineno: int = 0) -> SentencePair:
    if line.count("\t") != 1:
        raise CorpusError(f"line {lineno}: expected exactly one TAB separator")
    src, tgt = line.split("\t")
    return SentencePair(tuple(src.split()), tuple(tgt.split()))


def load_parallel_corpus(path, filter: CorpusFilter | None = None) -> list[SentencePair]:
    """Read ``source<TAB>target`` lines; with ``filter`` drop noisy pairs."""
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: invalid UTF-8 ({exc})") from exc
    pairs = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line:
            continue
        pair = parse_pair_line(line, lineno)
        if filter is None or filter.keep(pair):
            pairs.append(pair)
    return pairs


def load_sentences(path) -> list[tuple[str, ...]]:
    """One tokenized sentence per line (blank lines are kept as empty)."""
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: invalid UTF-8 ({exc})") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [tuple(line.rstrip("\r").split()) for line in lines]


# -- vocabularies -------------------------------------------------------------


@dataclass
class Vocabulary:
    """Frequency-ranked word ids; ids 0-3 are PAD, UNK, BOS, EOS."""

    id_to_word: list[str]
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def from_words(cls, words: Sequence[str], counts: dict[str, int] | None = None) -> "Vocabulary":
        return cls(list(RESERVED) + list(words), dict(counts or {}))

    def __len__(self) -> int:
        return len(self.id_to_word)

    def __contains__(self, word: str) -> bool:
        i = self.word_to_id.get(word)
        return i is not None and i >= len(RESERVED)

    @property
    def size(self) -> int:
        """Number of corpus words kept (K), excluding reserved ids."""
        return len(self.id_to_word) - len(RESERVED)

    def id(self, word: str) -> int:
        i = self.word_to_id.get(word, UNK)
        return UNK if i < len(RESERVED) else i

    def word(self, i: int) -> str:
        return self.id_to_word[i]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]


@dataclass
class CharVocabulary:
    id_to_char: list[str]

    def __post_init__(self):
        self.char_to_id = {c: i for i, c in enumerate(self.id_to_char)}

    @classmethod
    def build(cls, pairs: Iterable[SentencePair]) -> "CharVocabulary":
        seen: dict[str, None] = {}
        for p in pairs:
            for tok in p.source + p.target:
                for ch in tok:
                    seen.setdefault(ch, None)
        return cls(list(CHAR_RESERVED) + list(seen))

    def __len__(self) -> int:
        return len(self.id_to_char)

    def encode_word(self, word: str, frame: bool = True) -> list[int]:
        ids = [self.char_to_id.get(ch, CUNK) for ch in word]
        return [BOW] + ids + [EOW] if frame else ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            if i == EOW:
                break
            if i < len(CHAR_RESERVED):
                if i == CUNK:
                    out.append("?")
                continue
            out.append(self.id_to_char[i])
        return "".join(out)


def _ranked(counter: Counter, first_seen: dict[str, int], k: int) -> list[str]:
    words = sorted((w for w in counter if w not in RESERVED),
                   key=lambda w: (-counter[w], first_seen[w]))
    return words[:k]


def build_vocab(pairs: Sequence[SentencePair], k: int, mode: str = "combined"):
    """Keep the ``k`` most frequent words (ties: first appearance wins).

    ``combined`` counts both sides together and returns one vocabulary;
    ``separate`` returns a (source, target) pair of vocabularies.
    """
    if k < 1:
        raise ValueError("vocabulary size must be >= 1")
    if not pairs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if mode not in ("combined", "separate"):
        raise ValueError(f"unknown vocabulary mode {mode!r}")

    def count(sides):
        counter: Counter = Counter()
        first: dict[str, int] = {}
        for tokens in sides:
            for tok in tokens:
                counter[tok] += 1
                first.setdefault(tok, len(first))
        return counter, first

    if mode == "combined":
        counter, first = count(t for p in pairs for t in (p.source, p.target))
        return Vocabulary.from_words(_ranked(counter, first, k), counter)
    sc, sf = count(p.source for p in pairs)
    tc, tf = count(p.target for p in pairs)
    return (Vocabulary.from_words(_ranked(sc, sf, k), sc),
            Vocabulary.from_words(_ranked(tc, tf, k), tc))


@dataclass
class Vocabularies:
    """Everything needed to map text to ids for one model."""

    source: Vocabulary
    target: Vocabulary
    chars: CharVocabulary
    mode: str = "combined"

    def save(self, path) -> None:
        payload = {
            "mode": self.mode,
            "source": self.source.id_to_word[len(RESERVED):],
            "target": self.target.id_to_word[len(RESERVED):],
            "chars": self.chars.id_to_char[len(CHAR_RESERVED):],
        }
        Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabularies":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            src = Vocabulary.from_words(payload["source"])
            tgt = src if payload["mode"] == "combined" else Vocabulary.from_words(payload["target"])
            chars = CharVocabulary(list(CHAR_RESERVED) + list(payload["chars"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise CorpusError(f"{path}: malformed vocabulary file ({exc})") from exc
        return cls(src, tgt, chars, payload["mode"])

    @classmethod
    def build(cls, pairs: Sequence[SentencePair], k: int, mode: str = "combined") -> "Vocabularies":
        v = build_vocab(pairs, k, mode)
        src, tgt = (v, v) if mode == "combined" else v
        return cls(src, tgt, CharVocabulary.build(pairs), mode)


# -- batches --------------------------------------------------------------------


@dataclass
class Batch:
    """Padded id matrices plus character views of the OOV positions.

    Source ids are (B, T); target ids are framed as decoder input
    ``tgt_in = [BOS, y1..yS]`` and output ``tgt_out = [y1..yS, EOS]`` (B, S+1).
    ``src_chars`` / ``tgt_chars`` map (row, position) to framed char ids
    ``[BOW, c1..cM, EOW]`` for every OOV position and nothing else.
    """

    src_ids: np.ndarray
    src_mask: np.ndarray
    src_oov: np.ndarray
    src_chars: dict[tuple[int, int], list[int]]
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    tgt_oov: np.ndarray
    tgt_chars: dict[tuple[int, int], list[int]]
    pairs: list[SentencePair]

    def __len__(self) -> int:
        return self.src_ids.shape[0]

    @property
    def n_target_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def _pad(rows: list[list[int]], fill: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max(len(r) for r in rows))
    ids = np.full((len(rows), width), fill, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = True
    return ids, mask


def encode_batch(pairs: Sequence[SentencePair], vocabs: Vocabularies) -> Batch:
    src_rows, tgt_rows = [], []
    src_chars: dict[tuple[int, int], list[int]] = {}
    tgt_chars: dict[tuple[int, int], list[int]] = {}
    for b, pair in enumerate(pairs):
        ids = vocabs.source.encode(pair.source)
        for t, (tok, i) in enumerate(zip(pair.source, ids)):
            if i == UNK:
                src_chars[(b, t)] = vocabs.chars.encode_word(tok)
        src_rows.append(ids)
        tids = vocabs.target.encode(pair.target)
        for s, (tok, i) in enumerate(zip(pair.target, tids)):
            if i == UNK:
                tgt_chars[(b, s)] = vocabs.chars.encode_word(tok)
        tgt_rows.append(tids)
    src_ids, src_mask = _pad(src_rows, PAD)
    tgt_in, tgt_mask = _pad([[BOS] + r for r in tgt_rows], PAD)
    tgt_out, _ = _pad([r + [EOS] for r in tgt_rows], PAD)
    src_oov = np.zeros(src_ids.shape, dtype=bool)
    for (b, t) in src_chars:
        src_oov[b, t] = True
    tgt_oov = np.zeros(tgt_out.shape, dtype=bool)
    for (b, s) in tgt_chars:
        tgt_oov[b, s] = True
    return Batch(src_ids, src_mask, src_oov, src_chars, tgt_in, tgt_out, tgt_mask, tgt_oov,
                 tgt_chars, list(pairs))


def decode_batch(batch: Batch, vocabs: Vocabularies) -> list[SentencePair]:
    """Rebuild token sequences from ids, rendering OOVs from their char views."""
    out = []
    for b in range(len(batch)):
        src = []
        for t in range(int(batch.src_mask[b].sum())):
            if batch.src_oov[b, t]:
                src.append(vocabs.chars.decode(batch.src_chars[(b, t)][1:]))
            else:
                src.append(vocabs.source.word(int(batch.src_ids[b, t])))
        tgt = []
        for s in range(int(batch.tgt_mask[b].sum()) - 1):
            if batch.tgt_oov[b, s]:
                tgt.append(vocabs.chars.decode(batch.tgt_chars[(b, s)][1:]))
            else:
                tgt.append(vocabs.target.word(int(batch.tgt_out[b, s])))
        out.append(SentencePair(tuple(src), tuple(tgt)))
    return out


def iterate_batches(pairs: Sequence[SentencePair], batch_size: int, rng) -> Iterator[list[SentencePair]]:
    """One epoch of length-bucketed, shuffled mini-batches.

    Pairs are sorted by source length (stable), cut into batches, and the
    batch order is shuffled with ``rng``.
    """
    order = sorted(range(len(pairs)), key=lambda i: len(pairs[i].source))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    for j in rng.permutation(len(chunks)):
        yield [pairs[i] for i in chunks[j]]


# -- M2 -----------------------------------------------------------------------


@dataclass(frozen=True)
class GoldEdit:
    start: int
    end: int
    correction: str
    type: str = ""


@dataclass
class M2Sentence:
    source: tuple[str, ...]
    annotators: dict[int, list[GoldEdit]]


M2Document = list[M2Sentence]


def parse_m2(path) -> M2Document:
    """Parse CoNLL-style M2: ``S`` lines followed by ``A`` edit lines."""
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: invalid UTF-8 ({exc})") from exc
    return parse_m2_text(text)


def parse_m2_text(text: str) -> M2Document:
    doc: M2Document = []
    current: M2Sentence | None = None
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            current = None
            continue
        if line.startswith("S ") or line == "S":
            current = M2Sentence(tuple(line[2:].split()), {})
            doc.append(current)
            continue
        if not line.startswith("A "):
            raise CorpusError(f"line {lineno}: unexpected M2 line {line[:20]!r}")
        if current is None:
            raise CorpusError(f"line {lineno}: A-line before any S-line")
        fields = line[2:].split("|||")
        if len(fields) != 6:
            raise CorpusError(f"line {lineno}: expected 6 '|||' fields, got {len(fields)}")
        try:
            start, end = (int(x) for x in fields[0].split())
            annotator = int(fields[5])
        except ValueError as exc:
            raise CorpusError(f"line {lineno}: bad offsets or annotator id") from exc
        edits = current.annotators.setdefault(annotator, [])
        etype = fields[1]
        if etype == "noop" or start < 0:
            continue
        if not 0 <= start <= end <= len(current.source):
            raise CorpusError(f"line {lineno}: span {start}..{end} outside sentence")
        corr = fields[2].split("||")[0].strip()
        if corr == "-NONE-":
            corr = ""
        edits.append(GoldEdit(start, end, " ".join(corr.split()), etype))
    for sent in doc:
        if not sent.annotators:
            sent.annotators[0] = []
    return doc


def write_m2(doc: M2Document, path) -> None:
    lines = []
    for sent in doc:
        lines.append("S " + " ".join(sent.source))
        for ann, edits in sorted(sent.annotators.items()):
            if not edits:
                lines.append(f"A -1 -1|||noop|||-NONE-|||REQUIRED|||-NONE-|||{ann}")
            for e in edits:
                corr = e.correction if e.correction else "-NONE-"
                lines.append(f"A {e.start} {e.end}|||{e.type or 'X'}|||{corr}|||REQUIRED|||-NONE-|||{ann}")
        lines.append("")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
