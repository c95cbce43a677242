"""Small synthetic corpora for tests and demos."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import GoldEdit, M2Sentence, SentencePair, write_m2
from .eval import extract_edits

COMMON = ("the", "a", "cat", "dog", "sees", "likes", "big", "red", "and", "runs")
LETTERS = "bcdfghklmnprtvx"


def copy_correct_corpus(n: int = 40, seed: int = 0, fix: tuple[str, str] = ("x", "s")) -> list[SentencePair]:
    """Sentences of common words plus one unique rare word each.

    The target copies the rare word, except that every ``fix[0]`` in it
    becomes ``fix[1]``. With the vocabulary limited to the common words each
    rare word is OOV on both sides.
    """
    rng = np.random.default_rng(seed)
    pairs, used = [], set()
    while len(pairs) < n:
        word = "".join(rng.choice(list(LETTERS), int(rng.integers(4, 7))))
        if word in used:
            continue
        used.add(word)
        src = [str(w) for w in rng.choice(COMMON, int(rng.integers(3, 5)))]
        src.insert(int(rng.integers(0, len(src) + 1)), word)
        tgt = [w.replace(*fix) if w == word else w for w in src]
        pairs.append(SentencePair(tuple(src), tuple(tgt)))
    return pairs


_ERRORS = (("likes", "like"), ("sees", "see"), ("a", "the"), ("runs", "run"))


def gec_corpus(n: int = 30, seed: int = 0, n_words: int = 20) -> list[SentencePair]:
    """Correct sentences over a small vocabulary with agreement-style errors injected."""
    rng = np.random.default_rng(seed)
    words = list(COMMON) + [f"w{i}" for i in range(max(0, n_words - len(COMMON)))]
    pairs = []
    for _ in range(n):
        tgt = [str(w) for w in rng.choice(words, int(rng.integers(3, 7)))]
        src = list(tgt)
        for i, w in enumerate(src):
            for right, wrong in _ERRORS:
                if w == right and rng.random() < 0.5:
                    src[i] = wrong
        pairs.append(SentencePair(tuple(src), tuple(tgt)))
    return pairs


def m2_from_pairs(pairs: Sequence[SentencePair]) -> list[M2Sentence]:
    """Gold M2 document whose single annotator's edits turn each source into its target."""
    return [M2Sentence(p.source, {0: [GoldEdit(e.start, e.end, e.correction, "X")
                                      for e in extract_edits(p.source, p.target)]}) for p in pairs]


def write_pairs(path, pairs: Sequence[SentencePair]) -> None:
    Path(path).write_text("".join(" ".join(p.source) + "\t" + " ".join(p.target) + "\n" for p in pairs),
                          encoding="utf-8")


def write_toy_files(directory, n_train: int = 40, seed: int = 0) -> dict[str, Path]:
    """Write train/dev corpora, dev sources, dev M2 and LM text for a pipeline run."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    train = copy_correct_corpus(n_train, seed)
    dev = train[:10]
    paths = {"train": d / "train.tsv", "dev_src": d / "dev.src", "dev_m2": d / "dev.m2", "lm_text": d / "lm.txt"}
    write_pairs(paths["train"], train)
    paths["dev_src"].write_text("".join(" ".join(p.source) + "\n" for p in dev), encoding="utf-8")
    write_m2(m2_from_pairs(dev), paths["dev_m2"])
    paths["lm_text"].write_text("".join(" ".join(p.target) + "\n" for p in train), encoding="utf-8")
    return paths
