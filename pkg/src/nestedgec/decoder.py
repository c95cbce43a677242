"""Beam-search decoding, character decoding of UNKs and UNK replacement.

Word hypotheses are produced by a length-synchronous beam over the word
decoder. For the hybrid variants every UNK of a finished hypothesis is then
spelled out by a character-level beam started from the separate-path state;
the nested recurrence is used when the hard-attended source word is OOV.
The baseline replaces UNKs through attention and a correction lexicon.
"""

from __future__ import annotations

import difflib
import multiprocessing
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .corpus import BOS, BOW, CPAD, EOS, EOW, PAD, UNK, SentencePair, Vocabularies, encode_batch
from .model_hybrid import (CharEncoding, char_decode_step_basic, char_decode_step_nested,
                           hard_attention_index, hybrid_source_embeddings, separate_path_init)
from .model_word import EncoderStates, ModelParams, decode_step, encode_source, initial_state
from .numcore import Tensor

DEFAULT_BEAM = 12
DEFAULT_CHAR_BEAM = 10
DEFAULT_MAX_CHARS = 30


def default_max_len(source_len: int) -> int:
    return int(1.5 * source_len) + 5


# -- hypotheses -------------------------------------------------------------------


@dataclass
class UnkInfo:
    """One emitted UNK: where it attended and what was generated for it."""

    step: int
    source_index: int
    source_oov: bool
    nested: bool = False
    text: str | None = None
    logprob: float | None = None


@dataclass
class Hypothesis:
    tokens: list[int]                  # target ids without BOS; ends with EOS iff complete
    logprob: float
    step_logprobs: list[float]
    attention: list[np.ndarray] = field(default_factory=list)
    complete: bool = True
    unks: list[UnkInfo] = field(default_factory=list)
    words: list[str] | None = None     # rendered output, filled after UNK resolution
    # per-step (context, d) rows, kept for the character decoder's separate path
    _decoder_rows: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def body(self) -> list[int]:
        return self.tokens[:-1] if self.complete else list(self.tokens)


@dataclass
class CharHypothesis:
    chars: list[int]                   # char ids without BOW; ends with EOW iff complete
    logprob: float
    step_logprobs: list[float]
    complete: bool = True

    @property
    def body(self) -> list[int]:
        return self.chars[:-1] if self.complete else list(self.chars)


# -- generic beam -----------------------------------------------------------------

# step(states (n, H), prev (n,)) -> (logp (n, V), next states (n, H), per-row extras)
StepFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, list]]


@dataclass
class _Partial:
    tokens: list[int]
    score: float
    step_logprobs: list[float]
    extras: list


def _beam_search(step: StepFn, init: np.ndarray, start: int, end: int, banned: Sequence[int],
                 beam: int, max_steps: int, length_norm: bool = False) -> tuple[list[_Partial], bool]:
    """Length-synchronous beam; returns (hypotheses best first, complete?).

    At each step the ``beam`` best extensions of all live hypotheses are
    kept; those ending in ``end`` retire. Without length normalisation the
    search stops as soon as the best finished score is at least the best
    live score, since log-probabilities can only decrease.
    """
    if beam < 1:
        raise ValueError("beam width must be at least 1")
    if max_steps < 1:
        raise ValueError("maximum length must be at least 1")
    live = [_Partial([], 0.0, [], [])]
    states = np.asarray(init, dtype=nc.DTYPE)[None]
    finished: list[_Partial] = []
    banned = list(banned)

    def rank(p: _Partial) -> float:
        return p.score / max(len(p.tokens), 1) if length_norm else p.score

    for _ in range(max_steps):
        prev = np.array([p.tokens[-1] if p.tokens else start for p in live], dtype=np.int64)
        logp, new_states, extras = step(states, prev)
        logp = np.asarray(logp, dtype=np.float64).copy()
        logp[:, banned] = -np.inf
        V = logp.shape[1]
        cand = np.array([p.score for p in live])[:, None] + logp
        flat = cand.ravel()
        order = np.argsort(-flat, kind="stable")[:beam]
        nxt, rows = [], []
        for i in order:
            if not np.isfinite(flat[i]):
                break
            r, tok = divmod(int(i), V)
            p = live[r]
            child = _Partial(p.tokens + [tok], float(flat[i]), p.step_logprobs + [float(logp[r, tok])],
                             p.extras + [extras[r]])
            if tok == end:
                finished.append(child)
            else:
                nxt.append(child)
                rows.append(r)
        if not nxt:
            break
        live, states = nxt, np.asarray(new_states)[rows]
        if length_norm:
            if len(finished) >= beam:
                break
        elif finished and max(f.score for f in finished) >= live[0].score:
            break
    if finished:
        return sorted(finished, key=rank, reverse=True)[:beam], True
    return sorted(live, key=rank, reverse=True)[:beam], False


# -- source preparation -------------------------------------------------------------


@dataclass
class SourceEncoding:
    """A single source sentence encoded for decoding."""

    tokens: tuple[str, ...]
    ids: np.ndarray                       # (T,)
    oov: np.ndarray                       # (T,) bool
    enc: EncoderStates                    # batch of one
    char_enc: dict[int, CharEncoding]     # OOV position -> single-word char encoding

    def __len__(self) -> int:
        return len(self.ids)


def prepare_source(params: ModelParams, tokens: Sequence[str] | np.ndarray,
                   vocabs: Vocabularies | None = None) -> SourceEncoding:
    """Encode one source sentence, given as tokens (with ``vocabs``) or as ids."""
    with nc.no_grad():
        if vocabs is None:
            ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
            if ids.size == 0:
                raise ValueError("cannot decode an empty source sentence")
            words = tuple(str(i) for i in ids)
            enc = encode_source(params, ids[None], np.ones((1, ids.size), dtype=bool))
            return SourceEncoding(words, ids, ids == UNK, enc, {})
        tokens = tuple(tokens)
        if not tokens:
            raise ValueError("cannot decode an empty source sentence")
        batch = encode_batch([SentencePair(tokens, ())], vocabs)
        embedded, chars = None, None
        if params.config.uses_chars:
            embedded, chars = hybrid_source_embeddings(params, batch)
        enc = encode_source(params, batch.src_ids, batch.src_mask, embedded=embedded)
        char_enc = {}
        if chars is not None:
            for slot, (_, t) in enumerate(sorted(batch.src_chars)):
                char_enc[t] = CharEncoding(chars.states[slot], chars.mask[slot], chars.final[slot])
        return SourceEncoding(tokens, batch.src_ids[0], batch.src_oov[0], enc, char_enc)


# -- word beam ----------------------------------------------------------------------


def _word_step(params: ModelParams, src: SourceEncoding) -> StepFn:
    cache: dict[int, EncoderStates] = {}

    def step(states, prev):
        n = states.shape[0]
        if n not in cache:
            cache[n] = src.enc.repeat(n)
        with nc.no_grad():
            out = decode_step(params, Tensor(states), prev, cache[n])
        w, c, d = out.attention.weights.data, out.attention.context.data, out.d.data
        return out.logp.data, out.dbar.data, [(w[r], c[r], d[r]) for r in range(n)]

    return step


def beam_search_words(params: ModelParams, source, beam: int = DEFAULT_BEAM, max_len: int | None = None,
                      length_norm: bool = False, vocabs: Vocabularies | None = None) -> list[Hypothesis]:
    """N-best word hypotheses for one source sentence, best first.

    ``source`` is a :class:`SourceEncoding`, a token sequence (with
    ``vocabs``) or an id array. ``max_len`` bounds the number of words
    before EOS. If nothing completes, the best incomplete hypotheses are
    returned with ``complete=False``.
    """
    src = source if isinstance(source, SourceEncoding) else prepare_source(params, source, vocabs)
    max_len = default_max_len(len(src)) if max_len is None else max_len
    with nc.no_grad():
        init = initial_state(params, 1).data[0]
    found, complete = _beam_search(_word_step(params, src), init, BOS, EOS, (PAD, BOS), beam,
                                   max_len + 1, length_norm)
    hyps = []
    for p in found:
        h = Hypothesis(p.tokens, p.score, p.step_logprobs, [e[0] for e in p.extras], complete,
                       _decoder_rows=[(e[1], e[2]) for e in p.extras])
        for s, tok in enumerate(h.body):
            if tok == UNK:
                z = hard_attention_index(h.attention[s])
                h.unks.append(UnkInfo(s, z, bool(src.oov[z])))
        hyps.append(h)
    return hyps


def score_target(params: ModelParams, source, target_ids: Sequence[int], vocabs: Vocabularies | None = None,
                 ) -> list[float]:
    """Forced decoding: per-step log-probabilities of ``target_ids`` (EOS included if given)."""
    src = source if isinstance(source, SourceEncoding) else prepare_source(params, source, vocabs)
    out = []
    with nc.no_grad():
        dbar = initial_state(params, 1)
        prev = BOS
        for tok in target_ids:
            step = decode_step(params, dbar, np.array([prev]), src.enc)
            out.append(float(step.logp.data[0, tok]))
            dbar, prev = step.dbar, tok
    return out


# -- character beam -----------------------------------------------------------------


def _char_step(params: ModelParams, src: CharEncoding | None) -> StepFn:
    keys = None
    if src is not None:
        with nc.no_grad():
            keys = src.keys(params).data
    tiled: dict[int, tuple[CharEncoding, Tensor]] = {}

    def step(states, prev):
        n = states.shape[0]
        with nc.no_grad():
            if src is None:
                state, logp = char_decode_step_basic(params, Tensor(states), prev)
            else:
                if n not in tiled:
                    rep = CharEncoding(Tensor(np.repeat(src.states.data[None], n, axis=0)),
                                       np.repeat(src.mask[None], n, axis=0),
                                       Tensor(np.repeat(src.final.data[None], n, axis=0)))
                    tiled[n] = (rep, Tensor(np.repeat(keys[None], n, axis=0)))
                rep, k = tiled[n]
                state, logp = char_decode_step_nested(params, Tensor(states), prev, rep, k)
        return logp.data, state.carry.data, [None] * n

    return step


def beam_search_chars_nbest(params: ModelParams, dhat: np.ndarray, source_chars: CharEncoding | None = None,
                            beam: int = DEFAULT_CHAR_BEAM, max_chars: int = DEFAULT_MAX_CHARS,
                            length_norm: bool = False) -> list[CharHypothesis]:
    dhat = np.asarray(dhat.data if isinstance(dhat, Tensor) else dhat, dtype=nc.DTYPE).reshape(-1)
    found, complete = _beam_search(_char_step(params, source_chars), dhat, BOW, EOW, (CPAD, BOW), beam,
                                   max_chars + 1, length_norm)
    return [CharHypothesis(p.tokens, p.score, p.step_logprobs, complete) for p in found]


def beam_search_chars(params: ModelParams, dhat: np.ndarray, source_chars: CharEncoding | None = None,
                      beam: int = DEFAULT_CHAR_BEAM, max_chars: int = DEFAULT_MAX_CHARS,
                      length_norm: bool = False) -> CharHypothesis:
    """Best character sequence from the initial state ``dhat``.

    With ``source_chars`` (the aligned source OOV's character encoding) the
    nested recurrence is used, otherwise the basic one.
    """
    return beam_search_chars_nbest(params, dhat, source_chars, beam, max_chars, length_norm)[0]


# -- correction lexicon / UNK replacement ----------------------------------------------


@dataclass
class CorrectionLexicon:
    """Source word -> candidate corrections, most probable first."""

    counts: dict[str, Counter] = field(default_factory=dict)

    def __post_init__(self):
        self.entries: dict[str, list[tuple[str, float]]] = {}
        for word, c in self.counts.items():
            total = sum(c.values())
            ranked = sorted(c.items(), key=lambda kv: -kv[1])   # stable: first-seen order on ties
            self.entries[word] = [(cand, n / total) for cand, n in ranked]

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __getitem__(self, word: str) -> list[tuple[str, float]]:
        return self.entries[word]

    def __len__(self) -> int:
        return len(self.entries)

    def best(self, word: str) -> str | None:
        cands = self.entries.get(word)
        return cands[0][0] if cands else None


def align_tokens(source: Sequence[str], target: Sequence[str]) -> list[tuple[int, int]]:
    """Anchor identical tokens, then pair the remaining gaps position by position."""
    matcher = difflib.SequenceMatcher(None, list(source), list(target), autojunk=False)
    links = []
    for tag, i1, i2, j1, j2 in matcher.get_opcodes():
        if tag in ("equal", "replace"):
            links.extend((i1 + k, j1 + k) for k in range(min(i2 - i1, j2 - j1)))
    return links


def build_correction_lexicon(pairs: Sequence[SentencePair]) -> CorrectionLexicon:
    counts: dict[str, Counter] = defaultdict(Counter)
    for pair in pairs:
        for i, j in align_tokens(pair.source, pair.target):
            counts[pair.source[i]][pair.target[j]] += 1
    return CorrectionLexicon(dict(counts))


def unk_replace(hypothesis: Hypothesis, source_tokens: Sequence[str], lexicon: CorrectionLexicon,
                vocabs: Vocabularies) -> list[str]:
    """Render a hypothesis, replacing each UNK via its attention argmax and the lexicon."""
    out = []
    for s, tok in enumerate(hypothesis.body):
        if tok != UNK:
            out.append(vocabs.target.word(tok))
            continue
        z = hard_attention_index(hypothesis.attention[s][:len(source_tokens)])
        word = source_tokens[z]
        best = lexicon.best(word)
        out.append(best if best is not None else word)
    return out


# -- full decoding -------------------------------------------------------------------


@dataclass
class DecodeConfig:
    beam: int = DEFAULT_BEAM
    char_beam: int = DEFAULT_CHAR_BEAM
    max_len: int | None = None
    max_chars: int = DEFAULT_MAX_CHARS
    length_norm: bool = False
    nbest: int = 1


@dataclass
class DecodeResult:
    words: list[str]
    hypotheses: list[Hypothesis]      # n-best, rendered; hypotheses[0] is the output

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


class Decoder:
    def __init__(self, params: ModelParams, vocabs: Vocabularies, config: DecodeConfig | None = None,
                 lexicon: CorrectionLexicon | None = None):
        self.params, self.vocabs = params, vocabs
        self.config = config or DecodeConfig()
        self.lexicon = lexicon if lexicon is not None else CorrectionLexicon()

    def _resolve_unks(self, hyp: Hypothesis, src: SourceEncoding) -> list[str]:
        cfg, params = self.config, self.params
        if not params.config.uses_chars:
            return unk_replace(hyp, src.tokens, self.lexicon, self.vocabs)
        nested_variant = params.config.variant == "nested"
        unk_at = {u.step: u for u in hyp.unks}
        out = []
        for s, tok in enumerate(hyp.body):
            if tok != UNK:
                out.append(self.vocabs.target.word(tok))
                continue
            u = unk_at[s]
            c, d = hyp._decoder_rows[s]
            with nc.no_grad():
                dhat = separate_path_init(params, Tensor(c[None]), Tensor(d[None])).data[0]
            u.nested = nested_variant and u.source_oov
            ch = beam_search_chars(params, dhat, src.char_enc[u.source_index] if u.nested else None,
                                   cfg.char_beam, cfg.max_chars, cfg.length_norm)
            text = self.vocabs.chars.decode(ch.body)
            u.text = text if text else src.tokens[u.source_index]
            u.logprob = ch.logprob
            out.append(u.text)
        return out

    def decode(self, tokens: Sequence[str]) -> DecodeResult:
        if not tokens:
            return DecodeResult([], [Hypothesis([EOS], 0.0, [0.0], words=[])])
        cfg = self.config
        src = prepare_source(self.params, tokens, self.vocabs)
        hyps = beam_search_words(self.params, src, cfg.beam, cfg.max_len, cfg.length_norm)
        hyps = hyps[:max(1, cfg.nbest)]
        for h in hyps:
            h.words = self._resolve_unks(h, src)
        return DecodeResult(hyps[0].words, hyps)

    def decode_all(self, sentences: Sequence[Sequence[str]], workers: int = 1) -> list[DecodeResult]:
        """Decode sentences independently; output does not depend on ``workers``."""
        if workers <= 1 or len(sentences) < 2:
            return [self.decode(s) for s in sentences]
        ctx = multiprocessing.get_context("fork")
        global _WORKER_DECODER
        _WORKER_DECODER = self
        try:
            with ctx.Pool(workers) as pool:
                return pool.map(_decode_in_worker, list(sentences), chunksize=1)
        finally:
            _WORKER_DECODER = None


_WORKER_DECODER: Decoder | None = None


def _decode_in_worker(tokens):
    result = _WORKER_DECODER.decode(tokens)
    for h in result.hypotheses:      # keep the pickled payload small
        h._decoder_rows = []
    return result


# -- files ------------------------------------------------------------------------


def write_output(path, sentences: Sequence[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


@dataclass(frozen=True)
class NbestEntry:
    index: int
    tokens: tuple[str, ...]
    nn_logprob: float


def nbest_entries(results: Sequence[DecodeResult]) -> list[NbestEntry]:
    return [NbestEntry(i, tuple(h.words), h.logprob) for i, r in enumerate(results) for h in r.hypotheses]


def write_nbest(path, entries: Sequence[NbestEntry]) -> None:
    lines = [f"{e.index} ||| {' '.join(e.tokens)} ||| {e.nn_logprob!r}\n" for e in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_nbest(path) -> list[NbestEntry]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ||| ")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'index ||| tokens ||| score'")
        try:
            out.append(NbestEntry(int(parts[0]), tuple(parts[1].split()), float(parts[2])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
