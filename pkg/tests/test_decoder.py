import math

import numpy as np
import pytest

from nestedgec import numcore as nc
from nestedgec.corpus import BOS, EOS, PAD, UNK, SentencePair, Vocabularies
from nestedgec.decoder import (DecodeConfig, Decoder, Hypothesis, NbestEntry, align_tokens, beam_search_chars,
                               beam_search_chars_nbest, beam_search_words, build_correction_lexicon,
                               default_max_len, nbest_entries, prepare_source, read_nbest, score_target,
                               unk_replace, write_nbest)
from nestedgec.model_word import ModelConfig, ModelParams
from nestedgec.toydata import copy_correct_corpus

SOURCES = [("the", "cat", "zorp"), ("a", "dog", "sat", "the"), ("the",)]


def _model(variant="nested", seed=0, bound=0.8):
    pairs = copy_correct_corpus(10, seed=1)
    vocabs = Vocabularies.build(pairs, 8)
    cfg = ModelConfig(variant, len(vocabs.source), len(vocabs.target), len(vocabs.chars), emb=8, hidden=8)
    return vocabs, ModelParams.uniform(cfg, nc.Rng(seed), bound)


def _greedy(params, src, max_len):
    toks, total = [], 0.0
    for _ in range(max_len + 1):
        logp = _next_logp(params, src, toks)
        logp[[PAD, BOS]] = -np.inf
        tok = int(np.argmax(logp))
        toks.append(tok)
        total += float(logp[tok])
        if tok == EOS:
            break
    return toks, total


def _next_logp(params, src, prefix):
    V = params.config.tgt_vocab
    return np.array([score_target(params, src, prefix + [v])[-1] for v in range(V)])


@pytest.mark.parametrize("tokens", SOURCES)
def test_beam_one_is_greedy(tokens):
    vocabs, params = _model()
    src = prepare_source(params, tokens, vocabs)
    hyp = beam_search_words(params, src, beam=1)[0]
    toks, total = _greedy(params, src, default_max_len(len(tokens)))
    assert hyp.tokens == toks
    assert hyp.logprob == pytest.approx(total, abs=1e-5)


@pytest.mark.parametrize("beam", [1, 3, 8])
def test_hypothesis_score_replays_under_forced_decoding(beam):
    vocabs, params = _model(seed=4)
    src = prepare_source(params, SOURCES[1], vocabs)
    for h in beam_search_words(params, src, beam=beam):
        assert h.logprob == pytest.approx(math.fsum(h.step_logprobs), abs=1e-9)
        forced = score_target(params, src, h.tokens)
        np.testing.assert_allclose(forced, h.step_logprobs, atol=1e-5)
        assert PAD not in h.tokens and BOS not in h.tokens
        assert EOS not in h.body
        assert (h.tokens[-1] == EOS) == h.complete


def test_nbest_is_sorted_and_distinct():
    vocabs, params = _model(seed=2)
    hyps = beam_search_words(params, SOURCES[0], beam=6, vocabs=vocabs)
    scores = [h.logprob for h in hyps]
    assert scores == sorted(scores, reverse=True)
    assert len({tuple(h.tokens) for h in hyps}) == len(hyps)


def test_wider_beam_finds_no_worse_best_on_fixtures():
    # not guaranteed in general for pruned beams, checked on fixed models
    for seed in range(4):
        vocabs, params = _model(seed=seed)
        for tokens in SOURCES:
            src = prepare_source(params, tokens, vocabs)
            best = [beam_search_words(params, src, beam=b)[0].logprob for b in (1, 2, 4, 8)]
            assert all(b >= a - 1e-9 for a, b in zip(best, best[1:])), (seed, tokens, best)


def test_incomplete_when_eos_unreachable():
    vocabs, params = _model()
    params["out/g_b"].data[EOS] = -1e4
    hyps = beam_search_words(params, SOURCES[0], beam=2, max_len=3, vocabs=vocabs)
    assert not hyps[0].complete
    assert len(hyps[0].tokens) == 4 and hyps[0].body == hyps[0].tokens


def test_unk_steps_record_hard_attention():
    vocabs, params = _model(seed=3)
    params["out/g_b"].data[UNK] = 2.0
    params["out/g_b"].data[EOS] = -1e4
    src = prepare_source(params, SOURCES[0], vocabs)
    h = beam_search_words(params, src, beam=3, max_len=4)[0]
    assert h.unks and [u.step for u in h.unks] == [s for s, t in enumerate(h.body) if t == UNK]
    for u in h.unks:
        assert u.source_index == int(np.argmax(h.attention[u.step]))
        assert u.source_oov == bool(src.oov[u.source_index])


def test_char_beam_framing_and_nested_switch():
    vocabs, params = _model(seed=5)
    dhat = np.zeros(8, dtype=np.float32)
    basic = beam_search_chars(params, dhat, beam=4, max_chars=6)
    src = prepare_source(params, ("zorpq",), vocabs)
    nested = beam_search_chars(params, dhat, src.char_enc[0], beam=4, max_chars=6)
    assert basic.logprob == pytest.approx(math.fsum(basic.step_logprobs))
    assert basic.chars != nested.chars or basic.logprob != nested.logprob
    nb = beam_search_chars_nbest(params, dhat, beam=4, max_chars=6)
    assert nb[0].chars == basic.chars and len(nb) <= 4
    with pytest.raises(ValueError):
        beam_search_chars(params, dhat, beam=0)


def test_alignment_and_lexicon():
    assert align_tokens("a violets c".split(), "a violates c".split()) == [(0, 0), (1, 1), (2, 2)]
    assert align_tokens("x y".split(), "x".split()) == [(0, 0)]
    lex = build_correction_lexicon([SentencePair(tuple("a violets c".split()), tuple("a violates c".split()))])
    assert lex["violets"] == [("violates", 1.0)]
    assert lex["a"] == [("a", 1.0)]
    assert "roses" not in lex and lex.best("roses") is None
    lex = build_correction_lexicon([SentencePair(("teh",), ("the",)), SentencePair(("teh",), ("tea",)),
                                    SentencePair(("teh",), ("the",))])
    assert lex["teh"] == [("the", pytest.approx(2 / 3)), ("tea", pytest.approx(1 / 3))]


def test_unk_replace_uses_attention_and_lexicon():
    vocabs = Vocabularies.build([SentencePair(("a", "c"), ("a", "c"))], 5)
    lex = build_correction_lexicon([SentencePair(tuple("a violets c".split()), tuple("a violates c".split()))])
    a = vocabs.target.id("a")
    att = [np.array([1.0, 0, 0]), np.array([0.1, 0.8, 0.1]), np.array([0.2, 0.2, 0.6]), np.array([1.0, 0, 0])]
    hyp = Hypothesis([a, UNK, UNK, EOS], -1.0, [0.0] * 4, att)
    assert unk_replace(hyp, ("a", "violets", "getting"), lex, vocabs) == ["a", "violates", "getting"]


@pytest.mark.parametrize("variant", ["baseline", "hybrid", "nested"])
def test_decoder_renders_every_unk(variant):
    vocabs, params = _model(variant, seed=3)
    params["out/g_b"].data[UNK] = 2.0
    params["out/g_b"].data[EOS] = -1e4
    res = Decoder(params, vocabs, DecodeConfig(beam=3, char_beam=3, max_len=4, max_chars=5, nbest=2)).decode(SOURCES[0])
    assert UNK in res.best.body
    assert "<unk>" not in res.words and res.words == res.best.words
    for u in res.best.unks if variant != "baseline" else []:
        assert u.text and u.nested == (variant == "nested" and u.source_oov)
    assert len(res.hypotheses) <= 2


def test_empty_source_gives_empty_output():
    vocabs, params = _model()
    assert Decoder(params, vocabs).decode(()).words == []


def test_parallel_decoding_matches_serial():
    vocabs, params = _model(seed=7)
    dec = Decoder(params, vocabs, DecodeConfig(beam=2, char_beam=2, max_chars=4))
    serial = [r.words for r in dec.decode_all(SOURCES, workers=1)]
    parallel = [r.words for r in dec.decode_all(SOURCES, workers=2)]
    assert serial == parallel


def test_nbest_file_round_trip(tmp_path):
    vocabs, params = _model()
    res = Decoder(params, vocabs, DecodeConfig(beam=3, nbest=3)).decode_all(SOURCES[:2])
    entries = nbest_entries(res)
    write_nbest(tmp_path / "n.txt", entries)
    assert read_nbest(tmp_path / "n.txt") == entries
    (tmp_path / "bad.txt").write_text("0 ||| a b\n")
    with pytest.raises(ValueError, match=":1:"):
        read_nbest(tmp_path / "bad.txt")
    assert NbestEntry(0, ("a",), -1.5) in [NbestEntry(0, ("a",), -1.5)]
