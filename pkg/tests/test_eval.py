import pytest
from hypothesis import given, strategies as st

from nestedgec.corpus import GoldEdit, M2Sentence, parse_m2_text
from nestedgec.eval import (LARGE, SMALL, Edit, ScoringError, align_ops, analysis_report, apply_edits,
                            char_edit_distance, classify, classify_edit, edit_ratio, extract_edits, f_beta,
                            f_measure, portion_filter, score_m2, segment_oov)

TOKS = st.lists(st.sampled_from(["a", "b", "c", "the", "cat"]), max_size=8)


def _m2(source, *annotators):
    return M2Sentence(tuple(source.split()), {i: list(edits) for i, edits in enumerate(annotators)})


def test_single_word_edit():
    src = "this harms the plants".split()
    assert extract_edits(src, "this harm the plants".split()) == [Edit(1, 2, "harm")]


def test_adjacent_changes_merge_into_one_edit():
    src = "they are prefers tea".split()
    assert extract_edits(src, "they prefer tea".split()) == [Edit(1, 3, "prefer")]


def test_identity_and_pure_insertion_deletion():
    assert extract_edits("a b c".split(), "a b c".split()) == []
    assert extract_edits("a c".split(), "a b c".split()) == [Edit(1, 1, "b")]
    assert extract_edits("a b c".split(), "a c".split()) == [Edit(1, 2, "")]
    assert extract_edits("a b".split(), []) == [Edit(0, 2, "")]


def test_alignment_tie_order():
    # substitution, deletion and insertion all reach cost 1 here; the diagonal is taken
    assert align_ops(["x"], ["y"]) == [("sub", 0, 0)]
    assert align_ops(["a", "b"], ["b"]) == [("del", 0, 0), ("match", 1, 0)]


@given(TOKS, TOKS)
def test_edits_round_trip(src, hyp):
    edits = extract_edits(src, hyp)
    assert apply_edits(edits, src) == hyp
    for e in edits:
        assert 0 <= e.start <= e.end <= len(src)
        assert e.source_text(src) != e.correction


def test_apply_edits_rejects_overlap():
    with pytest.raises(ScoringError):
        apply_edits([Edit(0, 2, "x"), Edit(1, 2, "y")], ["a", "b"])


def test_f_measure_reference_values():
    assert f_measure(43.86, 16.29) == pytest.approx(32.77, abs=0.01)
    assert f_measure(48.25, 17.92) == pytest.approx(36.04, abs=0.01)
    assert f_measure(40.0, 40.0) == pytest.approx(40.0)
    assert f_measure(0.0, 0.0) == 0.0


def test_f_beta_conventions():
    assert f_beta(0, 0, 3) == (0.0, 0.0, 0.0)
    assert f_beta(0, 2, 0) == (0.0, 0.0, 0.0)
    assert f_beta(0, 0, 0) == (0.0, 0.0, 100.0)
    assert f_beta(1, 2, 2) == (50.0, 50.0, pytest.approx(50.0))
    assert f_beta(1, 1, 4, beta=1.0)[2] == pytest.approx(40.0)
    for bad in ((3, 2, 5), (1, 5, 0), (-1, 2, 2)):
        with pytest.raises(ScoringError):
            f_beta(*bad)


@given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
def test_f_beta_monotone_in_tp(a, b, c):
    proposed, gold = max(a, b, c), max(b, c)
    fs = [f_beta(tp, proposed, gold)[2] for tp in range(min(proposed, gold) + 1)]
    if proposed or gold:
        assert fs == sorted(fs)


def test_score_two_sentence_hand_count():
    doc = [_m2("a b c", [GoldEdit(1, 2, "x")]), _m2("d e", [GoldEdit(0, 1, "y")])]
    rep = score_m2([["a", "x", "c"], ["d", "z"]], doc)
    assert (rep.tp, rep.proposed, rep.gold) == (1, 2, 2)
    assert rep.prf == (50.0, 50.0, pytest.approx(50.0))


def test_unchanged_output_scores_zero():
    doc = [_m2("a b c", [GoldEdit(1, 2, "x")])]
    rep = score_m2([["a", "b", "c"]], doc)
    assert rep.prf == (0.0, 0.0, 0.0)


@given(st.lists(st.tuples(TOKS, TOKS), min_size=1, max_size=5))
def test_self_generated_gold_scores_full(pairs):
    doc = [M2Sentence(tuple(s), {0: [GoldEdit(e.start, e.end, e.correction) for e in extract_edits(s, h)]})
           for s, h in pairs]
    assert score_m2([h for _, h in pairs], doc).f == pytest.approx(100.0)


def test_annotator_choice_is_greedy_on_running_counts():
    doc = [_m2("a b", [GoldEdit(0, 1, "x")], [GoldEdit(1, 2, "y"), GoldEdit(0, 1, "z")])]
    rep = score_m2([["a", "y"]], doc)
    assert rep.sentences[0].annotator == 1 and rep.tp == 1
    tie = [_m2("a b", [GoldEdit(0, 1, "x")], [GoldEdit(0, 1, "x")])]
    assert score_m2([["x", "b"]], tie).sentences[0].annotator == 0


def test_score_from_m2_text_and_line_mismatch():
    doc = parse_m2_text("S a b\nA 1 2|||X|||c|||REQUIRED|||-NONE-|||0\n\nS d\n"
                        "A -1 -1|||noop|||-NONE-|||REQUIRED|||-NONE-|||0\n")
    assert score_m2([["a", "c"], ["d"]], doc).f == pytest.approx(100.0)
    with pytest.raises(ScoringError, match="1 system sentences but 2"):
        score_m2([["a"]], doc)


def test_report_text():
    doc = [_m2("a b c", [GoldEdit(1, 2, "x")]), _m2("d e", [GoldEdit(0, 1, "y")])]
    rep = score_m2([["a", "x", "c"], ["d", "z"]], doc)
    assert rep.text() == "Precision    50.00\nRecall       50.00\nF0.5         50.00\n"
    assert "tp=1\n" in rep.key_values() and "f0.5=50.0000\n" in rep.key_values()


def test_character_distance_oracle_values():
    assert char_edit_distance("violets", "violates") == 2
    assert char_edit_distance("are prefers", "prefer") == 5
    assert char_edit_distance("", "abc") == 3
    assert edit_ratio("are prefers", "prefer") == pytest.approx(5 / 6.1)


@pytest.mark.parametrize("src, tgt, label", [
    ("violets", "violates", SMALL),
    ("harms", "harm", SMALL),
    ("are prefers", "prefer", LARGE),
    ("abcdefgh", "abcdefxy", SMALL),                 # distance 2, both 8 long
    ("abcdefghi", "abcdefgxy", SMALL),               # distance 2, both 9 long, ratio 2/9.1 < 0.25
    ("abcdefgh", "", LARGE),
    ("information", "informations", SMALL),
    ("a", "the", LARGE),
])
def test_classify_edit(src, tgt, label):
    assert classify_edit(src, tgt) == label


@given(st.text("abc ", max_size=12), st.text("abc ", max_size=12))
def test_classifier_is_symmetric(a, b):
    assert classify_edit(a, b) == classify_edit(b, a)


def test_portion_filter():
    src = "they are prefers tea".split()
    assert classify(src, Edit(1, 3, "prefer")) == LARGE
    assert portion_filter(LARGE)(src, Edit(1, 3, "prefer"))
    assert not portion_filter(SMALL)(src, Edit(1, 3, "prefer"))
    with pytest.raises(ValueError):
        portion_filter("medium")


@given(st.lists(TOKS, max_size=6), st.sets(st.sampled_from(["a", "b", "c", "the", "cat"])))
def test_oov_segmentation_is_a_partition(sources, vocab):
    oov, non = segment_oov(sources, vocab)
    assert sorted(oov + non) == list(range(len(sources)))
    assert all(any(t not in vocab for t in sources[i]) for i in oov)
    assert all(all(t in vocab for t in sources[i]) for i in non)


def test_analysis_report_lists_every_segment():
    doc = [_m2("a zz c", [GoldEdit(1, 2, "b")]), _m2("a b", [GoldEdit(0, 2, "the cat sat")])]
    text = analysis_report([["a", "b", "c"], ["a", "b"]], doc, {"a", "b", "c"})
    for name in ("OOV", "NonOOV", "All", "small", "large"):
        assert f"\n{name}" in text
    assert "OOV.f0.5=100.0000" in text and "NonOOV.recall=0.0000" in text
    assert "small.tp=1" in text and "large.gold=1" in text
