import json

import numpy as np
import pytest

from ecola.data import (AlignedSample, DataFormatError, Quadruple, add_reciprocals,
                        build_wiki_description_sample, load_aligned, load_dataset,
                        load_quadruples, pair_distant, read_documents, save_quadruples,
                        write_aligned_records)
from ecola.vocab import Vocabulary, build_subword_vocab, tokenize

THREE = "a\tlikes\tb\t2018-01-02\nb\thates\tc\t2018-01-01\nc\tlikes\ta\t2018-01-03\n"


@pytest.fixture
def three(tmp_path):
    p = tmp_path / "q.tsv"
    p.write_text(THREE)
    return p


def test_hand_written_file_ids(three):
    quads, v = load_quadruples(three)
    assert v.entities.labels == ["a", "b", "c"]
    assert v.predicates.labels == ["likes", "hates"]
    # timestamps indexed chronologically, not by appearance
    assert v.timestamps.labels == ["2018-01-01", "2018-01-02", "2018-01-03"]
    assert quads.tolist() == [[0, 0, 1, 1], [1, 1, 2, 0], [2, 0, 0, 2]]


def test_empty_file(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    quads, v = load_quadruples(p)
    assert quads.shape == (0, 4)
    assert (v.n_entities, v.n_predicates, v.n_timestamps) == (0, 0, 0)


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("a\tb\tc\t1\na\tb\tc\n")
    with pytest.raises(DataFormatError, match=":2:"):
        load_quadruples(p)


def test_unknown_timestamp_format(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("a\tb\tc\tlast tuesday\n")
    with pytest.raises(DataFormatError, match="timestamp"):
        load_quadruples(p)


def test_integer_timestamps_sort_numerically(tmp_path):
    p = tmp_path / "q.tsv"
    p.write_text("a\tr\tb\t10\na\tr\tb\t9\n")
    _, v = load_quadruples(p)
    assert v.timestamps.labels == ["9", "10"]


def test_save_load_round_trip(three, tmp_path):
    quads, v = load_quadruples(three)
    out = tmp_path / "again.tsv"
    save_quadruples(out, quads, v)
    again, v2 = load_quadruples(out)
    assert np.array_equal(again, quads)
    assert v2.entities == v.entities and v2.timestamps == v.timestamps


def test_dataset_shares_vocabulary(three, tmp_path):
    test = tmp_path / "test.tsv"
    test.write_text("a\thates\td\t2018-01-04\n")
    ds = load_dataset(three, None, test)
    assert ds.vocab.n_entities == 4 and ds.vocab.n_timestamps == 4
    assert ds.test.tolist() == [[0, 1, 3, 3]]


def test_reciprocals_double_and_swap(three):
    quads, v = load_quadruples(three)
    aug = add_reciprocals(quads, v)
    assert v.n_predicates == 4
    assert len(aug) == 2 * len(quads)
    assert np.array_equal(aug[:3], quads)
    s, p, o, t = quads[0]
    assert aug[3].tolist() == [o, p + 2, s, t]
    assert v.predicates.label(p + 2) == v.predicates.label(p) + "^-1"


def test_reciprocals_twice_rejected(three):
    quads, v = load_quadruples(three)
    aug = add_reciprocals(quads, v)
    with pytest.raises(ValueError):
        add_reciprocals(aug, v)


def test_reciprocal_flag_survives_vocab_file(three, tmp_path):
    quads, v = load_quadruples(three)
    add_reciprocals(quads, v)
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt").reciprocal


# -- distant pairing --------------------------------------------------------

def _pairing_vocab():
    v = Vocabulary()
    v.subwords = build_subword_vocab(["google consulted the united states on friday"], 200)
    v.entities.add("Google")
    v.entities.add("United_States")
    v.entities.add("France")
    v.predicates.add("consult")
    v.timestamps.add("d1")
    return v


def test_sentence_mentioning_both_entities_yields_one_sample():
    v = _pairing_vocab()
    quads = np.array([[0, 0, 1, 0]])
    docs = [{"key": "d1", "text": "Google consulted the United States on Friday"}]
    out = pair_distant(quads, docs, v)
    assert len(out) == 1
    assert out[0].quad == Quadruple(0, 0, 1, 0)
    assert list(out[0].tokens) == tokenize("Google consulted the United States on Friday",
                                           v.subwords)


def test_subject_only_sentence_yields_nothing():
    v = _pairing_vocab()
    docs = [{"key": "d1", "text": "Google said nothing."}]
    assert pair_distant(np.array([[0, 0, 1, 0]]), docs, v) == []


def test_two_sentences_two_samples():
    v = _pairing_vocab()
    docs = [{"key": "d1", "text": "Google met the United States. Later the United States "
                                  "thanked Google! Nothing else."}]
    out = pair_distant(np.array([[0, 0, 1, 0]]), docs, v)
    assert len(out) == 2
    assert all(s.quad == Quadruple(0, 0, 1, 0) for s in out)


def test_key_must_match_timestamp():
    v = _pairing_vocab()
    docs = [{"key": "other", "text": "Google consulted the United States."}]
    assert pair_distant(np.array([[0, 0, 1, 0]]), docs, v) == []


def test_whole_word_matching():
    v = _pairing_vocab()
    docs = [{"key": "d1", "text": "Googleplex consulted the United States."}]
    assert pair_distant(np.array([[0, 0, 1, 0]]), docs, v) == []


def test_missing_surface_form_skips_quadruple(caplog):
    v = _pairing_vocab()
    docs = [{"key": "d1", "text": "Google consulted the United States."}]
    forms = {"Google": "Google"}
    out = pair_distant(np.array([[0, 0, 1, 0]]), docs, v, surface_forms=forms)
    assert out == []
    assert "skipped" in caplog.text


def test_pairing_references_input_quadruples_only():
    v = _pairing_vocab()
    quads = np.array([[0, 0, 1, 0], [0, 0, 2, 0]])
    docs = [{"key": "d1", "text": "Google and France and the United States."}]
    out = pair_distant(quads, docs, v)
    rows = {tuple(q) for q in quads.tolist()}
    assert len(out) == 2 and all(tuple(s.quad) in rows for s in out)


def test_read_documents_validates(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"key": "d1", "text": "x"}\n{"key": "d2"}\n')
    with pytest.raises(DataFormatError, match=":2:"):
        read_documents(p)


# -- aligned samples --------------------------------------------------------

def test_aligned_sample_needs_tokens():
    with pytest.raises(ValueError):
        AlignedSample(Quadruple(0, 0, 0, 0), ())


def test_load_aligned_truncates(tmp_path):
    v = _pairing_vocab()
    p = tmp_path / "a.jsonl"
    write_aligned_records(p, [{"subject": "Google", "predicate": "consult",
                               "object": "United_States", "timestamp": "d1",
                               "text": "google consulted the united states on friday"},
                              {"subject": "Nobody", "predicate": "consult",
                               "object": "France", "timestamp": "d1", "text": "x"}])
    out = load_aligned(p, v, max_tokens=3)
    assert len(out) == 1 and len(out[0].tokens) == 3
    assert json.loads(p.read_text().splitlines()[0])["subject"] == "Google"


def test_wiki_sample_concatenates():
    sw = build_subword_vocab(["a rel b"], 50)
    s = build_wiki_description_sample(Quadruple(0, 0, 1, 0), "A", "rel", "B", sw)
    assert list(s.tokens) == tokenize("a rel b", sw)


def test_wiki_sample_truncates():
    sw = build_subword_vocab(["one two three four five six seven eight nine ten"], 400)
    s = build_wiki_description_sample(Quadruple(0, 0, 1, 0), "one two three four",
                                      "five six", "seven eight nine ten", sw, max_tokens=4)
    full = tokenize("one two three four five six seven eight nine ten", sw)
    assert list(s.tokens) == full[:4]


def test_wiki_sample_rejects_empty_description():
    sw = build_subword_vocab(["a"], 50)
    with pytest.raises(ValueError, match="subject"):
        build_wiki_description_sample(Quadruple(0, 0, 1, 0), " ", "rel", "B", sw)
