import pytest

from curvedetect.synthcorpus import generate_corpus, write_corpus_jsonl
from curvedetect.textpool import load_corpus


def test_deterministic_per_seed():
    assert generate_corpus(20, seed=4) == generate_corpus(20, seed=4)
    assert generate_corpus(20, seed=4) != generate_corpus(20, seed=5)


def test_themes_have_disjoint_content_words():
    words_a = {w.lower().strip(".,") for p in generate_corpus(60, 1, "harbor") for w in p.split()}
    words_b = {w.lower().strip(".,") for p in generate_corpus(60, 1, "orchard") for w in p.split()}
    shared = words_a & words_b
    # only function words overlap
    assert "the" in shared
    assert not {"sailor", "anchor", "moored"} & words_b
    assert not {"apple", "orchardist", "pruned"} & words_a


def test_unknown_theme():
    with pytest.raises(KeyError):
        generate_corpus(2, 0, theme="volcano")


def test_paragraph_shape():
    for p in generate_corpus(30, seed=2):
        assert p.endswith(".")
        assert 3 <= p.count(".") <= 8 + p.count(",")  # sentences per paragraph
        assert len(p.split()) >= 15


def test_jsonl_roundtrip(tmp_path):
    texts = generate_corpus(10, seed=9, theme="orchard")
    path = tmp_path / "corpus.jsonl"
    write_corpus_jsonl(texts, path)
    assert load_corpus(path, min_words=1) == [" ".join(t.split()) for t in texts]
