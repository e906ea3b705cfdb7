import json

import numpy as np
import pytest
from scipy.stats import chisquare

from curvedetect.errors import CorpusError, ValidationError
from curvedetect.modelclient import GenerationParams
from curvedetect.textpool import (
    Label,
    NGramGenerator,
    TargetPool,
    TextRecord,
    build_pool,
    extract_prompt,
    load_corpus,
    read_pool,
    write_pool,
)

from mocks import TemplateGenerator


def _write_plain(path, docs):
    path.write_text("\n\n".join(docs), encoding="utf-8")


def _write_jsonl(path, docs):
    path.write_text("\n".join(json.dumps({"text": d}) for d in docs), encoding="utf-8")


def _doc(n_words, word="w"):
    return " ".join(f"{word}{i}" for i in range(n_words))


class TestLoadCorpus:
    def test_min_words_filter(self, tmp_path):
        docs = [_doc(5), _doc(60), _doc(80)]
        plain = tmp_path / "corpus.txt"
        _write_plain(plain, docs)
        assert len(load_corpus(plain, min_words=50, max_records=10, seed=0)) == 2

        jsonl = tmp_path / "corpus.jsonl"
        _write_jsonl(jsonl, docs)
        assert len(load_corpus(jsonl, min_words=50, max_records=10, seed=0)) == 2

    def test_determinism(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        _write_jsonl(path, [_doc(10, f"d{i}x") for i in range(50)])
        a = load_corpus(path, min_words=1, max_records=20, seed=123)
        b = load_corpus(path, min_words=1, max_records=20, seed=123)
        assert a == b
        c = load_corpus(path, min_words=1, max_records=20, seed=124)
        assert a != c

    def test_uniform_subsample(self, tmp_path):
        # frequency of each doc over many seeds ~ uniform (chi-squared)
        n_docs, take, n_seeds = 1000, 300, 300
        path = tmp_path / "corpus.jsonl"
        _write_jsonl(path, [f"doc {i} alpha beta" for i in range(n_docs)])
        counts = np.zeros(n_docs)
        for seed in range(n_seeds):
            for text in load_corpus(path, min_words=1, max_records=take, seed=seed):
                counts[int(text.split()[1])] += 1
        _, pvalue = chisquare(counts)
        assert pvalue > 1e-6

    def test_whitespace_normalized(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        _write_jsonl(path, ["a\tb   c\nd"])
        assert load_corpus(path, min_words=1) == ["a b c d"]

    def test_errors(self, tmp_path):
        with pytest.raises(CorpusError):
            load_corpus(tmp_path / "missing.jsonl", min_words=1)

        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"text": "ok doc"}\n{not json}\n', encoding="utf-8")
        with pytest.raises(CorpusError, match="line 2"):
            load_corpus(bad, min_words=1)

        nofield = tmp_path / "nofield.jsonl"
        nofield.write_text('{"body": "missing"}\n', encoding="utf-8")
        with pytest.raises(CorpusError, match="line 1"):
            load_corpus(nofield, min_words=1)

        short = tmp_path / "short.txt"
        _write_plain(short, [_doc(3)])
        with pytest.raises(CorpusError):
            load_corpus(short, min_words=50)


class TestExtractPrompt:
    def test_prefix(self):
        assert extract_prompt("a b c d e", 3) == "a b c"

    def test_exact_boundary(self):
        text = _doc(20)
        assert extract_prompt(text, 20) == text

    def test_mixed_whitespace(self):
        # oracle: whitespace split, single-space join
        text = "The\tquick  brown\n fox " + _doc(30)
        expected = " ".join(text.split()[:20])
        assert extract_prompt(text, 20) == expected

    def test_too_short(self):
        with pytest.raises(ValidationError):
            extract_prompt("a b c", 4)


class TestBuildPool:
    def test_single_pair_builtin_reproducible(self, model_a3, heldout_a):
        gen = NGramGenerator(model_a3)
        params = GenerationParams(max_tokens=80)
        pools = [
            build_pool(heldout_a[:3], gen, n_per_class=1, gen_params=params,
                       seed=5, min_machine_words=25)
            for _ in range(2)
        ]
        assert pools[0].records == pools[1].records
        machine = pools[0].machines()[0]
        assert machine.text.startswith(machine.prompt)
        assert machine.generator_id == gen.identity

    def test_paper_pool_size(self):
        # 300 per class -> overall pool of 600 records
        humans = [_doc(40, f"h{i}w") for i in range(320)]
        pool = build_pool(
            humans, TemplateGenerator(), n_per_class=300,
            gen_params=GenerationParams(), seed=0,
        )
        assert len(pool.records) == 600
        assert len(pool.humans()) == 300
        assert len(pool.machines()) == 300
        assert len({r.id for r in pool.records}) == 600

    def test_flaky_backend_uses_spares(self):
        humans = [_doc(40, f"h{i}w") for i in range(350)]
        banned = {extract_prompt(humans[i], 20) for i in range(0, 30, 3)}  # 10 prompts
        gen = TemplateGenerator(fail_prompts=banned)
        pool = build_pool(
            humans, gen, n_per_class=300, gen_params=GenerationParams(), seed=0
        )
        assert len(pool.humans()) == 300
        assert len(pool.machines()) == 300
        # dropped pairs are replaced from spares without disturbing the rest
        expected_humans = [h for h in humans if extract_prompt(h, 20) not in banned][:300]
        assert [r.text for r in pool.humans()] == expected_humans

    def test_machine_pairing_and_prompts(self):
        humans = [_doc(40, f"h{i}w") for i in range(12)]
        pool = build_pool(
            humans, TemplateGenerator(), n_per_class=10,
            gen_params=GenerationParams(), seed=0,
        )
        for human, machine in zip(pool.humans(), pool.machines()):
            assert machine.prompt == extract_prompt(human.text, 20)

    def test_insufficient_humans(self):
        with pytest.raises(ValidationError):
            build_pool([_doc(40)], TemplateGenerator(), n_per_class=5,
                       gen_params=GenerationParams(), seed=0)

    def test_exhausted_spares(self):
        humans = [_doc(40, f"h{i}w") for i in range(6)]
        banned = {extract_prompt(h, 20) for h in humans[:3]}
        with pytest.raises(ValidationError, match="insufficient"):
            build_pool(humans, TemplateGenerator(fail_prompts=banned), n_per_class=5,
                       gen_params=GenerationParams(), seed=0)

    def test_workers_do_not_change_output(self):
        humans = [_doc(40, f"h{i}w") for i in range(25)]
        params = GenerationParams()
        serial = build_pool(humans, TemplateGenerator(), 20, params, seed=1)
        threaded = build_pool(humans, TemplateGenerator(), 20, params, seed=1, workers=4)
        assert serial.records == threaded.records


class TestRecordsAndIO:
    def test_record_invariants(self):
        with pytest.raises(ValidationError):
            TextRecord(id="x", text="   ", label=Label.HUMAN)
        with pytest.raises(ValidationError):
            TextRecord(id="x", text="abc", label=Label.MACHINE)  # no generator_id
        with pytest.raises(ValidationError):
            TextRecord(id="x", text="abc", label=Label.HUMAN, generator_id="g")
        with pytest.raises(ValidationError):
            TextRecord(id="x", text="abc", label=Label.MACHINE,
                       generator_id="g", prompt="zz")

    def test_unique_ids_enforced(self):
        r = TextRecord(id="a", text="hello world", label=Label.HUMAN)
        with pytest.raises(ValidationError):
            TargetPool(records=[r, r], seed=0)

    def test_pool_roundtrip(self, tmp_path):
        humans = [_doc(40, f"h{i}w") for i in range(6)]
        pool = build_pool(humans, TemplateGenerator(), 5,
                          GenerationParams(), seed=9)
        path = tmp_path / "pool.jsonl"
        write_pool(pool, path)
        assert (tmp_path / "pool.manifest.json").exists()
        loaded = read_pool(path)
        assert loaded.records == pool.records
        assert loaded.seed == pool.seed
        assert loaded.source_manifest == pool.source_manifest
