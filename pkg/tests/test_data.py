import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nardistill.data import (SPECIALS, Example, ModeOracle, SynthMMSpec, Vocab, collate, generate_synth_mm,
                             load_corpus, load_synth, make_batches, mode_targets, qg_source, read_rows,
                             write_corpus)
from nardistill.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def corpus():
    return generate_synth_mm(SynthMMSpec())


class TestVocab:
    def test_build_is_order_independent(self):
        a = Vocab.build(["b a a", "c b a"])
        b = Vocab.build(["c b a", "b a a"])
        assert a == b
        assert a.itos[len(SPECIALS):] == ["a", "b", "c"]

    def test_round_trip(self, tmp_path):
        v = Vocab.build(["x y z"])
        v.save(tmp_path / "v.json")
        assert Vocab.load(tmp_path / "v.json") == v

    def test_unknown_words_map_to_unk(self):
        v = Vocab.build(["x"])
        assert v.tokenize("x q") == [6, v.unk_id]

    def test_detokenize_drops_control_tokens(self):
        v = Vocab.build(["x y"])
        assert v.detokenize([v.bos_id, 6, 7, v.eos_id, v.pad_id]) == "x y"

    def test_specials_required(self):
        with pytest.raises(ConfigError):
            Vocab(["a", "b"])

    def test_max_size(self):
        assert len(Vocab.build(["a a b c"], max_size=7)) == 7

    def test_qg_source(self):
        assert qg_source("paris", "the capital") == "paris [SEP] the capital"


class TestBatching:
    def test_collate_appends_eos_and_pads(self):
        b = collate([Example([6, 7], [8], [9, 9]), Example([6], [8, 8, 8], [9])])
        assert b.tgt.tolist() == [[8, 2, 0, 0], [8, 8, 8, 2]]
        assert b.tgt_bs.tolist() == [[9, 9, 2], [9, 2, 0]]
        assert b.src_pad_mask.tolist() == [[False, False], [False, True]]

    def test_bs_dropped_unless_every_example_has_one(self):
        assert collate([Example([6], [7], [8]), Example([6], [7])]).tgt_bs is None

    def test_empty(self):
        with pytest.raises(DataError):
            collate([])

    def test_epoch_covers_every_example_once(self):
        examples = [Example([6 + i % 5], [7]) for i in range(23)]
        seen = np.concatenate([b.index for b in make_batches(examples, 5, seed=3)])
        assert sorted(seen.tolist()) == list(range(23))

    def test_order_depends_on_seed_and_epoch(self):
        examples = [Example([6], [7]) for _ in range(30)]
        order = lambda **kw: np.concatenate([b.index for b in make_batches(examples, 30, **kw)]).tolist()
        assert order(seed=1, epoch=0) == order(seed=1, epoch=0)
        assert order(seed=1, epoch=0) != order(seed=1, epoch=1)


class TestCorpusFiles:
    def test_jsonl_round_trip(self, tmp_path):
        vocab = Vocab.build(["a b c d"])
        ex = [Example(vocab.tokenize("a b"), vocab.tokenize("c"), vocab.tokenize("d d"), mode_id=1,
                      refs=[vocab.tokenize("c"), vocab.tokenize("d")])]
        write_corpus(tmp_path / "c.jsonl", ex, vocab)
        assert load_corpus(tmp_path / "c.jsonl", "jsonl", vocab) == ex

    def test_tsv(self, tmp_path):
        vocab = Vocab.build(["a b c"])
        (tmp_path / "c.tsv").write_text("a b\tc\nb\ta a\n")
        ex = load_corpus(tmp_path / "c.tsv", "tsv", vocab)
        assert [e.target for e in ex] == [[vocab.stoi["c"]], [vocab.stoi["a"]] * 2]

    def test_distilled_rows(self, tmp_path):
        vocab = Vocab.build(["a b"])
        row = {"source": "a", "gold_target": "b", "bs_target": "a b", "teacher_beam_score": -0.5}
        (tmp_path / "d.jsonl").write_text(json.dumps(row) + "\n")
        (e,) = load_corpus(tmp_path / "d.jsonl", "jsonl", vocab)
        assert e.bs_target == vocab.tokenize("a b") and e.teacher_score == -0.5

    def test_few_malformed_rows_skipped(self, tmp_path, caplog):
        lines = [json.dumps({"source": "a", "target": "b"})] * 19 + ["{broken"]
        (tmp_path / "c.jsonl").write_text("\n".join(lines))
        rows, bad = read_rows(tmp_path / "c.jsonl")
        assert len(rows) == 19 and bad == 1
        assert "malformed" in caplog.text

    def test_many_malformed_rows_fail(self, tmp_path):
        lines = [json.dumps({"source": "a", "target": "b"})] * 5 + ["oops", '{"source": ""}']
        (tmp_path / "c.jsonl").write_text("\n".join(lines))
        with pytest.raises(DataError, match="line 6"):
            read_rows(tmp_path / "c.jsonl")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_rows(tmp_path / "none.jsonl")

    def test_unknown_format(self, tmp_path):
        (tmp_path / "c.txt").write_text("a\n")
        with pytest.raises(ConfigError):
            read_rows(tmp_path / "c.txt", "xml")


class TestSynthetic:
    def test_reverse_or_copy_modes(self):
        assert mode_targets(["a", "b", "c"], "REVERSE_OR_COPY", 2) == [("a", "b", "c"), ("c", "b", "a")]

    def test_mixed_output_classified(self):
        oracle = ModeOracle("REVERSE_OR_COPY", 2)
        assert oracle.classify("abc", "aba") == ("mixed", None)
        assert oracle.classify("abc", "cba") == ("exact", 1)
        assert oracle.classify("abc", "ab") == ("partial", 0)

    @pytest.mark.parametrize("rule,k", [("REVERSE_OR_COPY", 2), ("ROTATIONS", 3), ("TEMPLATE_PARAPHRASE", 4)])
    def test_every_source_has_k_distinct_targets(self, rule, k):
        c = generate_synth_mm(SynthMMSpec(mode_rule=rule, k_modes=k, n_train=300, n_eval=50))
        for e in c.train + c.eval:
            assert len(set(c.oracle.targets(e.source))) == k
        for e in c.train:
            assert tuple(e.target) == c.oracle.targets(e.source)[e.mode_id]
        for e in c.eval:
            assert [tuple(r) for r in e.refs] == c.oracle.targets(e.source)

    def test_no_palindromes(self, corpus):
        assert all(e.source != e.source[::-1] for e in corpus.train + corpus.eval)

    def test_eval_disjoint_from_train(self, corpus):
        train = {tuple(e.source) for e in corpus.train}
        assert not any(tuple(e.source) in train for e in corpus.eval)

    def test_default_sizes(self, corpus):
        assert (len(corpus.train), len(corpus.eval), len(corpus.vocab)) == (2000, 200, 56)
        assert all(len(e.source) == 8 for e in corpus.train)

    def test_modes_uniform_chi_square(self, corpus):
        counts = np.bincount([e.mode_id for e in corpus.train], minlength=2)
        expected = len(corpus.train) / 2
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        p = math.erfc(math.sqrt(chi2 / 2))    # survival function of chi-square with one degree of freedom
        assert p > 0.01

    def test_deterministic(self):
        a = generate_synth_mm(SynthMMSpec(n_train=50, n_eval=10, seed=3))
        b = generate_synth_mm(SynthMMSpec(n_train=50, n_eval=10, seed=3))
        assert a.train == b.train and a.eval == b.eval

    def test_save_and_reload(self, tmp_path):
        c = generate_synth_mm(SynthMMSpec(n_train=40, n_eval=8))
        c.save(tmp_path)
        d = load_synth(tmp_path)
        assert d.spec == c.spec and d.vocab == c.vocab
        assert [e.target for e in d.train] == [e.target for e in c.train]
        assert [e.refs for e in d.eval] == [e.refs for e in c.eval]

    @pytest.mark.parametrize("kw", [dict(k_modes=1), dict(k_modes=3), dict(mode_rule="SHUFFLE"),
                                    dict(vocab_size=2, n_items=2)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            generate_synth_mm(SynthMMSpec(**kw))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 9), min_size=2, max_size=8))
    def test_oracle_accepts_each_mode_exactly(self, src):
        oracle = ModeOracle("ROTATIONS", 2)
        for m, t in enumerate(oracle.targets(src)):
            kind, mode = oracle.classify(src, t)
            assert kind == "exact" and oracle.targets(src)[mode] == t
