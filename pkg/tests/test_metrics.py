import csv
import json
import math

import numpy as np
import pytest

from conftest import tiny_model
from nardistill.data import Example, ModeOracle
from nardistill.metrics import (DECODE_PATHS, EvalReport, bench_latency, bleu, decode_all, evaluate,
                                exact_match, format_score, lcs_length, mode_consistency, overall, ppl, rouge,
                                score_outputs, write_latency_csv)
from nardistill.model import NAR


def toks(s):
    return s.split()


class TestBleu:
    def test_brevity_penalty_case(self):
        out = bleu([toks("a b c d")], [toks("a b c d e")])
        assert out[4] == pytest.approx(100 * math.exp(1 - 5 / 4), abs=0.01)
        assert out[4] == pytest.approx(77.88, abs=0.01)

    def test_identical(self):
        assert bleu([toks("a b c d e")], [toks("a b c d e")]) == {1: 100.0, 2: 100.0, 4: 100.0}

    def test_disjoint(self):
        assert bleu([toks("x y z")], [toks("a b c")])[1] == 0.0

    def test_unigram_clipping(self):
        # "the the the" against "the cat": one clipped match out of three
        assert bleu([toks("the the the")], [toks("the cat")])[1] == pytest.approx(100 / 3)

    def test_best_reference_counts(self):
        assert bleu([toks("c b a")], [[toks("a b c"), toks("c b a")]])[4] == pytest.approx(100.0)

    def test_empty_candidate(self):
        assert bleu([[]], [toks("a")])[4] == 0.0

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            bleu([toks("a")], [toks("a"), toks("b")])


class TestRouge:
    def test_lcs_case(self):
        assert lcs_length(toks("a b c"), toks("a c")) == 2
        assert rouge([toks("a b c")], [toks("a c")])["rL"] == pytest.approx(80.0)

    def test_unigram_and_bigram(self):
        r = rouge([toks("a b c")], [toks("a b d")])
        assert r["r1"] == pytest.approx(100 * 2 / 3)
        assert r["r2"] == pytest.approx(50.0)

    def test_best_reference(self):
        assert rouge([toks("c b a")], [[toks("a b c"), toks("c b a")]])["rL"] == pytest.approx(100.0)

    @pytest.mark.parametrize("a,b", [("a b c d", "b d"), ("x y", "y x"), ("a a b", "a b a b")])
    def test_lcs_symmetric(self, a, b):
        assert lcs_length(toks(a), toks(b)) == lcs_length(toks(b), toks(a))


class TestSummaries:
    def test_overall_mean_of_three(self):
        assert format_score(overall([32.59, 8.98, 27.41])) == "22.99"

    def test_exact_match(self):
        assert exact_match([[1, 2], [3]], [[[1, 2], [2, 1]], [[4]]]) == 0.5

    def test_mode_consistency(self):
        oracle = ModeOracle("REVERSE_OR_COPY", 2)
        srcs = [toks("a b c"), toks("d e f")]
        assert mode_consistency(srcs, [toks("a b c"), toks("f e d")], oracle) == 1.0
        assert mode_consistency(srcs, [toks("a b a"), toks("d e d")], oracle) == 0.0

    def test_mode_consistency_needs_oracle(self):
        with pytest.raises(ValueError):
            mode_consistency([[1]], [[1]], None)

    def test_score_outputs_keys(self):
        oracle = ModeOracle("REVERSE_OR_COPY", 2)
        s = score_outputs([[1, 2, 3]], [[3, 2, 1]], [[[1, 2, 3], [3, 2, 1]]], oracle)
        assert s["exact_match"] == 1.0 and s["mode_consistency"] == 1.0
        assert s["overall"] == pytest.approx((s["r1"] + s["r2"] + s["rL"]) / 3)


class TestPerplexity:
    @pytest.mark.parametrize("stream", [1, 2, NAR])
    def test_uniform_model_gives_vocab_size(self, stream):
        model = tiny_model()
        model.params["out.w"].data[:] = 0.0
        model.params["out.b"].data[:] = 0.0
        ex = [Example([6, 7, 8], [9, 10]), Example([6], [11, 9, 9])]
        assert ppl(model, stream, ex) == pytest.approx(12.0, rel=1e-9)

    def test_at_least_one(self, model64):
        ex = [Example([6, 7], [8, 9])]
        assert ppl(model64, 1, ex) >= 1.0


@pytest.fixture
def eval_set():
    rng = np.random.default_rng(0)
    out = []
    for _ in range(6):
        src = rng.integers(6, 12, size=4).tolist()
        out.append(Example(src, src, refs=[src, src[::-1]]))
    return out


class TestEvaluate:
    @pytest.mark.parametrize("path", DECODE_PATHS)
    def test_report(self, model64, eval_set, path, tmp_path):
        rep = evaluate(model64, eval_set, path, ModeOracle("REVERSE_OR_COPY", 2), beam_size=2, max_len=5)
        assert len(rep.per_example) == len(eval_set)
        assert {"bleu4", "rL", "overall", "exact_match", "mode_consistency"} <= set(rep.scores)
        rep.save(tmp_path / "r.json", tmp_path / "per.jsonl")
        body = json.loads((tmp_path / "r.json").read_text())
        assert body["path"] == path and "per_example" not in body
        assert len((tmp_path / "per.jsonl").read_text().splitlines()) == len(eval_set)

    def test_nar_pass_count(self, model64, eval_set):
        assert evaluate(model64, eval_set, "nar").decoder_passes["mean"] == 1.0

    def test_unknown_path(self, model64):
        with pytest.raises(ValueError):
            decode_all(model64, [[6]], "ctc")

    def test_report_is_a_dataclass(self):
        assert EvalReport("nar", {}).to_dict()["path"] == "nar"


class TestLatency:
    def test_rows_and_csv(self, model64, tmp_path):
        sources = [np.array([6, 7, 8])] * 3
        rows = bench_latency(model64, sources, paths=("ar_greedy", "nar"), warmup=1, max_len=6)
        assert [r.decode_path for r in rows] == ["ar_greedy", "nar"]
        assert rows[1].decoder_passes == 1.0
        assert all(r.mean_ms > 0 and r.n_samples == 3 for r in rows)
        write_latency_csv(tmp_path / "lat.csv", rows)
        with open(tmp_path / "lat.csv") as fh:
            table = list(csv.DictReader(fh))
        assert list(table[0]) == ["decode_path", "mean_ms", "p50_ms", "decoder_passes"]
        assert table[1]["decode_path"] == "nar"
