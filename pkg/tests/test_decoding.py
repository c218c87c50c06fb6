import itertools
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import tiny_model
from nardistill.decoding import (beam_search, greedy_ar, greedy_ar_batch, length_normalised, nar_decode,
                                 nar_decode_batch)


class TableModel:
    """Next-token distributions drawn at random per prefix; lets a test enumerate the search space."""

    def __init__(self, vocab, seed, eos_id=2, sharpness=3.0):
        self.vocab = vocab
        self.seed = seed
        self.sharpness = sharpness
        self.config = SimpleNamespace(bos_id=1, eos_id=eos_id, pad_id=0, mask_id=3, max_tgt_len=8)
        self._cache = {}

    def encode(self, src):
        return None

    def log_probs(self, prefix: tuple) -> np.ndarray:
        if prefix not in self._cache:
            rng = np.random.default_rng([self.seed, len(prefix), *prefix])
            z = rng.normal(size=self.vocab) * self.sharpness
            self._cache[prefix] = z - np.log(np.exp(z - z.max()).sum()) - z.max()
        return self._cache[prefix]

    def next_token_log_probs(self, enc, prefixes):
        return np.stack([self.log_probs(tuple(int(t) for t in row)) for row in prefixes])


def brute_force_best(model, max_len, penalty=1.0):
    """Argmax over every sequence that ends in EOS or reaches max_len."""
    eos, bos = model.config.eos_id, model.config.bos_id
    best, best_score = None, -np.inf
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(model.vocab), repeat=length):
            if eos in seq[:-1] or (seq[-1] != eos and length < max_len):
                continue
            lp = sum(model.log_probs((bos,) + seq[:i])[tok] for i, tok in enumerate(seq))
            score = length_normalised(lp, length, penalty)
            if score > best_score:
                best, best_score = seq, score
    return best, best_score


class TestBeamOracle:
    @pytest.mark.parametrize("chunk", range(4))
    def test_full_width_beam_matches_enumeration(self, chunk):
        rng = np.random.default_rng(chunk)
        for i in range(50):
            vocab = int(rng.integers(3, 6))
            max_len = int(rng.integers(1, 5))
            model = TableModel(vocab, seed=chunk * 1000 + i, sharpness=float(rng.uniform(0.5, 4)))
            expected, expected_score = brute_force_best(model, max_len)
            res = beam_search(model, None, beam_size=vocab ** max_len, length_penalty=1.0, max_len=max_len)
            best = res.beam[0]
            assert best.tokens == expected, f"vocab={vocab} max_len={max_len} seed={model.seed}"
            assert best.score == pytest.approx(expected_score, abs=1e-9)

    def test_hand_set_optimum_of_length_two(self):
        # greedy picks token 4 first, but [5, EOS] has the higher total
        table = {
            (1,): np.log([1e-6, 1e-6, 0.05, 1e-6, 0.5, 0.45]),
            (1, 4): np.log([1e-6, 1e-6, 0.3, 1e-6, 0.35, 0.35]),
            (1, 5): np.log([1e-6, 1e-6, 0.99, 1e-6, 5e-3, 5e-3]),
        }
        model = TableModel(6, seed=0)
        model._cache.update(table)
        for prefix in itertools.product([4, 5], repeat=2):
            model._cache[(1,) + prefix] = np.log(np.full(6, 1 / 6))
        res = beam_search(model, None, beam_size=3, length_penalty=1.0, max_len=3)
        assert res.beam[0].tokens == (5, 2)
        assert res.tokens == [5]
        assert greedy_ar(model, None, max_len=3).tokens[0] == 4


class TestBeamContract:
    @pytest.mark.parametrize("seed", range(5))
    def test_beam_one_equals_greedy(self, seed):
        model = tiny_model(seed=seed)
        src = np.random.default_rng(seed).integers(6, 12, size=5)
        assert beam_search(model, src, beam_size=1, max_len=6).tokens == greedy_ar(model, src, max_len=6).tokens

    def test_finished_beam_sorted(self):
        model = TableModel(5, seed=3, sharpness=0.5)
        res = beam_search(model, None, beam_size=4, length_penalty=1.2, max_len=4)
        scores = [h.score for h in res.beam]
        assert scores == sorted(scores, reverse=True)
        assert res.score == scores[0]
        assert len(res.beam) <= 4

    def test_scores_are_length_normalised(self):
        model = TableModel(5, seed=4)
        for h in beam_search(model, None, beam_size=3, length_penalty=1.2, max_len=4).beam:
            assert h.score == pytest.approx(h.log_prob / len(h.tokens) ** 1.2)

    def test_invalid_width(self, model64):
        with pytest.raises(ValueError):
            beam_search(model64, np.array([6, 7]), beam_size=0)

    def test_output_stops_at_eos(self):
        model = TableModel(5, seed=0)
        model._cache[(1,)] = np.log([0.01, 0.01, 0.01, 0.01, 0.96])
        model._cache[(1, 4)] = np.log([0.01, 0.01, 0.96, 0.01, 0.01])
        assert beam_search(model, None, beam_size=2, max_len=4).tokens == [4]


class TestPassCounts:
    def test_nar_is_one_pass(self, model64):
        res = nar_decode(model64, np.array([6, 7, 8]), max_len=9)
        assert res.decoder_passes == 1
        assert len(res.tokens) <= 9

    def test_greedy_passes_equal_length_plus_eos(self):
        model = TableModel(5, seed=0)
        model._cache[(1,)] = np.log([0.01, 0.01, 0.01, 0.01, 0.96])
        model._cache[(1, 4)] = np.log([0.01, 0.01, 0.01, 0.01, 0.96])
        model._cache[(1, 4, 4)] = np.log([0.01, 0.01, 0.96, 0.01, 0.01])
        res = greedy_ar(model, None, max_len=8)
        assert res.tokens == [4, 4]
        assert res.decoder_passes == len(res.tokens) + 1

    def test_greedy_passes_capped_by_max_len(self):
        model = TableModel(5, seed=0)
        for k in range(6):
            model._cache[(1,) + (4,) * k] = np.log([0.01, 0.01, 0.01, 0.01, 0.96])
        res = greedy_ar(model, None, max_len=5)
        assert res.decoder_passes == 5 and res.tokens == [4] * 5


class TestBatchedPaths:
    def test_batched_nar_matches_single(self, model64):
        rng = np.random.default_rng(0)
        sources = [rng.integers(6, 12, size=n).tolist() for n in (3, 5, 2, 6)]
        batched = nar_decode_batch(model64, sources, max_len=7, batch_size=3)
        single = [nar_decode(model64, np.array(s), max_len=7).tokens for s in sources]
        assert batched == single

    def test_batched_greedy_matches_single(self, model64):
        rng = np.random.default_rng(1)
        sources = [rng.integers(6, 12, size=n).tolist() for n in (4, 2, 5)]
        batched = greedy_ar_batch(model64, sources, max_len=6, batch_size=2)
        single = [greedy_ar(model64, np.array(s), max_len=6).tokens for s in sources]
        assert batched == single
