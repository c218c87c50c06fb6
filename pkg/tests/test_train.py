import json

import numpy as np
import pytest

from conftest import random_examples, tiny_model
from nardistill.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from nardistill.data import SynthMMSpec, generate_synth_mm
from nardistill.distill import loss_ar, loss_bang, loss_overall
from nardistill.errors import ConfigError
from nardistill.tensor import Adam, NumericError
from nardistill.train import THREADS_ENV, ExampleStream, TrainConfig, optimizer_step, thread_count, train


def run(steps=12, seed=0, out_dir=None, start_step=0, model=None, optimizer=None, sp="NONE"):
    model = model or tiny_model(seed=seed, dtype=np.float32)
    stream = ExampleStream(random_examples(40, seed=seed, with_bs=True), 8, seed)
    loss_fn = lambda b, _: loss_overall(model, None, b, "SEQ_HARD", 1.0, sp)
    hist = train(model, loss_fn, stream, TrainConfig(steps=steps, lr=3e-3, log_every=1), out_dir,
                 optimizer=optimizer, start_step=start_step)
    return model, hist


class TestDeterminism:
    def test_same_seed_bitwise(self):
        _, a = run()
        _, b = run()
        assert a == b

    def test_different_seed_differs(self):
        assert run(seed=0)[1] != run(seed=1)[1]

    def test_thread_count(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "3")
        assert thread_count(deterministic=True) == 1
        assert thread_count(deterministic=False) == 3
        monkeypatch.setenv(THREADS_ENV, "many")
        assert thread_count(deterministic=False) == 1


class TestStream:
    def test_batches_addressable_by_step(self):
        ex = random_examples(30)
        a, b = ExampleStream(ex, 7, seed=2), ExampleStream(ex, 7, seed=2)
        for step in (9, 0, 4, 20):
            assert np.array_equal(a.batch(step).index, b.batch(step).index)

    def test_epoch_has_no_repeats(self):
        s = ExampleStream(random_examples(30), 10, seed=0)
        idx = np.concatenate([s.batch(i).index for i in range(3)])
        assert sorted(idx.tolist()) == list(range(30))

    def test_empty(self):
        with pytest.raises(ValueError):
            ExampleStream([], 4)


class TestLoop:
    def test_loss_decreases_on_toy_data(self):
        corpus = generate_synth_mm(SynthMMSpec(n_items=4, vocab_size=10, n_train=50, n_eval=5))
        model = tiny_model(seed=0, dtype=np.float32, vocab_size=len(corpus.vocab), n_streams=5)
        stream = ExampleStream(corpus.train, 10, 0)
        hist = train(model, lambda b, _: loss_bang(model, b), stream, TrainConfig(steps=200, lr=3e-3))
        assert np.mean(hist[-20:]) < np.mean(hist[:20])

    def test_logs_and_checkpoint(self, tmp_path):
        run(steps=6, out_dir=tmp_path, sp="INV_PPL")
        lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in lines] == list(range(6))
        assert {"total", "bang", "distill"} <= set(lines[0])
        assert (tmp_path / "weights.csv").exists()
        assert read_manifest(tmp_path / "checkpoint")["step"] == 6

    def test_resume_matches_unbroken_run(self, tmp_path):
        _, full = run(steps=12)
        _, first = run(steps=6, out_dir=tmp_path)
        model, _, state, manifest = load_checkpoint(tmp_path / "checkpoint")
        opt = Adam(model.parameters(), lr=3e-3)
        opt.state = state
        _, second = run(steps=12, start_step=manifest["step"], model=model, optimizer=opt)
        np.testing.assert_allclose(first + second, full, atol=1e-4)

    def test_non_finite_loss_aborts_before_update(self, batch):
        model = tiny_model()
        before = model.state_dict()
        opt = Adam(model.parameters())

        def poisoned():
            bundle = loss_ar(model, batch)
            bundle.total = bundle.total * float("nan")
            return bundle

        with pytest.raises(NumericError, match="non-finite"):
            optimizer_step(opt, poisoned)
        for k, v in model.state_dict().items():
            assert np.array_equal(v, before[k])


class TestCheckpoint:
    def test_adam_state_round_trip(self, tmp_path):
        model, _ = run(steps=3)
        opt = Adam(model.parameters())
        optimizer_step(opt, lambda: loss_bang(model, ExampleStream(random_examples(8), 4).batch(0)))
        save_checkpoint(tmp_path, model, optim_state=opt.state, step=3, extra={"note": "x"})
        _, _, state, manifest = load_checkpoint(tmp_path)
        assert state.t == opt.state.t and manifest["extra"] == {"note": "x"}
        for i in opt.state.m:
            np.testing.assert_array_equal(state.m[i], opt.state.m[i])

    def test_weights_file_is_little_endian_float32(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        save_checkpoint(tmp_path, model)
        first = read_manifest(tmp_path)["tensors"][0]
        raw = np.fromfile(tmp_path / "weights.bin", dtype="<f4", count=int(np.prod(first["shape"])))
        np.testing.assert_array_equal(raw.reshape(first["shape"]), model.params[first["name"]].data)

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{")
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path)

    def test_unknown_format(self, tmp_path):
        save_checkpoint(tmp_path, tiny_model())
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["format"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path)
