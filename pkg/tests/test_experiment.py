import json
from dataclasses import replace

import numpy as np
import pytest

from nardistill.experiment import (VARIANTS, ExperimentConfig, ablation_orderings, experiment_synth,
                                   first_token_confidence, medians, orderings, run_experiment, target_length,
                                   variant_name)
from nardistill.model import BangModel, ModelConfig


def med(**em):
    return {k: {"exact_match": v, "mode_consistency": v} for k, v in em.items()}


class TestOrderings:
    def test_all_hold(self):
        m = med(NONE=0.0, SEQ_HARD=0.3, BS_SOFT=0.4, **{"BS_SOFT+INV_PPL": 0.5})
        assert all(orderings(m).values())

    def test_inversion_reported(self):
        m = med(NONE=0.0, SEQ_HARD=0.4, BS_SOFT=0.3, **{"BS_SOFT+INV_PPL": 0.5})
        failed = [k for k, ok in orderings(m).items() if not ok]
        assert failed == ["exact_match: BS_SOFT >= SEQ_HARD", "mode_consistency: BS_SOFT >= SEQ_HARD"]

    def test_pathology_must_be_induced(self):
        m = med(NONE=0.95, SEQ_HARD=0.96, BS_SOFT=0.97, **{"BS_SOFT+INV_PPL": 0.98})
        assert not orderings(m)["mode_consistency(NONE) < 0.9"]

    def test_ablation(self):
        m = med(BS_SOFT=0.4, **{"BS_SOFT+LOSS": 0.3, "BS_SOFT+LOG_LOSS": 0.5})
        assert ablation_orderings(m)["exact_match: BS_SOFT+LOSS <= BS_SOFT"]
        assert not ablation_orderings(m)["exact_match: BS_SOFT+LOG_LOSS <= BS_SOFT"]

    def test_medians(self):
        runs = [{"variants": {"A": {"x": v}}} for v in (3.0, 1.0, 2.0)]
        assert medians(runs) == {"A": {"x": 2.0}}


def test_variant_names():
    assert [variant_name(*v) for v in VARIANTS] == ["NONE", "SEQ_HARD", "BS_SOFT", "BS_SOFT+INV_PPL",
                                                    "BS_SOFT+LOSS", "BS_SOFT+LOG_LOSS"]


def test_last_stream_is_nar_stream():
    assert target_length(experiment_synth()) == 10


def test_first_token_confidence_uniform_model():
    model = BangModel(ModelConfig(vocab_size=20, d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1), 0)
    model.params["out.w"].data[:] = 0.0
    model.params["out.b"].data[:] = 0.0
    src = [[6, 7, 8], [9, 10]]
    assert first_token_confidence(model, src, nar=True) == pytest.approx(1 / 20)
    assert first_token_confidence(model, src, nar=False) == pytest.approx(1 / 20)


def test_pipeline_smoke(tmp_path):
    cfg = ExperimentConfig(seeds=(0,), teacher_steps=10, student_steps=3, pretrain_steps=3, pretrain_docs=60,
                           with_pretrain=True, synth=replace(experiment_synth(), n_train=40, n_eval=6))
    result = run_experiment(cfg, tmp_path)
    names = set(result["median"])
    assert {variant_name(*v) for v in VARIANTS} | {"BS_SOFT+INV_PPL@pretrained"} == names
    saved = json.loads((tmp_path / "results.json").read_text())
    assert saved["median"] == result["median"]
    seed_dir = tmp_path / "seed0"
    assert (seed_dir / "distilled.jsonl").exists()
    assert (seed_dir / "BS_SOFT+INV_PPL" / "weights.csv").exists()
    assert len((seed_dir / "NONE" / "eval_nar_per_example.jsonl").read_text().splitlines()) == 6
    assert np.isfinite(result["per_seed"][0]["pretrain"]["first_loss"])
