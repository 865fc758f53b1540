import json

import numpy as np
import pytest
import torch

from conftest import tiny_train_config, toy_category
from robustad.heads import AnomalyDetector
from robustad.noise_synth import PseudoAnomalySynthesizer
from robustad.trainer import (
    VARIANTS,
    TrainConfig,
    VariantFlags,
    ablation_variant,
    train,
    variant_config,
)


def _toy_samples(seed=0, n=16, size=32):
    rng = np.random.default_rng(seed)
    return toy_category(rng, n_train=n, n_test_normal=2, n_test_anomalous=2, size=size).train_normals


def _read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def test_smoke_two_epochs_finite_loss(tmp_path):
    config = tiny_train_config(epochs=2, out_dir=str(tmp_path / "run"))
    result = train(config, _toy_samples())
    assert len(result.epoch_losses) == 2
    assert all(np.isfinite(l) for l in result.epoch_losses)
    assert result.global_steps == 4  # 16 samples / batch 8, 2 epochs


def test_burn_in_gate_uniform_then_weighted(tmp_path):
    config = tiny_train_config(epochs=4, burn_in=2, out_dir=str(tmp_path / "run"))
    result = train(config, _toy_samples())
    records = [r for r in _read_log(result.log_path) if r["event"] == "batch"]
    for rec in records:
        n = len(rec["w1"])
        if rec["epoch"] <= 2:
            assert rec["uniform"]
            assert rec["w1"] == pytest.approx([1.0 / n] * n, abs=0)
            assert rec["w2"] == pytest.approx([1.0 / n] * n, abs=0)
        else:
            assert not rec["uniform"]
    late = [r for r in records if r["epoch"] > 2]
    assert any(max(r["w1"]) - min(r["w1"]) > 1e-9 for r in late)


def test_log_self_consistency(tmp_path):
    config = tiny_train_config(epochs=3, burn_in=1, out_dir=str(tmp_path / "run"))
    result = train(config, _toy_samples())
    for rec in _read_log(result.log_path):
        if rec["event"] != "batch":
            continue
        recomputed = (
            float(np.dot(rec["w1"], rec["l_main"]))
            + float(np.dot(rec["w2"], rec["l_bce"]))
            + float(np.mean(rec["l_seg"]))
        )
        assert recomputed == pytest.approx(rec["total"], abs=1e-6)


def test_fixed_seed_training_is_deterministic(tmp_path):
    samples = _toy_samples(seed=5)
    cfg_a = tiny_train_config(epochs=2, seed=7, out_dir=str(tmp_path / "a"))
    cfg_b = tiny_train_config(epochs=2, seed=7, out_dir=str(tmp_path / "b"))
    res_a = train(cfg_a, samples)
    res_b = train(cfg_b, samples)
    assert res_a.epoch_losses == res_b.epoch_losses
    probe = torch.from_numpy(np.stack([s.image for s in samples[:4]]))
    with torch.no_grad():
        sa = res_a.model.eval().image_scores(probe)
        sb = res_b.model.eval().image_scores(probe)
    assert torch.equal(sa, sb)


def test_different_seed_changes_training():
    samples = _toy_samples(seed=5)
    res_a = train(tiny_train_config(epochs=2, seed=1), samples)
    res_b = train(tiny_train_config(epochs=2, seed=2), samples)
    assert res_a.epoch_losses != res_b.epoch_losses


def test_checkpoint_roundtrip_resumes_identical_scores(tmp_path):
    config = tiny_train_config(epochs=2, out_dir=str(tmp_path / "run"))
    samples = _toy_samples()
    result = train(config, samples)
    reloaded = AnomalyDetector.load(str(tmp_path / "run" / "last.pt")).eval()
    probe = torch.from_numpy(np.stack([s.image for s in samples[:4]]))
    with torch.no_grad():
        assert torch.equal(result.model.eval().image_scores(probe), reloaded.image_scores(probe))
    ckpt = torch.load(str(tmp_path / "run" / "last.pt"), weights_only=False)
    assert ckpt["epoch"] == 2
    assert "optimizer" in ckpt


def test_run_dir_artifacts(tmp_path):
    out = tmp_path / "run"
    config = tiny_train_config(epochs=2, out_dir=str(out))
    train(config, _toy_samples())
    assert (out / "config.json").is_file()
    assert (out / "train_log.jsonl").is_file()
    assert (out / "last.pt").is_file()
    assert (out / "best.pt").is_file()
    snapshot = json.loads((out / "config.json").read_text())
    assert snapshot["variant"] == "Proposed"
    assert snapshot["divergence"]["kind"] == "alpha"


def test_ablation_variant_table():
    assert ablation_variant("DL") == VariantFlags(False, False, False, False)
    assert ablation_variant("Wt-DL") == VariantFlags(False, False, False, True)
    assert ablation_variant("DL-CE") == VariantFlags(False, True, False, False)
    assert ablation_variant("SoftDL-CE") == VariantFlags(True, True, False, False)
    assert ablation_variant("Wt-SoftDL-CE") == VariantFlags(True, True, False, True)
    assert ablation_variant("Proposed") == VariantFlags(True, True, True, True)
    with pytest.raises(ValueError):
        ablation_variant("Extra")


def test_variant_config_switches_variant():
    base = tiny_train_config()
    dl = variant_config(base, "DL")
    assert dl.variant == "DL" and base.variant == "Proposed"


def test_dl_variant_disables_bce_and_seg(tmp_path):
    config = tiny_train_config(epochs=2, variant="DL", out_dir=str(tmp_path / "run"))
    result = train(config, _toy_samples())
    for rec in _read_log(result.log_path):
        if rec["event"] == "batch":
            assert all(v == 0.0 for v in rec["l_bce"])
            assert all(v == 0.0 for v in rec["l_seg"])
            assert not rec["kmeans_labels"]


def test_wt_dl_variant_weights_follow_deviation_loss(tmp_path):
    config = tiny_train_config(epochs=3, burn_in=1, variant="Wt-DL", out_dir=str(tmp_path / "run"))
    result = train(config, _toy_samples())
    weighted = [r for r in _read_log(result.log_path) if r["event"] == "batch" and not r["uniform"]]
    assert weighted
    for rec in weighted:
        order = np.argsort(rec["l_main"])
        w_sorted = np.asarray(rec["w1"])[order]
        assert np.all(np.diff(w_sorted) <= 1e-12)


def test_label_alternation_in_log(tmp_path):
    config = tiny_train_config(epochs=2, alternation="step", out_dir=str(tmp_path / "run"))
    result = train(config, _toy_samples())
    records = [r for r in _read_log(result.log_path) if r["event"] == "batch"]
    flags = [r["kmeans_labels"] for r in records]
    assert flags == [s % 2 == 1 for s in range(len(records))]


def test_non_finite_loss_aborts_with_diagnostic(tmp_path, monkeypatch):
    import robustad.trainer as trainer_mod
    from robustad.losses import ReferenceStats

    def poisoned_stats(m, mu, sigma, rng):
        return ReferenceStats(mu_s=float("nan"), sigma_s=1.0, m=m)

    monkeypatch.setattr(trainer_mod, "sample_reference_stats", poisoned_stats)
    out = tmp_path / "run"
    config = tiny_train_config(epochs=2, out_dir=str(out))
    with pytest.raises(RuntimeError, match="non-finite loss"):
        train(config, _toy_samples())
    diagnostic = json.loads((out / "diagnostic_batch.json").read_text())
    assert {"psi_k", "mu_s", "sigma_s", "w1", "w2", "l_main"} <= set(diagnostic)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_train_config(epochs=2, burn_in=2)
    with pytest.raises(ValueError):
        tiny_train_config(learning_rate=0.0)
    with pytest.raises(ValueError):
        tiny_train_config(alternation="never")
    with pytest.raises(ValueError):
        tiny_train_config(variant="Bogus")


def test_divergence_dict_coerced():
    config = tiny_train_config(divergence={"kind": "kl", "alpha": 0.1, "lam": 0.2})
    assert config.divergence.kind == "kl"
    assert config.divergence.lam == 0.2
