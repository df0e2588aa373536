import math

import numpy as np
import pytest

import fednorm


def test_version():
    assert isinstance(fednorm.__version__, str) and fednorm.__version__


def test_scale_normalize_rows_have_norm_sqrt_d():
    x = np.random.default_rng(0).normal(size=(5, 7))
    y = fednorm.scale_normalize(x)
    assert y.shape == (5, 7)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), math.sqrt(7), rtol=1e-12)


def test_mv_normalize_zero_mean_unit_variance():
    x = np.random.default_rng(1).normal(size=(4, 9)) * 3 + 2
    y = fednorm.mv_normalize(x, eps=0.0)
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, rtol=1e-12)


def test_degenerate_input_raises():
    with pytest.raises(fednorm.DegenerateInputError):
        fednorm.scale_normalize(np.zeros((1, 3)), eps=0.0)


def test_singular_values_match_numpy():
    a = np.random.default_rng(2).normal(size=(6, 4))
    np.testing.assert_allclose(fednorm.singular_values(a), np.linalg.svd(a, compute_uv=False), rtol=1e-10)


def test_dataset_and_partition():
    d = fednorm.gaussian_mixture(4, 30, 5, 6.0, 3)
    assert len(d) == 120 and d.inputs.shape == (120, 5)
    train, test = fednorm.train_test_split(d, 1 / 3, 3)
    assert len(train) == 80 and len(test) == 40
    shards = fednorm.partition(train, "n_class", num_clients=4, n=1, seed=3)
    assert [s["client_id"] for s in shards] == [0, 1, 2, 3]
    assert sum(s["m_k"] for s in shards) == len(train)
    assert all(sum(1 for h in s["histogram"] if h) == 1 for s in shards)
    with pytest.raises(fednorm.ConfigError):
        fednorm.partition(train, "bogus")
    with pytest.raises(fednorm.FormatError):
        fednorm.Dataset(np.zeros((2, 3)), [0, 5], 3)


def test_model_predict_and_checkpoint(tmp_path):
    m = fednorm.mlp(5, [8, 6], 3, norm_mode="fn_last", neg_slope=0.1, seed=4)
    x = np.random.default_rng(3).normal(size=(10, 5))
    logits, features = m.predict(x)
    assert logits.shape == (10, 3) and features.shape == (10, 6)
    np.testing.assert_allclose(np.linalg.norm(features, axis=1), math.sqrt(6), rtol=1e-12)

    path = tmp_path / "model.json"
    m.save(str(path))
    again = fednorm.load_model(str(path))
    np.testing.assert_array_equal(again.predict(x)[0], logits)
    assert fednorm.model_from_checkpoint(m.to_checkpoint()).norm_mode == "fn_last"
    with pytest.raises(fednorm.FednormError):
        fednorm.load_model(str(tmp_path / "missing.json"))


def test_fn_keeps_vanilla_argmax():
    vanilla = fednorm.mlp(6, [7, 5], 4, seed=8)
    fn = vanilla.with_norm_mode("fn_last")
    x = np.random.default_rng(5).normal(size=(200, 6))
    assert (vanilla.predict(x)[0].argmax(1) == fn.predict(x)[0].argmax(1)).all()


def test_spectral_gap():
    m = fednorm.mlp(5, [8, 6], 3, seed=1)
    r = fednorm.spectral_gap(m, np.random.default_rng(6).normal(size=(12, 5)))
    assert len(r["singular_values"]) == 6
    assert r["spectral_gap"] >= 1.0


def test_verify():
    ok, reports = fednorm.verify("prop3")
    assert ok and len(reports) == 3
    assert all(r["argmax_agreement_rate"] == 1.0 for r in reports)
    ok, reports = fednorm.verify("fn_reduction", trials=10, inject_bias=True)
    assert not ok and reports[0]["witness"]


def test_run_experiment_is_deterministic():
    c = fednorm.default_config()
    c["dataset"].update(num_classes=4, samples_per_class=30, dim=6)
    c["partition"]["num_clients"] = 4
    c["model"]["hidden"] = [8, 6]
    c["algo"].update(rounds=4, local_steps=3, batch_size=8)
    c["eval_every"] = 2
    records, model = fednorm.run_experiment(c)
    assert [r["round"] for r in records] == [2, 4]
    assert 0.0 <= records[-1]["global_acc"] <= 1.0
    again, _ = fednorm.run_experiment(c, threads=2)
    assert again == records
    assert model.norm_mode == "fn_last"

    c["algo"]["lr"] = -1
    with pytest.raises(fednorm.ConfigError, match="algo.lr"):
        fednorm.run_experiment(c)
