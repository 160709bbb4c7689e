import json

import numpy as np
import pytest

import mora


def test_softmax_temperature():
    np.testing.assert_allclose(mora.softmax([1.0, 0.0], 1.0), [0.73106, 0.26894], atol=1e-5)
    np.testing.assert_allclose(mora.softmax([1.0, 0.0], 0.1), [0.99995, 0.00005], atol=1e-5)


def test_importance_weight_values():
    assert mora.importance_weight([1.0, 0.0], 0, "softmax", 1.0) == pytest.approx(0.39322, abs=1e-5)
    assert mora.importance_weight([1.0, 0.0], 0, "voting", 10.0) == pytest.approx(0.04988, abs=1e-5)
    assert mora.importance_weight([0.0, 1.0], 0, "softmax", 1.0) == 0.0


def test_weight_formula_oracle():
    assert mora.check_weight_formula("softmax", 1.0, 10, trials=200) <= 1e-5
    assert mora.check_weight_formula("logits", 1.0, 10, trials=50) == 0.0


@pytest.fixture(scope="module")
def trained():
    data = mora.generate_dataset("moons", samples=300, seed=3)
    ens = mora.train_ensemble(data["train"]["x"], data["train"]["y"], num_classes=2,
                              num_models=3, epochs=30, seed=3)
    return data, ens


def test_train_and_attack(trained):
    data, ens = trained
    assert ens.size == 3 and ens.input_dim == 2 and ens.num_classes == 2
    cfg = mora.AttackConfig()
    cfg.epsilon = 0.15
    cfg.per_beta_iterations = 20
    x, y = data["test"]["x"], data["test"]["y"]
    hits = 0
    for i in range(20):
        if ens.hard_decision(x[i], int(y[i])) != y[i]:
            continue
        r = mora.attack("mora", ens, x[i], int(y[i]), cfg, stream=i)
        if r["success"]:
            hits += 1
            assert mora.verify_success(ens, x[i], int(y[i]), cfg.epsilon, r["adversarial_example"])
            assert np.max(np.abs(r["adversarial_example"] - x[i])) <= cfg.epsilon + 1e-9
        assert len(r["trace"]) == r["iterations_used"] or r["success"]
    assert hits > 0


def test_oracle_and_json_round_trip(trained):
    data, ens = trained
    x, y = data["test"]["x"][0], int(data["test"]["y"][0])
    v = mora.brute_force_robust(ens, x, y, 0.0)
    assert v["vulnerable"] == (ens.hard_decision(x, y) != y)
    back = mora.Ensemble.from_json(ens.to_json())
    np.testing.assert_array_equal(back.forward(x), ens.forward(x))


def test_errors_map_to_python_exceptions(trained):
    _, ens = trained
    with pytest.raises(mora.ContractViolation):
        ens.forward(np.zeros(5))
    with pytest.raises(mora.FormatError):
        mora.Ensemble.from_json(json.dumps({"format": "other"}))
    with pytest.raises(mora.ParameterError):
        mora.softmax([1.0, 2.0], 0.0)


def test_run_command(tmp_path):
    cfg = {"schema_version": 1, "seed": 1, "dataset": {"generator": "blobs", "samples": 120}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    mora.run_command("gen-data", str(path), str(tmp_path / "out"))
    assert (tmp_path / "out" / "data.csv").exists()
    assert (tmp_path / "out" / "manifest-gen-data.json").exists()
