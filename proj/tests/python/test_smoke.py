import json
import os
import subprocess

import numpy as np
import pytest

import flatmin


def quad():
    return flatmin.objective({"kind": "quadratic", "diag": [2, 8]})


def test_loss_and_grad():
    q = quad()
    assert q.dim == 2
    assert q.loss(np.array([1.0, 1.0])) == pytest.approx(5.0)
    np.testing.assert_array_equal(q.grad(np.array([1.0, 1.0])), [2.0, 8.0])


def test_fad_step_matches_hand_values():
    cfg = flatmin.optimizer(method="fad", eta0=0.1, rho0=0.1)
    state = flatmin.OptimizerState(2, 0)
    theta, trace = flatmin.step(quad(), np.array([1.0, 1.0]), state, cfg)
    np.testing.assert_allclose(trace["g1"], [2.048507, 8.776114], atol=1e-6)
    np.testing.assert_allclose(trace["h0"], [0.048507, 0.776114], atol=1e-6)
    assert trace["grad_evals"] == 4
    assert state.t == 1


def test_fad_beta_zero_is_sgd():
    q = quad()
    fad = flatmin.train(q, np.array([1.0, -1.0]), flatmin.optimizer(method="fad", beta=0.0), iterations=20)
    sgd = flatmin.train(q, np.array([1.0, -1.0]), flatmin.optimizer(method="sgd"), iterations=20)
    np.testing.assert_array_equal(fad["theta"], sgd["theta"])


def test_flatness_report_at_origin():
    rep = flatmin.flatness(quad(), np.zeros(2), rho=0.1, n_probes=10)
    assert rep["r0"] == pytest.approx(0.04, abs=1e-6)
    assert rep["r1"] == pytest.approx(0.08, abs=1e-5)
    assert rep["lambda_max"] == pytest.approx(8.0, abs=1e-6)
    assert rep["trace"] == 10.0


def test_spectrum_helpers():
    values, converged = flatmin.power_iteration(quad(), np.zeros(2), k=2)
    assert converged
    np.testing.assert_allclose(values, [8.0, 2.0], atol=1e-5)
    mean, se = flatmin.hutchinson_trace(quad(), np.zeros(2), n_probes=20)
    assert (mean, se) == (10.0, 0.0)
    np.testing.assert_allclose(flatmin.hvp_fd(quad(), np.ones(2), np.array([0.0, 3.0])), [0, 24], rtol=1e-8, atol=1e-8)


def test_mlp_on_generated_domains():
    domains = flatmin.domains({"per_domain_n": 60}, seed=1)
    assert len(domains) == 3
    mlp = flatmin.MlpObjective([2, 8, 3], domains[0])
    theta0 = mlp.init_params(0)
    out = flatmin.train(mlp, theta0, flatmin.optimizer(method="adam", eta0=0.05), iterations=100, batch_size=16)
    assert mlp.loss(out["theta"]) < mlp.loss(theta0)
    assert 0.0 <= mlp.accuracy(out["theta"], domains[2]) <= 1.0
    assert out["log_csv"].count("\n") == 101


def test_errors_map_to_python_exceptions():
    q = quad()
    with pytest.raises(flatmin.DimensionError):
        q.loss(np.zeros(3))
    with pytest.raises(flatmin.ConfigError):
        flatmin.optimizer(method="lion")
    with pytest.raises(flatmin.DegenerateDirectionError):
        flatmin.hvp_fd(q, np.ones(2), np.zeros(2))
    with pytest.raises(flatmin.NumericalError):
        flatmin.train(q, np.ones(2), flatmin.optimizer(method="sgd", eta0=10.0), iterations=2000)
    assert issubclass(flatmin.ConfigError, flatmin.Error)


def test_cli_entry_point(tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({
        "objective": {"kind": "quadratic", "diag": [2, 8]},
        "theta0": [1, 1],
        "optimizer": {"method": "sam"},
        "iterations": 10,
        "flatness": {"n_probes": 4},
    }))
    code, _, err = flatmin.cli("train", "--config", cfg, "--out-dir", tmp_path / "out")
    assert code == 0, err
    assert (tmp_path / "out" / "run.csv").read_text().count("\n") == 11
    assert flatmin.cli("train")[0] == 2


@pytest.mark.skipif("FLATMIN_BIN" not in os.environ, reason="command-line tool not built")
def test_executable_exit_codes(tmp_path):
    exe = os.environ["FLATMIN_BIN"]
    assert subprocess.run([exe, "train"], capture_output=True).returncode == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert subprocess.run([exe, "flatness", "--config", str(bad)], capture_output=True).returncode == 2
    boom = tmp_path / "boom.json"
    boom.write_text(json.dumps({
        "objective": {"kind": "quadratic", "diag": [2, 8]},
        "theta0": [1, 1],
        "optimizer": {"method": "sgd", "eta0": 10.0},
        "iterations": 2000,
    }))
    out = tmp_path / "boom"
    assert subprocess.run([exe, "train", "--config", str(boom), "--out-dir", str(out)],
                          capture_output=True).returncode == 3
    assert (out / "run.csv").exists()
