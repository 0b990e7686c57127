import math

import numpy as np
import pytest

import fvi


def random_blocks(rng, b, p):
    a = rng.normal(size=(p, b, b))
    m = a @ a.transpose(0, 2, 1) / b + 0.5 * np.eye(b)
    return np.ascontiguousarray(m.transpose(1, 2, 0))


def dense(blocks):
    b, _, p = blocks.shape
    out = np.zeros((b * p, b * p))
    for i in range(b):
        for j in range(b):
            out[i * p:(i + 1) * p, j * p:(j + 1) * p] = np.diag(blocks[i, j])
    return out


def test_structured_algebra_matches_numpy():
    rng = np.random.default_rng(0)
    k = random_blocks(rng, 4, 6)
    assert np.abs(dense(fvi.schur_inverse(k)) - np.linalg.inv(dense(k))).max() < 1e-8
    sign, ld = np.linalg.slogdet(dense(k))
    assert sign > 0
    assert fvi.logdet(k) == pytest.approx(ld, rel=1e-10)


def test_kl_matches_numpy():
    rng = np.random.default_rng(1)
    kq, kp = random_blocks(rng, 3, 4), random_blocks(rng, 3, 4)
    mq, mp = rng.normal(size=12), rng.normal(size=12)
    sq, sp = dense(kq), dense(kp)
    sp_inv = np.linalg.inv(sp)
    d = mp - mq
    ref = 0.5 * (np.trace(sp_inv @ sq) + d @ sp_inv @ d - 12
                 + np.linalg.slogdet(sp)[1] - np.linalg.slogdet(sq)[1])
    assert fvi.gaussian_kl(mq, kq, mp, kp) == pytest.approx(ref, abs=1e-8)


def test_kernel_symmetry_and_prior():
    rng = np.random.default_rng(2)
    xi, xj = rng.uniform(size=64), rng.uniform(size=64)
    assert "depth8" in fvi.builtin_arches()
    kij = fvi.equivalent_kernel("depth8", xi, xj)
    assert np.array_equal(kij, fvi.equivalent_kernel("depth8", xj, xi))
    mean, blocks = fvi.prior_blocks("depth8", [xi, xj], 0.1)
    assert blocks.shape == (2, 2, 64)
    assert np.allclose(blocks[0, 1], kij)
    assert np.allclose(blocks[0, 0], fvi.equivalent_kernel("depth8", xi, xi) + 0.1)
    assert np.all(mean == 0.5)
    with pytest.raises(ValueError):
        fvi.equivalent_kernel("depth8", xi[:10], xj)


def test_likelihood_helpers():
    assert fvi.berhu_loss(3.0, 1.0) == pytest.approx(5.0)
    assert fvi.berhu_log_z0(30.0) == pytest.approx(math.log(2.0), abs=1e-10)
    assert fvi.berhu_w(30.0) == pytest.approx(2.0, abs=1e-6)
    assert fvi.logpdf("laplace", 1.0, 0.0, 1.0) == pytest.approx(-1.0 - math.log(2.0))
    with pytest.raises(ValueError):
        fvi.logpdf("cauchy", 0.0, 0.0, 1.0)
    assert fvi.spearman(np.arange(5.0), np.arange(5.0) ** 3) == pytest.approx(1.0)


def test_regression_experiment(tmp_path):
    exp = fvi.Experiment({"task": "regression1d", "n_train": 32, "n_test": 8, "epochs": 2, "rank": 4})
    log = exp.train()
    assert len(log) == 2 * 8
    assert all(math.isfinite(row["objective"]) for row in log)
    x = exp.test_input(0)
    before = exp.forward_count
    pred = exp.predict(x)
    assert exp.forward_count == before + 1
    assert len(pred["mean"]) == 1
    assert pred["epistemic_var"][0] > 0 and pred["aleatoric_var"][0] > 0
    report = exp.evaluate()
    assert 0.0 <= report["calibration_score"] <= 1.0

    path = tmp_path / "model.txt"
    exp.save(str(path))
    other = fvi.Experiment({"task": "regression1d", "n_train": 32, "n_test": 8, "rank": 4, "seed": 9})
    other.load(str(path))
    assert other.predict(x)["mean"] == pred["mean"]


def test_segmentation_experiment():
    exp = fvi.Experiment({"task": "miniseg", "n_train": 8, "n_test": 4, "epochs": 1, "rank": 2,
                          "hidden": "conv:4,relu"})
    exp.train()
    pred = exp.predict(exp.test_input(0))
    probs = np.asarray(pred["probs"]).reshape(64, 3)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert set(pred["labels"]) <= {0, 1, 2}


def test_unknown_config_key():
    with pytest.raises(ValueError):
        fvi.Experiment({"epochz": 3})
