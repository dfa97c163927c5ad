"""Network forward/backward correctness, checkpoints, and training."""

import math

import numpy as np
import pytest

from nested_tom.core import make_rng
from nested_tom.errors import CorruptFile, DimMismatch, NonFiniteLoss, VersionMismatch
from nested_tom.mlp import (
    MlpParams,
    cross_entropy_and_grads,
    forward,
    init_params,
    load_model,
    save_model,
    softmax,
)
from nested_tom.proposals import propose
from nested_tom.train import TrainConfig, top1_accuracy, train_recognition


def numeric_gradient(params, x, targets, h=1e-5):
    """Central-difference gradients, the oracle for backprop."""
    grads = []
    for k, (w, b) in enumerate(params.layers):
        gw = np.zeros_like(w)
        gb = np.zeros_like(b)
        for arr, out in ((w, gw), (b, gb)):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                up, _ = cross_entropy_and_grads(params, x, targets)
                arr[idx] = orig - h
                down, _ = cross_entropy_and_grads(params, x, targets)
                arr[idx] = orig
                out[idx] = (up - down) / (2 * h)
                it.iternext()
        grads.append((gw, gb))
    return grads


class TestForward:
    def test_zero_net_zero_logits(self):
        params = MlpParams([(np.zeros((3, 4)), np.zeros(3))])
        assert np.array_equal(forward(params, np.ones(4)), np.zeros(3))

    def test_identity_layer(self):
        params = MlpParams([(np.eye(4), np.zeros(4))])
        x = np.array([0.5, -1.0, 2.0, 0.0])
        assert np.array_equal(forward(params, x), x)

    def test_hand_arithmetic(self):
        params = MlpParams([(np.array([[1.0, 1.0]]), np.zeros(1))])
        assert forward(params, np.array([2.0, 3.0]))[0] == 5.0

    def test_dim_mismatch(self):
        params = MlpParams([(np.zeros((3, 4)), np.zeros(3))])
        with pytest.raises(DimMismatch):
            forward(params, np.ones(5))

    def test_chained_dims_validated(self):
        with pytest.raises(DimMismatch):
            MlpParams([(np.zeros((3, 4)), np.zeros(3)), (np.zeros((2, 5)), np.zeros(2))])


class TestGradients:
    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_central_differences(self, activation):
        rng = make_rng("gradcheck", activation)
        worst = 0.0
        for trial in range(50):
            dims = [int(rng.integers(2, 5)) for _ in range(3)]
            params = init_params(dims, rng, activation, init_scale=0.8)
            x = rng.standard_normal((3, dims[0]))
            targets = rng.integers(0, dims[-1], size=3)
            _, analytic = cross_entropy_and_grads(params, x, targets)
            numeric = numeric_gradient(params, x, targets)
            for (aw, ab), (nw, nb) in zip(analytic, numeric):
                for a, n in ((aw, nw), (ab, nb)):
                    denom = np.maximum(np.abs(a) + np.abs(n), 1e-8)
                    worst = max(worst, float((np.abs(a - n) / denom).max()))
        assert worst < 1e-4

    def test_uniform_loss_with_zero_output_layer(self):
        rng = make_rng("uniform-loss")
        hidden = rng.standard_normal((16, 10)) * 0.3
        params = MlpParams(
            [(hidden, np.zeros(16)), (np.zeros((45, 16)), np.zeros(45))]
        )
        x = rng.standard_normal((8, 10))
        targets = rng.integers(0, 45, size=8)
        loss, _ = cross_entropy_and_grads(params, x, targets)
        assert abs(loss - math.log(45)) < 1e-9
        assert abs(loss - 3.807) < 1e-3


class TestCheckpointRoundtrip:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = make_rng("ckpt")
        params = init_params([7, 5, 3], rng, "tanh", init_scale=0.5)
        path = tmp_path / "m.json"
        save_model(params, path)
        loaded = load_model(path)
        x = rng.standard_normal(7)
        assert np.array_equal(forward(params, x), forward(loaded, x))
        for (w1, b1), (w2, b2) in zip(params.layers, loaded.layers):
            assert np.array_equal(w1, w2) and np.array_equal(b1, b2)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.json"
        save_model(init_params([2, 2], make_rng("v")), path)
        payload = path.read_text().replace('"format_version": 1', '"format_version": 99')
        path.write_text(payload)
        with pytest.raises(VersionMismatch):
            load_model(path)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{not json")
        with pytest.raises(CorruptFile):
            load_model(path)

    def test_wrong_dims_detected(self, tmp_path):
        path = tmp_path / "m.json"
        save_model(init_params([3, 2], make_rng("d")), path)
        payload = path.read_text().replace('"dims": [3, 2]', '"dims": [4, 2]')
        path.write_text(payload)
        with pytest.raises((DimMismatch, CorruptFile)):
            load_model(path)


class TestTraining:
    def test_memorizes_single_example(self):
        x = np.tile(np.linspace(-1, 1, 6), (4, 1))
        y = np.array([2, 2, 2, 2])
        cfg = TrainConfig(hidden_sizes=(16,), epochs=300, batch_size=4, seed=1,
                          heldout_fraction=0.0)
        result = train_recognition(x, y, 4, cfg)
        assert result.curve[-1]["loss"] < 0.1

    def test_deterministic(self):
        rng = make_rng("train-det")
        x = rng.standard_normal((60, 8))
        y = rng.integers(0, 3, size=60)
        cfg = TrainConfig(hidden_sizes=(12,), epochs=5, seed=7)
        a = train_recognition(x, y, 3, cfg)
        b = train_recognition(x, y, 3, cfg)
        assert np.array_equal(a.params.flat(), b.params.flat())

    def test_loss_decreases_from_uniform(self):
        rng = make_rng("train-dec")
        x = rng.standard_normal((200, 6))
        y = (x[:, 0] > 0).astype(int)
        cfg = TrainConfig(hidden_sizes=(16,), epochs=10, seed=3)
        result = train_recognition(x, y, 2, cfg)
        assert result.curve[-1]["loss"] < math.log(2)

    def test_sgd_momentum_variant(self):
        rng = make_rng("train-sgd")
        x = rng.standard_normal((120, 5))
        y = (x[:, 1] > 0).astype(int)
        cfg = TrainConfig(hidden_sizes=(8,), epochs=15, seed=3,
                          optimizer="sgd-momentum", learning_rate=0.05)
        result = train_recognition(x, y, 2, cfg)
        assert result.curve[-1]["loss"] < result.curve[0]["loss"]

    def test_non_finite_loss_raises(self):
        rng = make_rng("train-blowup")
        x = rng.standard_normal((40, 4)) * 100
        y = rng.integers(0, 2, size=40)
        cfg = TrainConfig(hidden_sizes=(8,), epochs=50, seed=0,
                          learning_rate=1e9, optimizer="sgd-momentum")
        with pytest.raises(NonFiniteLoss):
            train_recognition(x, y, 2, cfg)

    def test_curve_csv(self, tmp_path):
        rng = make_rng("curve")
        x = rng.standard_normal((50, 4))
        y = rng.integers(0, 2, size=50)
        result = train_recognition(x, y, 2, TrainConfig(hidden_sizes=(4,), epochs=3, seed=0))
        path = tmp_path / "curve.csv"
        result.write_curve(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,loss,heldout_acc"
        assert len(lines) == 4

    def test_learned_beats_uniform_logprob(self):
        # mean log probability of the true class above the uniform baseline
        rng = make_rng("dominate")
        n_class = 6
        y = rng.integers(0, n_class, size=400)
        feats = np.eye(n_class)[y] + 0.3 * rng.standard_normal((400, n_class))
        prev = np.full((400, n_class), 1.0 / n_class)
        x = np.hstack([feats, prev])
        cfg = TrainConfig(hidden_sizes=(16,), epochs=20, seed=2)
        result = train_recognition(x, y, n_class, cfg)
        logps = []
        for k in range(80):
            probs = propose(result.params, feats[k], prev[k])
            logps.append(math.log(probs[y[k]]))
        assert np.mean(logps) > math.log(1.0 / n_class)


class TestPropose:
    def _params(self, n_in, n_out, zero=True):
        w = np.zeros((n_out, n_in)) if zero else make_rng("p").standard_normal((n_out, n_in))
        return MlpParams([(w, np.zeros(n_out))])

    def test_zero_net_uniform(self):
        params = self._params(8 + 4, 4)
        probs = propose(params, np.ones(8), np.full(4, 0.25))
        assert np.allclose(probs, 0.25)

    def test_sums_to_one(self):
        params = self._params(6 + 3, 3, zero=False)
        rng = make_rng("ps")
        for _ in range(20):
            probs = propose(params, rng.standard_normal(6), rng.dirichlet(np.ones(3)))
            assert abs(probs.sum() - 1.0) < 1e-9

    def test_floor_coverage(self):
        params = MlpParams([(np.zeros((3, 5)), np.array([50.0, 0.0, -50.0]))])
        probs = propose(params, np.ones(2), np.full(3, 1 / 3), floor=1e-4)
        assert probs.min() >= 1e-4 / 2

    def test_prev_posterior_dim_checked(self):
        params = self._params(6 + 3, 3)
        with pytest.raises(DimMismatch):
            propose(params, np.ones(6), np.full(4, 0.25))
