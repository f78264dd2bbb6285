import math

import numpy as np
import pytest

from retrivox import embed as E
from retrivox import tensor as T
from retrivox.grids import HyperParams, ScalarGrid3


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestIouTemperature:
    def test_full_iou_direct_eval(self):
        vals = np.zeros((4, 4, 4), dtype=np.float32)
        g = ScalarGrid3(vals, 1.0)
        tau = 0.2
        got = E.iou_temperature(tau, g, g.with_values(vals), a=10.0, b=-5.0)
        want = tau + (1 - tau) * sigmoid(10.0 * 1.0 - 5.0)
        assert abs(got - want) < 1e-12
        assert abs(want - (tau + 0.9933071490757153 * (1 - tau))) < 1e-10

    def test_tau_one_stays_one(self):
        g = ScalarGrid3.full((4, 4, 4), 0.0)
        assert E.iou_temperature(1.0, g, g, 10.0, -5.0) == 1.0

    def test_half_iou_midpoint(self):
        # iou 0.5 with a=10, b=-5 puts the sigmoid at exactly 0.5
        tau = 0.3
        got = E.temperature_from_iou(tau, 0.5, 10.0, -5.0)
        assert abs(got - (tau + 0.5 * (1 - tau))) < 1e-12

    def test_bound_strict(self):
        rng = np.random.default_rng(0)
        for tau in (0.05, 0.2, 0.9):
            ious = rng.random(1000)
            tp = E.temperature_from_iou(tau, ious, 10.0, -5.0)
            assert np.all(tp > tau) and np.all(tp < 1.0)
        # monotone in IoU
        ious = np.linspace(0, 1, 100)
        tp = E.temperature_from_iou(0.2, ious, 10.0, -5.0)
        assert np.all(np.diff(tp) > 0)


class TestNTXent:
    def hand_loss(self, x, y, iou, tau, a, b):
        """Independent scalar evaluation of the loss formula."""
        n = len(x)
        total = 0.0
        for i in range(n):
            pos = float(x[i] @ y[i]) / tau
            denom = 0.0
            for k in range(n):
                if k == i:
                    continue
                tp = tau + (1 - tau) * sigmoid(a * iou[i, k] + b)
                denom += math.exp(float(x[i] @ y[k]) / tp)
            total += -pos + math.log(denom)
        return total / n

    def test_two_pair_hand_evaluation(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        y = x.copy()  # matched dot 1, cross dot -1
        iou = np.zeros((2, 2))
        got = E.ntxent_loss(T.Tensor(x), T.Tensor(y), iou_matrix=iou,
                            tau=0.2, a=10.0, b=-5.0).item()
        want = self.hand_loss(x, y, iou, 0.2, 10.0, -5.0)
        assert abs(got - want) < 1e-9

    def test_random_batch_matches_hand_loss(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(5, 8))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        y = rng.normal(size=(5, 8))
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        iou = rng.random((5, 5))
        got = E.ntxent_loss(T.Tensor(x), T.Tensor(y), iou_matrix=iou,
                            tau=0.2, a=10.0, b=-5.0).item()
        want = self.hand_loss(x, y, iou, 0.2, 10.0, -5.0)
        assert abs(got - want) < 1e-9
        assert math.isfinite(got)

    def test_permutation_leaves_mean_unchanged(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 8))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        y = rng.normal(size=(6, 8))
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        chunks = rng.random((6, 27)).astype(np.float32)
        base = E.ntxent_loss(T.Tensor(x), T.Tensor(y), chunks).item()
        perm = rng.permutation(6)
        shuf = E.ntxent_loss(T.Tensor(x[perm]), T.Tensor(y[perm]), chunks[perm]).item()
        assert abs(base - shuf) < 1e-6

    def test_batch_of_one_raises(self):
        x = np.ones((1, 4))
        with pytest.raises(ValueError):
            E.ntxent_loss(T.Tensor(x), T.Tensor(x), iou_matrix=np.zeros((1, 1)))

    def test_duplicate_negative_damps_gradient(self):
        # raising IoU(y_0, y_1) to 1 must shrink the repulsion rate of the
        # 0->1 negative: d loss / d eps with x_0 nudged toward y_1
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 6))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        y = rng.normal(size=(3, 6))
        y /= np.linalg.norm(y, axis=1, keepdims=True)

        def rate(iou01):
            iou = np.zeros((3, 3))
            iou[0, 1] = iou[1, 0] = iou01
            h = 1e-5

            def at(eps):
                xe = x.copy()
                v = xe[0] + eps * y[1]
                xe[0] = v / np.linalg.norm(v)
                return E.ntxent_loss(T.Tensor(xe), T.Tensor(y), iou_matrix=iou,
                                     tau=0.2, a=10.0, b=-5.0).item()

            return (at(h) - at(-h)) / (2 * h)

        assert rate(1.0) < rate(0.0)

    def test_gradcheck_composed(self):
        rng = np.random.default_rng(12)
        iou = rng.random((4, 4))

        def fn(x_raw, y_raw):
            x = T.l2_normalize(x_raw, axis=1)
            y = T.l2_normalize(y_raw, axis=1)
            return E.ntxent_loss(x, y, iou_matrix=iou, tau=0.2, a=10.0, b=-5.0)

        err = T.gradcheck(fn, [rng.normal(size=(4, 6)), rng.normal(size=(4, 6))], seed=2)
        assert err < 1e-4


def make_toy_prototypes(rng, n_proto=8, chunk_dim=8, in_dim=4):
    """Distinct blocky target chunks plus min-pooled coarse inputs."""
    targets = []
    for p in range(n_proto):
        v = np.ones((chunk_dim,) * 3, dtype=np.float32)
        i, j, k = p % 2, (p // 2) % 2, (p // 4) % 2
        h = chunk_dim // 2
        v[i * h:(i + 1) * h, j * h:(j + 1) * h, k * h:(k + 1) * h] = 0.05
        targets.append(v)
    f = chunk_dim // in_dim
    inputs = [t.reshape(in_dim, f, in_dim, f, in_dim, f).min(axis=(1, 3, 5))
              for t in targets]
    return np.stack(inputs), np.stack(targets)


class TestTrainRetrieval:
    HP = HyperParams(batch_retrieval=8)

    def test_zero_iters_params_untouched(self):
        rng = np.random.default_rng(0)
        x, y = make_toy_prototypes(rng)
        pair, log = E.train_retrieval(x, y, self.HP, seed=3, iters=0)
        fresh = E.ChunkEncoderPair.create(4, 8, self.HP, seed=3)
        for name, p in pair.store.params.items():
            np.testing.assert_array_equal(p.data, fresh.store.params[name].data)
        assert log == []

    def test_empty_dataset_raises(self):
        with pytest.raises(ValueError):
            E.train_retrieval(np.zeros((0, 64)), np.zeros((0, 512)), self.HP)

    def test_toy_prototypes_recall_at_1(self):
        rng = np.random.default_rng(0)
        x, y = make_toy_prototypes(rng)
        pair, log = E.train_retrieval(x, y, self.HP, seed=1, iters=250, lr=1e-3)
        ex = pair.encode_inputs(x)
        ey = pair.encode_targets(y)
        sims = ex @ ey.T
        assert (sims.argmax(axis=1) == np.arange(8)).all()
        # training made progress
        assert log[-1][1] < log[0][1]

    def test_unit_norm_invariant(self):
        rng = np.random.default_rng(0)
        x, y = make_toy_prototypes(rng)
        pair, _ = E.train_retrieval(x, y, self.HP, seed=1, iters=20, lr=1e-3)
        for e in (pair.encode_inputs(x), pair.encode_targets(y)):
            np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)

    def test_deterministic_and_checkpoint(self, tmp_path):
        rng = np.random.default_rng(0)
        x, y = make_toy_prototypes(rng)
        p1, _ = E.train_retrieval(x, y, self.HP, seed=9, iters=15, lr=1e-3)
        p2, _ = E.train_retrieval(x, y, self.HP, seed=9, iters=15, lr=1e-3)
        for name in p1.store.params:
            np.testing.assert_array_equal(p1.store.params[name].data,
                                          p2.store.params[name].data)
        path = tmp_path / "enc.rfc1"
        p1.save(path)
        p3 = E.ChunkEncoderPair.load(path, 4, 8, self.HP)
        np.testing.assert_array_equal(
            p3.encode_targets(y), p1.encode_targets(y))
