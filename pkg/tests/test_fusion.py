import math

import numpy as np
import pytest

from retrivox import fusion as F
from retrivox import tensor as T
from retrivox.grids import ChunkLayout, HyperParams, ScalarGrid3
from retrivox.retrievaldb import ApproxReconstruction

MINI = ChunkLayout(32, 8, 4)
TINY = ChunkLayout(8, 4, 2)


def tiny_config(mode="attention", k=2):
    return F.FusionConfig(layout=TINY, k=k, mode=mode, feat_channels=6,
                          base_channels=4, retr_base_channels=3, attn_dim=4,
                          C_sharpness=10.0)


def unit(v):
    return v / np.linalg.norm(v)


class TestAttentionPrimitives:
    def test_same_vector_score_one(self):
        rng = np.random.default_rng(0)
        h = unit(rng.normal(size=8))
        s = F.attention_scores(h, np.stack([h, -h]))
        assert abs(s[0] - 1.0) < 1e-12
        assert abs(s[1] + 1.0) < 1e-12

    def test_random_equals_explicit_dot(self):
        rng = np.random.default_rng(1)
        h = unit(rng.normal(size=32))
        hr = np.stack([unit(rng.normal(size=32)) for _ in range(4)])
        s = F.attention_scores(h, hr)
        for i in range(4):
            assert abs(s[i] - float(hr[i] @ h)) < 1e-6

    def test_weights_equal_scores(self):
        w = F.attention_weights(np.zeros(4), sharpness=10.0)
        np.testing.assert_allclose(w, 0.25, atol=1e-12)

    def test_weights_sharp_case(self):
        w = F.attention_weights(np.array([1.0, 0, 0, 0]), sharpness=10.0)
        want = math.exp(10) / (math.exp(10) + 3)
        assert abs(w[0] - want) < 1e-9

    def test_weights_shift_invariant(self):
        rng = np.random.default_rng(2)
        s = rng.normal(size=5)
        w1 = F.attention_weights(s, 7.0)
        w2 = F.attention_weights(s + 3.7, 7.0)
        np.testing.assert_allclose(w1, w2, atol=1e-7)

    def test_blend_saturations(self):
        rng = np.random.default_rng(3)
        p_in = rng.normal(size=6)
        p_retr = rng.normal(size=(3, 6))
        s = np.array([1.0, 0.2, -0.4])
        # c = 50: beta ~ 1, output ~ weighted retrieval sum
        out_hi = F.blend(p_in, p_retr, s, sharpness=10.0, c=50.0, d=0.0)
        w = F.attention_weights(s, 10.0)
        np.testing.assert_allclose(out_hi, (w[:, None] * p_retr).sum(0), atol=1e-6)
        # c = 0, d = -50: beta ~ 0, output ~ input
        out_lo = F.blend(p_in, p_retr, s, sharpness=10.0, c=0.0, d=-50.0)
        np.testing.assert_allclose(out_lo, p_in, atol=1e-6)

    def test_blend_permutation_invariant(self):
        rng = np.random.default_rng(4)
        p_in = rng.normal(size=6)
        p_retr = rng.normal(size=(4, 6))
        s = rng.normal(size=4)
        base = F.blend(p_in, p_retr, s, 10.0, 1.0, 0.0)
        perm = rng.permutation(4)
        out = F.blend(p_in, p_retr[perm], s[perm], 10.0, 1.0, 0.0)
        np.testing.assert_allclose(out, base, atol=1e-6)

    def test_empty_retrievals_raise(self):
        with pytest.raises(ValueError):
            F.attention_scores(np.ones(4), np.zeros((0, 4)))

    def test_sharpness_monotone_max_weight(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            s = rng.normal(size=4)
            prev = 0.0
            for C in (1.0, 10.0, 100.0):
                mx = F.attention_weights(s, C).max()
                assert mx >= prev - 1e-12
                prev = mx


class TestRefineForward:
    def make_batch(self, cfg, nb=2, seed=0):
        rng = np.random.default_rng(seed)
        s = cfg.layout.scene_dim
        inputs = rng.random((nb, s, s, s)).astype(np.float32)
        gts = rng.random((nb, s, s, s)).astype(np.float32)
        approx = rng.random((nb, cfg.k, s, s, s)).astype(np.float32)
        return inputs, gts, approx

    def test_output_shape_and_range(self):
        cfg = tiny_config()
        model = F.FusionModel(cfg, seed=1)
        inputs, _, approx = self.make_batch(cfg)
        with T.no_grad():
            out, trace, _ = model.refine_batch(inputs, approx)
        assert out.shape == (2, 1, 8, 8, 8)
        assert (out.data > 0).all() and (out.data < 1).all()

    def test_trace_invariants(self):
        cfg = tiny_config(k=3)
        model = F.FusionModel(cfg, seed=2)
        inputs, _, approx = self.make_batch(cfg)
        with T.no_grad():
            _, trace, _ = model.refine_batch(inputs, approx)
        np.testing.assert_allclose(trace.weights.sum(axis=1), 1.0, atol=1e-6)
        assert (trace.beta > 0).all() and (trace.beta < 1).all()
        assert (trace.weights >= 0).all()

    def test_retrieval_permutation_leaves_output(self):
        cfg = tiny_config(k=3)
        model = F.FusionModel(cfg, seed=3)
        inputs, _, approx = self.make_batch(cfg)
        with T.no_grad():
            base, _, _ = model.refine_batch(inputs, approx)
            perm, _, _ = model.refine_batch(inputs, approx[:, [2, 0, 1]])
        np.testing.assert_allclose(perm.data, base.data, atol=1e-5)

    def test_k_mismatch_raises(self):
        cfg = tiny_config(k=2)
        model = F.FusionModel(cfg, seed=0)
        inputs, _, approx = self.make_batch(cfg)
        with pytest.raises(ValueError):
            model.refine_batch(inputs, approx[:, :1])

    def test_no_retrieval_ignores_approx(self):
        cfg = tiny_config(mode="no_retrieval")
        model = F.FusionModel(cfg, seed=4)
        inputs, _, _ = self.make_batch(cfg)
        with T.no_grad():
            out, trace, _ = model.refine_batch(inputs, None)
        assert trace is None
        assert out.shape == (2, 1, 8, 8, 8)

    def test_refine_single_window_grid(self):
        cfg = tiny_config(k=2)
        model = F.FusionModel(cfg, seed=5)
        rng = np.random.default_rng(6)
        win = ScalarGrid3(rng.random((8, 8, 8)).astype(np.float32), 0.5, (1, 2, 3))
        approx = [ApproxReconstruction(r + 1, win.with_values(
            rng.random((8, 8, 8)).astype(np.float32))) for r in range(2)]
        out, trace = model.refine(win, approx)
        assert out.dims == (8, 8, 8)
        assert out.voxel_size == 0.5
        np.testing.assert_allclose(trace.weights.sum(axis=1), 1.0, atol=1e-6)


class TestRefinementLoss:
    def test_zero_lambdas_pure_recon(self):
        cfg = tiny_config()
        model = F.FusionModel(cfg, seed=0)
        hp = HyperParams(lambda_retr=0.0, lambda_attn=0.0)
        rng = np.random.default_rng(0)
        gts = np.random.default_rng(1).random((1, 8, 8, 8)).astype(np.float32)
        inputs = np.random.default_rng(2).random((1, 8, 8, 8)).astype(np.float32)
        approx = np.random.default_rng(3).random((1, 2, 8, 8, 8)).astype(np.float32)
        pred, _, aux = model.refine_batch(inputs, approx)
        loss, comps = F.refinement_loss(model, pred, gts, aux, hp, rng)
        assert comps["total"] == comps["recon"]
        T.clear_graph(loss)

    def test_pred_equals_gt_zero_recon(self):
        cfg = tiny_config()
        model = F.FusionModel(cfg, seed=0)
        hp = HyperParams()
        rng = np.random.default_rng(0)
        gts = np.random.default_rng(1).random((1, 8, 8, 8)).astype(np.float32)
        inputs = np.random.default_rng(2).random((1, 8, 8, 8)).astype(np.float32)
        approx = np.random.default_rng(3).random((1, 2, 8, 8, 8)).astype(np.float32)
        _, _, aux = model.refine_batch(inputs, approx)
        pred = T.Tensor(gts.reshape(1, 1, 8, 8, 8))
        loss, comps = F.refinement_loss(model, pred, gts, aux, hp, rng)
        assert comps["recon"] == 0.0
        T.clear_graph(loss)

    def test_full_loss_matches_finite_differences(self):
        # f64 model, every loss path active, sampled parameter coordinates
        cfg = tiny_config(k=2)
        model = F.FusionModel(cfg, seed=7, dtype=np.float64)
        hp = HyperParams(lambda_retr=0.5, lambda_attn=0.05, tau_attention=0.05)
        rng_data = np.random.default_rng(8)
        inputs = rng_data.random((1, 8, 8, 8))
        gts = rng_data.random((1, 8, 8, 8))
        approx = rng_data.random((1, 2, 8, 8, 8))

        def loss_value():
            pred, _, aux = model.refine_batch(inputs, approx)
            loss, _ = F.refinement_loss(model, pred, gts, aux, hp,
                                        np.random.default_rng(99), n_attn_patches=8)
            return loss

        loss = loss_value()
        T.backward(loss)
        grads = {n: p.grad.copy() for n, p in model.store.params.items()}
        model.store.zero_grad()

        h = 1e-5
        coord_rng = np.random.default_rng(11)
        worst = 0.0
        for name, p in model.store.params.items():
            flat = p.data.reshape(-1)
            n_check = min(3, flat.size)
            for c in coord_rng.choice(flat.size, size=n_check, replace=False):
                orig = flat[c]
                flat[c] = orig + h
                with T.no_grad():
                    fp = loss_value().item()
                flat[c] = orig - h
                with T.no_grad():
                    fm = loss_value().item()
                flat[c] = orig
                numeric = (fp - fm) / (2 * h)
                analytic = grads[name].reshape(-1)[c]
                worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
        assert worst < 1e-4, worst


class TestTraining:
    def test_loss_decreases_tiny_task(self):
        cfg = tiny_config(k=2)
        hp = HyperParams(batch_refine=4)
        rng = np.random.default_rng(0)
        records = []
        for _ in range(6):
            gt = (rng.random((8, 8, 8)) > 0.7).astype(np.float32)
            records.append(F.RefineRecord(
                input_up=gt.copy(), gt=gt,
                approx=np.stack([gt, rng.random((8, 8, 8)).astype(np.float32)])))
        model, log = F.train_refinement(records, cfg, hp, seed=1, iters=60, lr=1e-3,
                                        log_every=10)
        assert log[-1][1] < log[0][1]

    def test_missing_cache_raises(self):
        cfg = tiny_config(k=2)
        records = [F.RefineRecord(input_up=np.zeros((8, 8, 8), np.float32),
                                  gt=np.zeros((8, 8, 8), np.float32), approx=None)]
        with pytest.raises(ValueError):
            F.train_refinement(records, cfg, HyperParams(), iters=1)

    def test_no_retrieval_trains_without_cache(self):
        cfg = tiny_config(mode="no_retrieval")
        rng = np.random.default_rng(2)
        records = [F.RefineRecord(input_up=rng.random((8, 8, 8)).astype(np.float32),
                                  gt=rng.random((8, 8, 8)).astype(np.float32))
                   for _ in range(3)]
        model, log = F.train_refinement(records, cfg, HyperParams(batch_refine=2),
                                        seed=0, iters=5, lr=1e-3)
        assert len(log) >= 1

    def test_deterministic_training(self):
        cfg = tiny_config(k=2)
        hp = HyperParams(batch_refine=2)
        rng = np.random.default_rng(3)
        records = [F.RefineRecord(input_up=rng.random((8, 8, 8)).astype(np.float32),
                                  gt=rng.random((8, 8, 8)).astype(np.float32),
                                  approx=rng.random((2, 8, 8, 8)).astype(np.float32))
                   for _ in range(4)]
        m1, _ = F.train_refinement(records, cfg, hp, seed=5, iters=8, lr=1e-3)
        m2, _ = F.train_refinement(records, cfg, hp, seed=5, iters=8, lr=1e-3)
        for name in m1.store.params:
            np.testing.assert_array_equal(m1.store.params[name].data,
                                          m2.store.params[name].data)

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = tiny_config(k=2)
        model = F.FusionModel(cfg, seed=9)
        path = tmp_path / "fusion.rfc1"
        model.save(path)
        back = F.FusionModel.load(path, cfg)
        rng = np.random.default_rng(1)
        inputs = rng.random((1, 8, 8, 8)).astype(np.float32)
        approx = rng.random((1, 2, 8, 8, 8)).astype(np.float32)
        with T.no_grad():
            a, _, _ = model.refine_batch(inputs, approx)
            b, _, _ = back.refine_batch(inputs, approx)
        np.testing.assert_array_equal(a.data, b.data)
