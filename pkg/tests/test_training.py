import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_samples
from oracles import central_difference_grads, multitask_loss_ld
from sceneiqa.network import NetworkConfig, backward, forward_arrays, init_weights, load_checkpoint
from sceneiqa.training import (Adam, EmptyBatchError, LabelError, LossConfig, TrainConfig,
                               TrainingDivergedError, combined_loss, loss_and_grads, make_labels,
                               quality_loss, scene_loss, split_by_scene, sub_seed, train)

finite = st.floats(-1e6, 1e6, allow_nan=False)
TINY = NetworkConfig().reduced(8, input_size=16)


class TestLosses:
    def test_quality_loss(self):
        assert quality_loss([0.3, 0.7], [0.3, 0.7]) == 0.0
        assert quality_loss([0, 1], [1, 0]) == 1.0
        with pytest.raises(EmptyBatchError):
            quality_loss([], [])

    def test_scene_loss_uniform(self):
        for lab in range(4):
            assert abs(scene_loss(np.zeros((1, 4)), [lab]) - math.log(4)) <= 1e-9

    def test_scene_loss_dominant(self):
        z = np.zeros((3, 4))
        z[np.arange(3), [0, 2, 3]] = 30.0
        assert scene_loss(z, [0, 2, 3]) < 1e-9

    @given(st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.floats(-1e4, 1e4),
           st.integers(0, 3))
    def test_scene_loss_shift(self, logits, c, lab):
        z = np.array([logits])
        assert abs(scene_loss(z + c, [lab]) - scene_loss(z, [lab])) <= 1e-9

    def test_scene_loss_bad_label(self):
        with pytest.raises(LabelError):
            scene_loss(np.zeros((2, 4)), [0, 4])
        with pytest.raises(LabelError):
            scene_loss(np.zeros((1, 4)), [-1])

    def test_combined_examples(self):
        assert combined_loss(0.5, 1.0, LossConfig(1.0)) == 1.5
        assert combined_loss(1.0, 0.25, LossConfig(2.0)) == 1.5

    @given(finite, finite, st.floats(0, 10))
    def test_combined_identity(self, lq, ls, alpha):
        assert combined_loss(lq, ls, LossConfig(0.0)) == lq
        # exact as a floating-point expression; re-subtracting lq would reintroduce rounding
        assert combined_loss(lq, ls, LossConfig(alpha)) == lq + alpha * ls


class TestLabels:
    def test_endpoints(self):
        assert make_labels(1) == 1.0 and make_labels(15) == 0.0 and make_labels(8) == 0.5

    def test_monotone_and_order(self):
        labels = [make_labels(r) for r in range(1, 16)]
        assert all(a > b for a, b in zip(labels, labels[1:]))
        ranks = np.random.default_rng(0).permutation(15) + 1
        assert np.array_equal(np.argsort(ranks), np.argsort([-make_labels(r) for r in ranks]))

    @pytest.mark.parametrize("bad", [0, 16, 2.5, -3])
    def test_out_of_range(self, bad):
        with pytest.raises(LabelError):
            make_labels(bad)


class TestSplit:
    def test_sizes(self):
        tr, va = split_by_scene(range(100), 0.8, seed=1)
        assert (len(tr), len(va)) == (80, 20)
        tr, va = split_by_scene(range(5), 0.8, seed=1)
        assert (len(tr), len(va)) == (4, 1)

    @given(st.integers(2, 200), st.integers(0, 2**31))
    def test_partition(self, n, seed):
        tr, va = split_by_scene(list(range(n)), 0.8, seed)
        assert sorted(tr + va) == list(range(n)) and tr and va
        assert (tr, va) == split_by_scene(list(range(n)), 0.8, seed)

    def test_sub_seeds_distinct(self):
        names = ["clustering", "init", "shuffle", "dropout", "split"]
        seeds = {sub_seed(0, n) for n in names}
        assert len(seeds) == len(names) and sub_seed(0, "init") == sub_seed(0, "init")


class TestGradients:
    def setup_method(self):
        self.cfg = NetworkConfig().reduced(8, input_size=8)
        self.w = init_weights(self.cfg, 3, dtype=np.float64)
        rng = np.random.default_rng(1)
        for k in self.w.params:
            if k.endswith("bias"):
                self.w.params[k] = rng.standard_normal(self.w.params[k].shape) * 0.1
        self.x = rng.standard_normal((4, 8, 8))
        self.y = np.array([2.0, -1.0, 3.0, -2.0])
        self.s = np.array([0, 2, 3, 1])

    def test_alpha_zero_backbone_equals_quality_only(self):
        _, _, _, g = loss_and_grads(self.w, self.x, self.y, self.s, alpha=0.0)
        q, _, cache = forward_arrays(self.w, self.x)
        ref = backward(self.w, cache, np.sign(q - self.y) / 4, np.zeros((4, 4)))
        for k in self.w.group("backbone"):
            assert np.array_equal(g[k], ref[k])
        assert all(np.all(g[k] == 0) for k in self.w.group("scene"))

    def test_loss_matches_oracle(self):
        L, lq, ls, _ = loss_and_grads(self.w, self.x, self.y, self.s, alpha=0.7)
        q, lg, _ = forward_arrays(self.w, self.x)
        assert L == pytest.approx(float(multitask_loss_ld(q, lg, self.y, self.s, 0.7)), abs=1e-12)
        assert lq == pytest.approx(quality_loss(q, self.y), abs=1e-12)
        assert ls == pytest.approx(scene_loss(lg, self.s), abs=1e-12)

    def test_finite_differences_sampled(self):
        # the exhaustive check over every parameter runs in the acceptance suite
        _, _, _, g = loss_and_grads(self.w, self.x, self.y, self.s, 1.0, train_mode=True,
                                    rng=np.random.default_rng(7))
        wl = self.w.astype(np.longdouble)

        def f():
            q, lg, _ = forward_arrays(wl, self.x, train_mode=True, rng=np.random.default_rng(7))
            return multitask_loss_ld(q, lg, self.y, self.s, 1.0)

        picks = ["conv1.weight", "conv6.bias", "quality.fc1.bias", "scene.out.weight"]
        num = central_difference_grads(f, {k: wl.params[k] for k in picks}, eps=1e-5)
        for k in picks:
            a, b = g[k].ravel(), num[k].ravel()
            rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
            assert rel.max() <= 1e-5, k

    def test_chunk_accumulation(self):
        _, _, _, full = loss_and_grads(self.w, self.x, self.y, self.s, 1.0)
        parts = [loss_and_grads(self.w, self.x[i:i + 2], self.y[i:i + 2], self.s[i:i + 2], 1.0,
                                scale=0.25)[3] for i in (0, 2)]
        for k in full:
            np.testing.assert_allclose(parts[0][k] + parts[1][k], full[k], rtol=1e-12, atol=1e-15)


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        Adam(p, lr=0.1).step(p, {"w": np.array([0.5, -4.0, 0.0])})
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-6)

    def test_minimizes_quadratic(self):
        p = {"w": np.array([5.0, -3.0])}
        opt = Adam(p, lr=0.05)
        for _ in range(2000):
            opt.step(p, {"w": 2 * p["w"]})
        assert np.abs(p["w"]).max() < 1e-2


class TestTrain:
    def test_alpha_zero_scene_head_unchanged(self):
        samples = make_samples(n_scenes=5)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=4)
        rep = train(samples, TINY, cfg, LossConfig(0.0))
        init = init_weights(TINY, sub_seed(4, "init"))
        for k, v in init.group("scene").items():
            assert rep.final_weights.params[k].tobytes() == v.tobytes()
        assert any(not np.array_equal(rep.final_weights.params[k], v)
                   for k, v in init.group("quality").items())

    def test_deterministic(self, tmp_path):
        samples = make_samples(n_scenes=5)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=2)
        a = train(samples, TINY, cfg, out_dir=tmp_path / "a")
        b = train(samples, TINY, cfg, out_dir=tmp_path / "b")
        for name in ("best.ckpt", "latest.ckpt", "train_report.jsonl", "train_summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert [r.train_loss for r in a.epochs] == [r.train_loss for r in b.epochs]

    def test_outputs(self, tmp_path):
        samples = make_samples(n_scenes=5)
        rep = train(samples, TINY, TrainConfig(epochs=3, batch_size=16), out_dir=tmp_path)
        assert len(rep.epochs) == 3 and 1 <= rep.best_epoch <= 3
        assert sorted(rep.train_scenes + rep.val_scenes) == [f"s{i}" for i in range(5)]
        assert len(rep.val_scenes) == 1
        lines = (tmp_path / "train_report.jsonl").read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in lines] == [1, 2, 3]
        ck = load_checkpoint(tmp_path / "best.ckpt", expected_config=TINY)
        assert ck.metadata["epoch"] == rep.best_epoch and ck.metadata["aspect"] == "texture"
        best_srocc = max(r.val_srocc for r in rep.epochs)
        assert rep.best.val_srocc == best_srocc

    def test_filters_aspect(self):
        samples = make_samples(n_scenes=3, aspect="noise")
        with pytest.raises(ValueError, match="no training samples"):
            train(samples, TINY, TrainConfig(epochs=1, aspect="texture"))

    def test_divergence_dump(self, tmp_path):
        samples = [replace(s, quality_label=float("nan")) for s in make_samples(n_scenes=3)]
        with pytest.raises(TrainingDivergedError) as info:
            train(samples, TINY, TrainConfig(epochs=1, batch_size=4), out_dir=tmp_path)
        dump = json.loads((tmp_path / "divergence_dump.json").read_text())
        assert dump["epoch"] == 1 and dump["step"] == 1
        assert info.value.state["step"] == 1

    def test_overfit_eight_patches(self):
        # memorization probe: dropout off, so the L1 fit is not fighting mask noise
        cfg = replace(NetworkConfig().reduced(4), dropout_rate=0.0)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((8, 64, 64)).astype(np.float32)
        y = rng.uniform(0, 1, 8).astype(np.float32)
        s = rng.integers(0, 4, 8)
        w = init_weights(cfg, 0)
        opt = Adam(w.params)
        best = math.inf
        for _ in range(500):
            _, lq, _, g = loss_and_grads(w, x, y, s, 1.0)
            best = min(best, lq)
            if lq < 0.01:
                break
            opt.step(w.params, g)
        assert best < 0.01
