import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import spearmanr

from conftest import make_samples
from oracles import all_permutations, spearman_oracle
from sceneiqa.evaluation import (EvalReport, UndefinedCorrelationError, aggregate_image_score,
                                 build_eval_report, evaluate_aspect, evaluate_samples,
                                 plot_training_curves, read_train_report, scene_accuracy, srocc,
                                 srocc_from_ranks)
from sceneiqa.network import NetworkConfig, init_weights

TINY = NetworkConfig().reduced(8, input_size=16)


class TestSrocc:
    def test_identity_and_reversal(self):
        ranks = np.arange(1, 11)
        assert srocc(-ranks, ranks) == 1.0
        assert srocc(ranks, ranks) == -1.0

    def test_worked_example(self):
        # predicted ranks (1, 2, 3) against ground (1, 3, 2): sum d^2 = 2
        assert srocc_from_ranks([1, 2, 3], [1, 3, 2]) == 0.5
        assert srocc([0.9, 0.5, 0.1], [1, 3, 2]) == 0.5

    def test_exhaustive_small(self):
        for n in range(2, 6):
            for pred in all_permutations(n):
                scores = [-float(r) for r in pred]
                for ground in all_permutations(n):
                    assert abs(srocc(scores, ground) - spearman_oracle(scores, ground)) <= 1e-12

    def test_exhaustive_six(self):
        scores = list(np.random.default_rng(0).uniform(0, 1, 6))
        for ground in all_permutations(6):
            assert abs(srocc(scores, ground) - spearman_oracle(scores, ground)) <= 1e-12

    @given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=30, unique=True))
    def test_monotone_invariance(self, scores):
        s = np.array(scores, dtype=np.float64)
        ground = np.argsort(np.argsort(-s)) + 1
        assert srocc(s, ground) == pytest.approx(1.0, abs=1e-12)
        assert srocc(np.exp(s / 500), ground) == pytest.approx(1.0, abs=1e-12)

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=30, unique=True), st.randoms())
    def test_sign_flip(self, scores, rnd):
        ground = list(range(1, len(scores) + 1))
        rnd.shuffle(ground)
        assert srocc(scores, ground) == pytest.approx(-srocc([-v for v in scores], ground), abs=1e-12)

    @given(st.lists(st.integers(0, 4), min_size=3, max_size=20), st.randoms())
    def test_ties_match_scipy(self, scores, rnd):
        ground = list(range(1, len(scores) + 1))
        rnd.shuffle(ground)
        if len(set(scores)) < 2:
            with pytest.raises(UndefinedCorrelationError):
                srocc(scores, ground)
            return
        ref = spearmanr(scores, ground).statistic
        assert srocc(scores, ground) == pytest.approx(-ref, abs=1e-12)

    def test_errors(self):
        with pytest.raises(UndefinedCorrelationError):
            srocc([1.0, 1.0, 1.0], [1, 2, 3])
        with pytest.raises(UndefinedCorrelationError):
            srocc([1.0, 2.0, 3.0], [2, 2, 2])
        with pytest.raises(ValueError):
            srocc([1.0], [1])

    def test_ground_gaps_are_reranked(self):
        assert srocc([0.9, 0.5, 0.1], [1, 4, 9]) == 1.0


class TestAggregation:
    def test_examples(self):
        assert aggregate_image_score([0.5]) == 0.5
        assert aggregate_image_score([0, 1]) == 0.5
        with pytest.raises(ValueError):
            aggregate_image_score([])

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.randoms())
    def test_permutation_invariant(self, vals, rnd):
        shuffled = list(vals)
        rnd.shuffle(shuffled)
        assert aggregate_image_score(shuffled) == pytest.approx(aggregate_image_score(vals), abs=1e-12)


class TestModelEvaluation:
    def test_random_network_null(self):
        samples = make_samples(n_scenes=60, n_devices=15, patches_per_image=1, signal=False, seed=3)
        w = init_weights(TINY, 5)
        per_scene, mean = evaluate_aspect(w, samples, "texture")
        assert len(per_scene) == 60
        assert abs(mean) <= 0.25

    def test_scene_accuracy_extremes(self):
        w = init_weights(TINY, 0)
        for v in w.group("scene").values():
            v[...] = 0
        w.params["scene.out.bias"][...] = [0.0, 0.0, 5.0, 0.0]
        image = [s for s in make_samples(n_scenes=3) if s.image_id == "s2/d0"]
        assert scene_accuracy(w, image) == 1.0
        other = [s for s in make_samples(n_scenes=3) if s.image_id == "s1/d0"]
        assert scene_accuracy(w, other) == 0.0

    def test_skips_single_image_scene(self):
        samples = make_samples(n_scenes=2) + make_samples(n_scenes=3)[-2:]
        ev = evaluate_samples(init_weights(TINY, 1), samples, "texture")
        # the last two samples belong to scene s2, which then has one image
        assert "s2" not in ev.scene_srocc
        assert any("s2" in w for w in ev.warnings)

    def test_tied_scene_excluded(self):
        w = init_weights(TINY, 0)
        for k in ("quality.out.weight", "quality.out.bias"):
            w.params[k][...] = 0
        ev = evaluate_samples(w, make_samples(n_scenes=2), "texture")
        assert all(math.isnan(v) for v in ev.scene_srocc.values())
        assert math.isnan(ev.mean_srocc) and len(ev.warnings) == 2


class TestReport:
    def test_write(self, tmp_path):
        samples = make_samples(n_scenes=2)
        rep = build_eval_report({"texture": init_weights(TINY, 2)}, {"texture": samples},
                                {"checkpoint": "best.ckpt"})
        paths = rep.write(tmp_path / "eval")
        d = json.loads(open(paths[0]).read())
        assert d["metadata"] == {"checkpoint": "best.ckpt"}
        assert len(d["scenes"]) == 2 and len(d["images"]) == 10
        assert d["mean_srocc"]["texture"] == pytest.approx(
            np.mean([r["srocc"] for r in d["scenes"]]))
        with open(paths[1]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["scene_id", "aspect", "srocc"] and len(rows) == 3
        with open(paths[2]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["image_id", "aspect", "scene_accuracy"] and len(rows) == 11
        rep2 = build_eval_report({"texture": init_weights(TINY, 2)}, {"texture": samples},
                                 {"checkpoint": "best.ckpt"})
        paths2 = rep2.write(tmp_path / "again")
        for a, b in zip(paths, paths2):
            assert open(a, "rb").read() == open(b, "rb").read()

    def test_image_rows_carry_scene_srocc(self):
        rep = build_eval_report({"texture": init_weights(TINY, 2)},
                                {"texture": make_samples(n_scenes=2)})
        for row in rep.image_rows():
            assert row["scene_srocc"] == pytest.approx(
                rep.aspects["texture"].scene_srocc[row["scene_id"]])

    def test_plot(self, tmp_path):
        recs = [{"epoch": e, "val_srocc": 0.1 + e / 100, "val_scene_accuracy": 0.5}
                for e in range(1, 51)]
        jl = tmp_path / "r.jsonl"
        jl.write_text("".join(json.dumps(r) + "\n" for r in recs))
        out = plot_training_curves(read_train_report(jl), tmp_path / "c.png", title="texture")
        data = open(out, "rb").read()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        plot_training_curves(recs, tmp_path / "d.png", title="texture")
        assert (tmp_path / "d.png").read_bytes() == data

    def test_plot_empty(self, tmp_path):
        with pytest.raises(ValueError):
            plot_training_curves([], tmp_path / "x.png")


def test_eval_report_type():
    assert EvalReport({}).to_dict()["scenes"] == []
