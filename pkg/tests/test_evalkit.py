import json
import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from ldguid.errors import ShapeMismatch, TooFewSamples
from ldguid.evalkit import (
    BLACK,
    GREEN,
    RED,
    WHITE,
    ConfusionCounts,
    MetricsReport,
    confusion,
    f1,
    format_table,
    iou,
    nuisance_probe,
    read_sweep_csv,
    render_error_map,
    save_error_map,
    significance,
    write_sweep_csv,
)

FIXTURE_PRED = np.array([[1, 1], [0, 0]])
FIXTURE_GT = np.array([[1, 0], [0, 0]])


class TestConfusion:
    def test_identity(self):
        m = np.array([[1, 0, 1], [0, 1, 1]])
        c = confusion(m, m)
        assert c.fp == 0 and c.fn == 0 and c.tp == 4

    def test_fixture(self):
        assert confusion(FIXTURE_PRED, FIXTURE_GT) == ConfusionCounts(tp=1, fp=1, fn=0, tn=2)

    def test_empty(self):
        z = np.zeros((3, 4))
        assert confusion(z, z) == ConfusionCounts(0, 0, 0, 12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_accepts_tensors(self):
        c = confusion(torch.tensor(FIXTURE_PRED), torch.tensor(FIXTURE_GT))
        assert c == ConfusionCounts(1, 1, 0, 2)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        p, g = rng.integers(0, 2, (6, 6)), rng.integers(0, 2, (6, 6))
        a, b = confusion(p, g), confusion(g, p)
        assert (a.tp, a.fp, a.fn, a.tn) == (b.tp, b.fn, b.fp, b.tn)
        assert iou(a) == iou(b)
        assert a.total == 36


class TestIouF1:
    def test_fixture(self):
        c = ConfusionCounts(1, 1, 0, 2)
        assert iou(c) == 0.5
        assert f1(c) == pytest.approx(2 / 3, abs=1e-15)

    def test_perfect(self):
        c = ConfusionCounts(5, 0, 0, 11)
        assert iou(c) == f1(c) == 1.0

    def test_disjoint(self):
        c = confusion(np.array([[1, 0]]), np.array([[0, 1]]))
        assert iou(c) == f1(c) == 0.0

    def test_both_empty_convention(self):
        c = ConfusionCounts(0, 0, 0, 9)
        assert iou(c) == f1(c) == 1.0

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
    def test_f1_iou_identity(self, tp, fp, fn):
        if tp + fp + fn == 0:
            return
        c = ConfusionCounts(tp, fp, fn, 0)
        assert abs(f1(c) - 2 * iou(c) / (1 + iou(c))) <= 1e-12

    def test_bruteforce_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = rng.random((16, 16)) < rng.random()
            g = rng.random((16, 16)) < rng.random()
            pos_p = {(i, j) for i in range(16) for j in range(16) if p[i, j]}
            pos_g = {(i, j) for i in range(16) for j in range(16) if g[i, j]}
            inter, union = len(pos_p & pos_g), len(pos_p | pos_g)
            c = confusion(p, g)
            expected_iou = Fraction(inter, union) if union else Fraction(1)
            expected_f1 = Fraction(2 * inter, len(pos_p) + len(pos_g)) if union else Fraction(1)
            assert Fraction(c.tp, c.tp + c.fp + c.fn if union else 1) == (expected_iou if union else Fraction(0))
            assert iou(c) == float(expected_iou)
            assert f1(c) == float(expected_f1)


class TestSignificance:
    def test_equal_lists(self):
        a = [0.1, 0.4, 0.3]
        assert significance(a, list(a)) == pytest.approx(0.5, abs=1e-12)

    def test_clear_gain(self):
        a, b = [0.90, 0.91, 0.92], [0.50, 0.51, 0.52]
        # hand oracle: diff 0.40, each variance 1e-4, se = sqrt(2e-4 / 3), df = 4
        t = 0.40 / math.sqrt(2e-4 / 3)
        assert t == pytest.approx(48.99, abs=0.01)
        p = significance(a, b)
        assert p < 0.001
        from scipy.stats import t as student_t
        assert p == pytest.approx(student_t.sf(t, 4), rel=1e-9)

    def test_sign_flip(self):
        assert significance([0.5, 0.51], [0.9, 0.91]) > 0.99

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            significance([0.5], [0.1, 0.2])

    def test_zero_variance_conventions(self):
        assert significance([0.3, 0.3], [0.3, 0.3]) == 0.5
        assert significance([0.4, 0.4], [0.3, 0.3]) == 0.0
        assert significance([0.2, 0.2], [0.3, 0.3]) == 1.0

    def test_matches_scipy_welch(self):
        from scipy.stats import ttest_ind

        rng = np.random.default_rng(4)
        a, b = rng.normal(0.6, 0.05, 5), rng.normal(0.55, 0.1, 4)
        ref = ttest_ind(a, b, equal_var=False, alternative="greater").pvalue
        assert significance(a, b) == pytest.approx(ref, rel=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_complementary(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random(3), rng.random(4)
        assert abs(significance(a, b) + significance(b, a) - 1) <= 1e-9
        assert 0 <= significance(a, b) <= 1


class TestErrorMap:
    def test_all_tp(self):
        m = np.ones((3, 3))
        assert np.all(render_error_map(m, m) == 255)

    def test_all_fp(self):
        out = render_error_map(np.ones((2, 2)), np.zeros((2, 2)))
        assert np.all(out.reshape(-1, 3) == GREEN)

    def test_fixture_colors(self):
        out = render_error_map(FIXTURE_PRED, FIXTURE_GT)
        assert [tuple(out[i, j]) for i in range(2) for j in range(2)] == [WHITE, GREEN, BLACK, BLACK]

    def test_fn_red_and_swap(self):
        p, g = np.array([[0, 1]]), np.array([[1, 0]])
        assert [tuple(c) for c in render_error_map(p, g)[0]] == [RED, GREEN]
        assert [tuple(c) for c in render_error_map(g, p)[0]] == [GREEN, RED]

    def test_png_exact_colors(self, tmp_path):
        path = tmp_path / "m.png"
        save_error_map(path, FIXTURE_PRED, FIXTURE_GT)
        arr = np.asarray(Image.open(path))
        np.testing.assert_array_equal(arr, render_error_map(FIXTURE_PRED, FIXTURE_GT))


class TestReport:
    def test_json_shape(self, tmp_path):
        r = MetricsReport("ldguid-unet", "synthetic", [0, 1, 2],
                          {"iou": [0.8, 0.82, 0.84], "f1": [0.88, 0.9, 0.91]})
        base = MetricsReport("unet", "synthetic", [0, 1, 2],
                             {"iou": [0.6, 0.62, 0.61], "f1": [0.7, 0.72, 0.71]})
        r.compare_to(base)
        path = tmp_path / "r.json"
        r.save(path)
        d = json.loads(path.read_text())
        for key in ("method", "dataset", "seeds", "per_seed", "mean_iou", "std_iou",
                    "mean_f1", "std_f1", "baseline", "p_value"):
            assert key in d
        assert d["mean_iou"] == pytest.approx(0.82)
        assert d["std_iou"] == pytest.approx(0.02)  # sample std, n - 1
        assert d["baseline"] == "unet"
        assert 0 <= d["p_value"] < 0.05
        assert MetricsReport.load(path).to_dict() == d

    def test_table_rows(self):
        r = MetricsReport("m", "d", [0, 1], {"iou": [0.5, 0.7], "f1": [0.6, 0.8]})
        row = format_table([r])[0]
        assert row["iou"].startswith("60.00 +- ")


def test_sweep_csv_roundtrip(tmp_path):
    rows = [{"beta": 0.1, "rec_loss": 1 / 3, "adv_loss": 0.25},
            {"beta": 5.0, "rec_loss": 1e-7, "adv_loss": 2 / 7}]
    path = tmp_path / "s.csv"
    write_sweep_csv(path, rows, provenance={"seed": 1})
    lines = path.read_text().splitlines()
    assert lines[1] == "beta,rec_loss,adv_loss"
    assert read_sweep_csv(path) == rows


class TestNuisanceProbe:
    def _latents(self, n, seed=0):
        return torch.randn(n, 4, 3, 3, generator=torch.Generator().manual_seed(seed))

    def test_constant_labels(self):
        assert nuisance_probe(self._latents(30), [0.7] * 30, seed=0) == pytest.approx(0.0, abs=1e-12)

    def test_linear_labels_are_recovered(self):
        z = self._latents(60)
        labels = 2.0 * z.mean(dim=(2, 3))[:, 1] - 0.5
        assert nuisance_probe(z, labels.tolist(), seed=1) < 1e-4

    def test_uninformative_labels_floor(self):
        rng = np.random.default_rng(0)
        n = 400
        labels = rng.uniform(-1, 1, n)
        err = nuisance_probe(self._latents(n, 3), labels, seed=2)
        assert err == pytest.approx(np.var(labels), rel=0.25)

    def test_deterministic(self):
        z = self._latents(40)
        y = np.random.default_rng(1).normal(size=40)
        assert nuisance_probe(z, y, seed=5) == nuisance_probe(z, y, seed=5)

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            nuisance_probe(self._latents(10), [0.0] * 10)
