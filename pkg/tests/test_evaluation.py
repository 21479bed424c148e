import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from densegan.data import ImageSet
from densegan.discriminator import DiscriminatorConfig, build_discriminator
from densegan.errors import ConfigurationError, MetricError
from densegan.evaluation import (aggregate_image_score, emit_report, evaluate, load_report,
                                 per_class_recall, recall_at_threshold, roc_auc, score_dataset,
                                 select_threshold)
from densegan.generator import GeneratorConfig, build_generator


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestRocAuc:
    def test_perfect(self):
        assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[0] == 1.0

    def test_half(self):
        # pairs: .6>.4 .6>.3 .2<.4 .2<.3 -> 2 of 4
        assert roc_auc([0.6, 0.2, 0.4, 0.3], [1, 1, 0, 0])[0] == 0.5

    def test_all_tied(self):
        assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1])[0] == 0.5

    def test_single_label(self):
        with pytest.raises(MetricError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            n = int(rng.integers(2, 13))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                continue
            scores = rng.integers(0, 5, n) / 4  # plenty of ties
            assert roc_auc(scores, labels)[0] == brute_force_auc(scores, labels)

    def test_roc_endpoints_and_monotone(self):
        rng = np.random.default_rng(1)
        s, y = rng.random(30), rng.integers(0, 2, 30)
        y[:2] = [0, 1]
        pts = roc_auc(s, y)[1]
        assert pts[0][:2] == (0.0, 0.0) and pts[-1][:2] == (1.0, 1.0)
        fpr = [p[0] for p in pts]
        assert fpr == sorted(fpr)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 1, allow_subnormal=False), min_size=4, max_size=30, unique=True),
           st.sampled_from([np.exp, np.cbrt, lambda t: 3 * t + 7, lambda t: t ** 3 + t, np.arctan]))
    def test_invariant_under_increasing_maps(self, scores, f):
        s = np.asarray(scores)
        y = np.arange(len(s)) % 2
        t = f(s)
        if len(np.unique(t)) != len(np.unique(s)):
            return  # the map merged floats; not strictly increasing in floating point
        assert roc_auc(t, y)[0] == roc_auc(s, y)[0]


class TestRecall:
    def test_threshold_zero(self):
        assert recall_at_threshold([0.1, 0.0, 0.5], [1, 1, 0], 0.0) == 1.0

    def test_above_max(self):
        assert recall_at_threshold([0.1, 0.3], [1, 1], 0.31) == 0.0

    def test_half(self):
        assert recall_at_threshold([0.9, 0.4, 0.2], [1, 1, 0], 0.5) == 0.5

    def test_no_anomalies(self):
        with pytest.raises(MetricError):
            recall_at_threshold([0.1], [0], 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0, 1), st.floats(0, 1))
    def test_non_increasing(self, scores, t1, t2):
        lo, hi = sorted((t1, t2))
        labels = [1] * len(scores)
        assert recall_at_threshold(scores, labels, hi) <= recall_at_threshold(scores, labels, lo)


def brute_force_youden(scores, labels):
    s, y = np.asarray(scores), np.asarray(labels).astype(bool)
    distinct = np.unique(s)
    candidates = np.r_[distinct, (distinct[:-1] + distinct[1:]) / 2]
    best_j, best = -np.inf, None
    for t in sorted(candidates):  # ascending: ties resolve to the lowest threshold
        j = (s[y] >= t).mean() - (s[~y] >= t).mean()
        if j > best_j + 1e-15:
            best_j, best = j, t
    return best_j, best


class TestThreshold:
    def test_separated_midpoint(self):
        assert select_threshold([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == pytest.approx(0.5)

    def test_all_equal(self, caplog):
        assert select_threshold([0.4] * 4, [1, 0, 1, 0]) == 0.4
        assert "equal" in caplog.text

    def test_matches_exhaustive_search(self):
        s, y = [0.7, 0.3, 0.5, 0.1], [1, 0, 1, 0]
        j_star, _ = brute_force_youden(s, y)
        t = select_threshold(s, y)
        sa, ya = np.asarray(s), np.asarray(y).astype(bool)
        assert (sa[ya] >= t).mean() - (sa[~ya] >= t).mean() == j_star
        assert t == pytest.approx(0.4)

    def test_random_fixtures_reach_optimal_youden(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(2, 10))
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                continue
            s = rng.integers(0, 6, n) / 5
            j_star, t_star = brute_force_youden(s, y)
            t = select_threshold(s, y)
            yy = y.astype(bool)
            assert (s[yy] >= t).mean() - (s[~yy] >= t).mean() == pytest.approx(j_star)

    def test_fixed_quantile(self):
        s = np.r_[np.linspace(0, 1, 101), [2.0]]
        y = np.r_[np.zeros(101), [1]]
        assert select_threshold(s, y, "fixed:0.9") == pytest.approx(0.9)
        assert select_threshold(s, y, ("fixed", 0.5)) == pytest.approx(0.5)

    def test_unknown_policy(self):
        with pytest.raises(ConfigurationError):
            select_threshold([0.1, 0.9], [0, 1], "otsu")


class TestPerClassRecall:
    def test_single_class_equals_overall(self):
        s, y, tags = [0.9, 0.3, 0.6, 0.1], [1, 1, 1, 0], ["gun", "gun", "gun", "bag"]
        assert per_class_recall(s, y, tags, 0.5) == {"gun": recall_at_threshold(s, y, 0.5)}

    def test_straddling_classes(self):
        s = [0.9, 0.8, 0.2, 0.1, 0.0]
        y = [1, 1, 1, 1, 0]
        tags = ["knife", "knife", "wrench", "wrench", "bag"]
        assert per_class_recall(s, y, tags, 0.5) == {"knife": 1.0, "wrench": 0.0}

    def test_hand_count_and_weighted_average(self):
        s = [0.9, 0.4, 0.7, 0.6, 0.2, 0.8, 0.1, 0.3]
        y = [1, 1, 1, 1, 1, 1, 0, 0]
        tags = ["a", "a", "b", "b", "b", "c", "-", "-"]
        r = per_class_recall(s, y, tags, 0.5)
        assert r == {"a": 0.5, "b": pytest.approx(2 / 3), "c": 1.0}
        counts = {"a": 2, "b": 3, "c": 1}
        weighted = sum(r[k] * counts[k] for k in r) / 6
        assert weighted == pytest.approx(recall_at_threshold(s, y, 0.5))


class TestAggregate:
    def test_single(self):
        assert aggregate_image_score([0.4]) == 0.4

    def test_max(self):
        assert aggregate_image_score([0.1, 0.9, 0.3]) == 0.9

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
    def test_max_at_least_mean(self, v):
        assert aggregate_image_score(v) >= aggregate_image_score(v, "mean") - 1e-9 * max(1, max(map(abs, v)))


@pytest.fixture
def frozen_model():
    g = build_generator(GeneratorConfig(input_size=16, depth=2, base_channels=4), seed=11).eval()
    d = build_discriminator(DiscriminatorConfig(input_size=16, depth=2, base_channels=8), seed=12).eval()
    return g, d


@pytest.fixture
def fixture_set():
    rng = np.random.default_rng(4)
    images = rng.uniform(-1, 1, size=(20, 3, 16, 16))
    labels = np.r_[np.zeros(10, int), np.ones(10, int)]
    tags = ["ok"] * 10 + ["x", "y"] * 5
    return ImageSet(images, labels, tags)


class TestScoreDataset:
    def test_duplicates_score_identically(self, frozen_model):
        g, d = frozen_model
        img = torch.rand(1, 3, 16, 16) * 2 - 1
        ds = ImageSet(torch.cat([img, img, -img]), [0, 0, 1])
        v = score_dataset(g, d, ds, 0.9)
        assert v.raw[0] == v.raw[1]

    def test_eta_one_is_contextual(self, frozen_model, fixture_set):
        g, d = frozen_model
        v = score_dataset(g, d, fixture_set, 1.0)
        with torch.no_grad():
            x = fixture_set.images
            expected = (x - g(x)).abs().mean(dim=(1, 2, 3)).numpy()
        np.testing.assert_allclose(v.raw, expected, rtol=1e-12)

    def test_dump_and_recompute(self, frozen_model, fixture_set, tmp_path):
        g, d = frozen_model
        v = score_dataset(g, d, fixture_set, 0.7, batch_size=7)
        with torch.no_grad():
            x = fixture_set.images
            x_hat = g(x)
            np.save(tmp_path / "x_hat.npy", x_hat.numpy())
            np.save(tmp_path / "f_x.npy", d(x).features.numpy())
            np.save(tmp_path / "f_xhat.npy", d(x_hat).features.numpy())
        xn, xh = x.numpy(), np.load(tmp_path / "x_hat.npy")
        fx, fh = np.load(tmp_path / "f_x.npy"), np.load(tmp_path / "f_xhat.npy")
        a_g = np.abs(xn - xh).reshape(20, -1).mean(1)
        a_d = np.abs(fx - fh).mean(1)
        np.testing.assert_allclose(v.raw, 0.7 * a_g + 0.3 * a_d, rtol=1e-10)
        np.testing.assert_allclose(v.normalized, (v.raw - v.raw.min()) / (v.raw.max() - v.raw.min()))

    def test_input_size_mismatch(self, frozen_model):
        g, d = frozen_model
        with pytest.raises(ConfigurationError):
            score_dataset(g, d, ImageSet(torch.zeros(2, 3, 32, 32), [0, 1]))

    def test_patch_aggregation(self, frozen_model, fixture_set):
        g, d = frozen_model
        groups = [f"img{i // 4}" for i in range(20)]
        ds = ImageSet(fixture_set.images, fixture_set.labels, fixture_set.class_tags, groups)
        patch = score_dataset(g, d, ds, 0.9)
        image = score_dataset(g, d, ds, 0.9, aggregate="max")
        assert image.sample_ids == [f"img{k}" for k in range(5)]
        np.testing.assert_allclose(image.raw, patch.raw.reshape(5, 4).max(1))

    def test_auc_invariant_under_normalization(self, frozen_model, fixture_set):
        g, d = frozen_model
        v = score_dataset(g, d, fixture_set, 0.9)
        assert roc_auc(v.raw, v.labels)[0] == roc_auc(v.normalized, v.labels)[0]


class TestReport:
    def make(self, frozen_model, fixture_set):
        g, d = frozen_model
        v = score_dataset(g, d, fixture_set, 0.9)
        return v, evaluate(v)

    def test_round_trip(self, frozen_model, fixture_set, tmp_path):
        v, r = self.make(frozen_model, fixture_set)
        paths = emit_report(r, tmp_path, v)
        assert load_report(paths["report"]) == r
        for key in ("roc", "histogram", "scores", "histogram_png", "roc_png"):
            assert paths[key].exists()

    def test_histogram_counts(self, frozen_model, fixture_set):
        _, r = self.make(frozen_model, fixture_set)
        assert len(r.histogram["normal"]) == 50
        assert sum(r.histogram["normal"]) == r.n_normal == 10
        assert sum(r.histogram["anomalous"]) == r.n_anomalous == 10

    def test_roc_csv_endpoints(self, frozen_model, fixture_set, tmp_path):
        v, r = self.make(frozen_model, fixture_set)
        paths = emit_report(r, tmp_path, v, plots=False)
        rows = list(csv.DictReader(open(paths["roc"])))
        assert (float(rows[0]["fpr"]), float(rows[0]["tpr"])) == (0.0, 0.0)
        assert (float(rows[-1]["fpr"]), float(rows[-1]["tpr"])) == (1.0, 1.0)

    def test_score_csv_columns(self, frozen_model, fixture_set, tmp_path):
        v, r = self.make(frozen_model, fixture_set)
        paths = emit_report(r, tmp_path, v, plots=False)
        rows = list(csv.DictReader(open(paths["scores"])))
        assert list(rows[0]) == ["sample_id", "class_tag", "label", "raw_score", "normalized_score"]
        assert len(rows) == 20

    def test_unwritable_path(self, frozen_model, fixture_set, tmp_path):
        _, r = self.make(frozen_model, fixture_set)
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            emit_report(r, blocker / "sub", plots=False)
