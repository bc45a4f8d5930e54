import json
import math

import numpy as np
import pytest

from sciqa.errors import UndefinedMetricError
from sciqa.evaluation import evaluate, evaluate_model, logistic_fit, plcc, rmse, srcc, stats_report


def average_ranks(values):
    """Rank by counting: 1 + #smaller + (#equal - 1) / 2."""
    return [1 + sum(v < x for v in values) + (sum(v == x for v in values) - 1) / 2 for x in values]


def pearson_direct(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


def rmse_direct(x, y):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)) / len(x))


def random_pair(rng, ties):
    x, y = rng.normal(size=50), rng.normal(size=50)
    if ties:
        x, y = np.round(x * 2) / 2, np.round(y * 3) / 3
    return x.tolist(), y.tolist()


class TestMetrics:
    def test_examples(self):
        assert srcc([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
        assert srcc([1, 2, 3, 4], [40, 30, 20, 10]) == -1.0
        assert plcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)
        assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
        assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))

    def test_tie_example(self):
        # ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4)
        assert srcc([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(pearson_direct([1, 2.5, 2.5, 4], [1, 2, 3, 4]), abs=1e-12)

    @pytest.mark.parametrize("fn", [srcc, plcc])
    def test_undefined(self, fn):
        with pytest.raises(UndefinedMetricError):
            fn([1, 2, 3], [5, 5, 5])
        with pytest.raises(UndefinedMetricError):
            fn([1.0], [2.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse([1, 2], [1])

    @pytest.mark.parametrize("ties", [False, True])
    def test_oracles(self, rng, ties):
        for _ in range(100):
            x, y = random_pair(rng, ties)
            assert abs(srcc(x, y) - pearson_direct(average_ranks(x), average_ranks(y))) < 1e-9
            assert abs(plcc(x, y) - pearson_direct(x, y)) < 1e-9
            assert abs(rmse(x, y) - rmse_direct(x, y)) < 1e-9

    def test_srcc_monotone_invariance(self, rng):
        for _ in range(50):
            x, y = rng.normal(size=40), rng.normal(size=40)
            base = srcc(x, y)
            assert abs(srcc(np.exp(x), y) - base) < 1e-9
            assert abs(srcc(x, y**3) - base) < 1e-9

    def test_plcc_affine_invariance(self, rng):
        for _ in range(50):
            x, y = rng.normal(size=40), rng.normal(size=40)
            a, b = rng.uniform(0.1, 10), rng.normal() * 10
            assert abs(plcc(a * x + b, y) - plcc(x, y)) < 1e-9
            assert abs(plcc(x, a * y + b) - plcc(x, y)) < 1e-9

    def test_rmse_homogeneous(self, rng):
        x, y = rng.normal(size=30), rng.normal(size=30)
        assert rmse(3 * x, 3 * y) == pytest.approx(3 * rmse(x, y), rel=1e-12)

    def test_logistic_fit_monotone_data(self, rng):
        x = np.linspace(-3, 3, 40)
        y = 100 / (1 + np.exp(-2 * x)) + rng.normal(size=40) * 0.5
        mapped = logistic_fit(x, y)
        assert rmse(mapped, y) < rmse(x, y)


class TestReports:
    def test_report_well_formed(self, small_corpus, tiny_model):
        report = evaluate_model(tiny_model, small_corpus)
        assert report.overall["count"] == len(small_corpus.distorted)
        assert set(report.per_type) == {"GN", "GB", "CC"}
        d = json.loads(report.to_json())
        assert set(d) == {"dataset", "overall", "per_type", "predictions", "skipped"}
        assert report.to_csv().splitlines()[0] == "image,distortion_type,distortion_level,predicted,ground_truth"

    def test_deterministic(self, small_corpus, tiny_model):
        assert evaluate_model(tiny_model, small_corpus).to_json() == evaluate_model(tiny_model, small_corpus).to_json()

    def test_single_type_matches_overall(self, small_corpus, tiny_model):
        from sciqa.data import DatasetManifest

        gn = DatasetManifest([r for r in small_corpus.records if r.distortion_type in ("PRISTINE", "GN")],
                             small_corpus.score_polarity, "gn", small_corpus.base_dir)
        report = evaluate_model(tiny_model, gn)
        assert report.per_type["GN"] == report.overall

    def test_cross_dataset_label(self, small_corpus, tiny_model):
        assert evaluate(tiny_model, small_corpus, train_name="SIQAD").dataset == f"SIQAD→{small_corpus.name}"
        assert evaluate(tiny_model, small_corpus, train_name=small_corpus.name).dataset == small_corpus.name

    def test_missing_image_skipped(self, small_corpus, tiny_model):
        from dataclasses import replace

        from sciqa.data import DatasetManifest

        records = list(small_corpus.records)
        i = next(k for k, r in enumerate(records) if not r.is_pristine)
        records[i] = replace(records[i], image_path="images/missing.png")
        broken = DatasetManifest(records, small_corpus.score_polarity, small_corpus.name, small_corpus.base_dir)
        report = evaluate_model(tiny_model, broken)
        assert len(report.skipped) == 1 and report.skipped[0]["image"] == "images/missing.png"
        assert report.overall["count"] == len(small_corpus.distorted) - 1

    def test_stats_report(self, small_corpus, tiny_model):
        a = stats_report(tiny_model, small_corpus, bins=10)
        b = stats_report(tiny_model, small_corpus, bins=10)
        assert a.to_json() == b.to_json()
        assert len(a.images) == len(small_corpus.records)
        for name in ("mu", "sigma", "phi_sum"):
            h = a.histograms[name]
            assert len(h["edges"]) == 11
            assert np.all(np.diff(h["edges"]) > 0)
        assert sum(a.histograms["phi_sum"]["pristine"]) == len(small_corpus.pristine)
