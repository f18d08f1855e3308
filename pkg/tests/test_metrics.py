import numpy as np
import pytest

from helpers import auc_rank_oracle, youden_scan_oracle
from radfp.metrics import (EvalReport, ScoredLabels, aggregate_runs, confusion_at,
                           load_eval_report, roc_auc, save_eval_report,
                           youden_threshold)


def sl(scores, labels):
    return ScoredLabels(np.asarray(scores, dtype=float), np.asarray(labels, dtype=bool))


class TestConfusion:
    def test_perfect_scores(self):
        assert confusion_at(sl([1, 1, 0, 0], [1, 1, 0, 0]), 0.5) == (1.0, 1.0, 1.0)

    def test_all_zero_scores(self):
        acc, sen, spe = confusion_at(sl([0, 0, 0, 0], [1, 0, 1, 0]), 0.5)
        assert (sen, spe) == (0.0, 1.0)
        assert acc == 0.5

    def test_counted_example(self):
        acc, sen, spe = confusion_at(sl([0.2, 0.6, 0.7, 0.9], [0, 0, 1, 1]), 0.65)
        assert (acc, sen, spe) == (1.0, 1.0, 1.0)

    def test_vacuous_class_flagged(self):
        with pytest.warns(UserWarning, match="no negative labels"):
            acc, sen, spe = confusion_at(sl([0.2, 0.9], [1, 1]), 0.5)
        assert spe == 1.0

    def test_monotonicity_in_threshold(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(3, 40))
            scores = rng.random(n)
            labels = rng.random(n) > 0.5
            if labels.all() or not labels.any():
                continue
            data = sl(scores, labels)
            ts = np.linspace(0, 1, 23)
            sens = []
            spes = []
            for t in ts:
                _, sen, spe = confusion_at(data, t)
                sens.append(sen)
                spes.append(spe)
            assert (np.diff(sens) <= 1e-12).all()
            assert (np.diff(spes) >= -1e-12).all()


class TestAuc:
    def test_perfectly_separated(self):
        assert roc_auc(sl([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])) == 1.0

    def test_all_ties(self):
        assert roc_auc(sl([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])) == 0.5

    def test_pair_counting_example(self):
        assert roc_auc(sl([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == 0.75

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_auc(sl([0.1, 0.2], [1, 1]))

    def test_matches_rank_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(4, 60))
            scores = np.round(rng.random(n), 2)  # induce ties
            labels = rng.random(n) > 0.4
            if labels.all() or not labels.any():
                continue
            got = roc_auc(sl(scores, labels))
            want = auc_rank_oracle(list(scores), list(labels))
            assert got == pytest.approx(want, abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(2)
        scores = rng.random(30)
        labels = rng.random(30) > 0.5
        labels[0] = True
        labels[1] = False
        a = roc_auc(sl(scores, labels))
        b = roc_auc(sl(scores**3, labels))  # strictly increasing on [0,1]
        assert a == b


class TestYouden:
    def test_separated_returns_midpoint(self):
        assert youden_threshold(sl([0.2, 0.3, 0.8, 0.9], [0, 0, 1, 1])) == pytest.approx(0.55)

    def test_all_ties_returns_smallest_candidate(self):
        assert youden_threshold(sl([0.5, 0.5, 0.5], [1, 0, 1])) == 0.0

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(3)
        done = 0
        while done < 60:
            n = int(rng.integers(3, 25))
            scores = np.round(rng.random(n), 2)
            labels = rng.random(n) > 0.5
            if labels.all() or not labels.any():
                continue
            got = youden_threshold(sl(scores, labels))
            want_t, _ = youden_scan_oracle(list(scores), list(labels))
            assert got == pytest.approx(want_t, abs=1e-12)
            done += 1


class TestAggregate:
    def test_single_run_zero_std(self):
        runs = [{"abn": {"acc": 0.8, "sen": 0.7, "spe": 0.9, "auc": 0.85}}]
        report = aggregate_runs(runs)
        assert report.runs == 1
        assert report.means["abn"]["acc"] == 0.8
        assert report.stds["abn"]["acc"] == 0.0

    def test_two_runs_population_std(self):
        runs = [{"t": {"acc": 0.8, "sen": 0.8, "spe": 0.8, "auc": 0.8}},
                {"t": {"acc": 1.0, "sen": 1.0, "spe": 1.0, "auc": 1.0}}]
        report = aggregate_runs(runs)
        assert report.means["t"]["acc"] == pytest.approx(0.9)
        assert report.stds["t"]["acc"] == pytest.approx(0.1)

    def test_five_runs_direct_recompute(self):
        rng = np.random.default_rng(4)
        runs = []
        for _ in range(5):
            runs.append({"x": {m: float(rng.random()) for m in ("acc", "sen", "spe", "auc")}})
        report = aggregate_runs(runs, config={"note": 1})
        for metric in ("acc", "sen", "spe", "auc"):
            values = [r["x"][metric] for r in runs]
            mean = sum(values) / 5
            var = sum((v - mean) ** 2 for v in values) / 5
            assert report.means["x"][metric] == pytest.approx(mean, abs=1e-12)
            assert report.stds["x"][metric] == pytest.approx(var**0.5, abs=1e-12)

    def test_json_round_trip(self, tmp_path):
        runs = [{"abn": {"acc": 0.5, "sen": 0.5, "spe": 0.5, "auc": 0.5}}]
        report = aggregate_runs(runs, config={"grid_n": 2})
        save_eval_report(report, tmp_path / "r.json")
        back = load_eval_report(tmp_path / "r.json")
        assert back.means == report.means
        assert back.config == {"grid_n": 2}


class TestScoredLabels:
    def test_validation(self):
        with pytest.raises(ValueError):
            ScoredLabels(np.array([0.5, 1.5]), np.array([True, False]))
        with pytest.raises(ValueError):
            ScoredLabels(np.array([0.5]), np.array([True, False]))
        with pytest.raises(ValueError):
            ScoredLabels(np.array([]), np.array([]))
