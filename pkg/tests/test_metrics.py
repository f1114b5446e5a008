import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import fedseq.metrics as metrics_mod
from fedseq.data_ingest import ClientDataset
from fedseq.metrics import (
    EvalConfig,
    MetricError,
    MetricsReport,
    evaluate,
    exposure_ratio,
    hit_ndcg,
    rank_item,
    sample_negatives,
)
from fedseq.rng import stream

from conftest import tiny_params


class TestRankItem:
    def test_strictly_highest_is_rank_one(self):
        p = tiny_params(n_items=10, dim=4, seed=1)
        seq = [1, 2]
        scores = torch.zeros(11, dtype=torch.float64)
        best = int(torch.argmax(metrics_mod.forward_scores(p, seq)[1:])) + 1
        negs = np.array([i for i in range(1, 11) if i != best][:5])
        assert rank_item(p, seq, best, negs) == 1

    def test_tie_breaks_pessimistically(self, monkeypatch):
        forced = torch.tensor([-np.inf, 5.0, 5.0, 1.0, 0.0], dtype=torch.float64)
        monkeypatch.setattr(metrics_mod, "forward_scores", lambda p, s: forced)
        p = tiny_params(n_items=4, dim=4)
        assert rank_item(p, [1], 1, np.array([2, 3])) == 2  # tied with item 2
        assert rank_item(p, [1], 3, np.array([2, 4])) == 2

    def test_item_in_negatives_rejected(self):
        p = tiny_params()
        with pytest.raises(ValueError):
            rank_item(p, [1, 2], 3, np.array([3, 4]))

    def test_untrained_rank_uniform_mean(self):
        # big catalog, scores are random: rank over 1000 negatives + item is
        # uniform on 1..1001, so the mean over many trials is ~501
        rng = np.random.default_rng(0)
        trials = 10_000
        ranks = np.empty(trials)
        for i in range(trials):
            scores = rng.normal(0, 1, 1001)
            ranks[i] = 1 + (scores[1:] >= scores[0]).sum()
        assert abs(ranks.mean() - 501.0) <= 10.0


class TestHitNdcg:
    def test_perfect_rank(self):
        assert hit_ndcg(1, 10) == (1, 1.0)

    def test_rank_three(self):
        h, n = hit_ndcg(3, 10)
        assert h == 1 and math.isclose(n, 0.5)

    def test_outside_cutoff(self):
        assert hit_ndcg(11, 10) == (0, 0.0)

    @given(st.integers(min_value=1, max_value=5000), st.integers(min_value=1, max_value=100))
    @settings(max_examples=60, deadline=None)
    def test_bounds_and_consistency(self, rank, k):
        h, n = hit_ndcg(rank, k)
        assert h in (0, 1)
        assert 0.0 <= n <= 1.0
        assert n <= h  # ndcg can only be positive on a hit


class TestSampleNegatives:
    def test_without_replacement_and_cap(self):
        rng = stream(0, "s")
        negs = sample_negatives(50, {1, 2, 3}, 1000, rng)
        assert len(negs) == 47  # capped at the pool
        assert len(set(negs.tolist())) == 47
        assert not ({1, 2, 3} & set(negs.tolist()))

    def test_large_catalog_exact_count(self):
        rng = stream(0, "s")
        negs = sample_negatives(5000, {7}, 1000, rng)
        assert len(negs) == 1000 and len(set(negs.tolist())) == 1000

    def test_seeded_stream_reproducible(self):
        a = sample_negatives(5000, {7}, 1000, stream(3, "er", 9, 1))
        b = sample_negatives(5000, {7}, 1000, stream(3, "er", 9, 1))
        assert np.array_equal(a, b)


def _forced_rank_patch(monkeypatch, rank_by_user):
    """Force rank_item to return a preset rank per user via scores."""
    calls = {"user": None}

    def fake_rank(params, seq, item, negatives):
        return rank_by_user[tuple(seq)]

    monkeypatch.setattr(metrics_mod, "rank_item", fake_rank)


class TestExposureRatioAndEvaluate:
    def _clients(self, n=5):
        return [ClientDataset(user=u, train_seq=[u, u + 1], test_item=u + 2) for u in range(1, n + 1)]

    def test_forced_ranks_hand_computed(self, monkeypatch):
        # ranks {1, 3, 11} -> HR@10 = 2/3, NDCG@10 = (1 + 0.5)/3
        p = tiny_params(n_items=30, dim=4)
        clients = self._clients(3)
        ranks = {(1, 2): 1, (2, 3): 3, (3, 4): 11}
        monkeypatch.setattr(
            metrics_mod, "rank_item", lambda params, seq, item, negs: ranks[tuple(seq)]
        )
        report = evaluate(p, clients, [], EvalConfig(), seed=0)
        assert math.isclose(report.hr[10], 2 / 3)
        assert math.isclose(report.ndcg[10], 1.5 / 3)

    def test_exposure_saturation(self, monkeypatch):
        p = tiny_params(n_items=30, dim=4)
        clients = self._clients(5)
        monkeypatch.setattr(metrics_mod, "rank_item", lambda *a: 1)
        er, eligible = exposure_ratio(p, clients, 25, (5, 10), seed=0, cfg=EvalConfig())
        assert er == {5: 1.0, 10: 1.0} and eligible == 5

    def test_exposure_zero_when_never_ranked(self, monkeypatch):
        p = tiny_params(n_items=30, dim=4)
        clients = self._clients(5)
        monkeypatch.setattr(metrics_mod, "rank_item", lambda *a: 31)
        er, _ = exposure_ratio(p, clients, 25, (5, 10, 20, 30), seed=0, cfg=EvalConfig())
        assert all(v == 0.0 for v in er.values())

    def test_eligibility_excludes_history(self, monkeypatch):
        p = tiny_params(n_items=30, dim=4)
        clients = self._clients(5)
        monkeypatch.setattr(metrics_mod, "rank_item", lambda *a: 1)
        # target 3 appears in histories of users 2 ([2,3]) and 3 ([3,4])
        er, eligible = exposure_ratio(p, clients, 3, (5,), seed=0, cfg=EvalConfig())
        assert eligible == 3

    def test_no_eligible_users_is_an_error(self):
        p = tiny_params(n_items=30, dim=4)
        clients = [ClientDataset(user=1, train_seq=[7, 8], test_item=9)]
        with pytest.raises(MetricError):
            exposure_ratio(p, clients, 7, (5,), seed=0, cfg=EvalConfig())

    def test_er_monotone_in_k_on_real_model(self):
        p = tiny_params(n_items=30, dim=8, max_len=6, seed=5)
        clients = [
            ClientDataset(user=u, train_seq=[1 + (u % 5), 6 + (u % 7), 13 + (u % 3)], test_item=2 + (u % 6))
            for u in range(1, 21)
        ]
        report = evaluate(p, clients, [29], EvalConfig(), seed=1)
        ks = sorted(report.er)
        for lo, hi in zip(ks, ks[1:]):
            assert report.er[lo] <= report.er[hi] + 1e-12
        assert report.eligible_users_er == 20

    def test_untrained_er30_near_uniform(self):
        # with a large catalog the untrained ER@30 concentrates near 30/1001
        p = tiny_params(n_items=2000, dim=8, max_len=6, seed=2, init_std=0.02)
        rng = np.random.default_rng(0)
        clients = [
            ClientDataset(user=u, train_seq=list(rng.integers(1, 2001, size=3)), test_item=int(rng.integers(1, 2001)))
            for u in range(1, 301)
        ]
        er, _ = exposure_ratio(p, clients, 999, (30,), seed=3, cfg=EvalConfig())
        expected = 30 / 1001
        assert abs(er[30] - expected) <= 0.035

    def test_evaluate_does_not_mutate_params(self):
        p = tiny_params(n_items=30, dim=4)
        before = {k: v.clone() for k, v in p.tensors().items()}
        evaluate(p, self._clients(4), [25], EvalConfig(), seed=0)
        for k, v in p.tensors().items():
            assert torch.equal(v, before[k])

    def test_report_validation_catches_violations(self):
        r = MetricsReport(er={5: 0.5, 10: 0.2})
        with pytest.raises(MetricError):
            r.validate()
        r2 = MetricsReport(hr={10: 0.2}, ndcg={10: 0.5})
        with pytest.raises(MetricError):
            r2.validate()

    def test_report_json_roundtrip(self):
        r = MetricsReport(hr={10: 0.5}, ndcg={10: 0.25}, er={5: 0.1, 10: 0.2},
                          eligible_users_er=42, evaluated_users=100)
        assert MetricsReport.from_json_dict(r.to_json_dict()) == r
