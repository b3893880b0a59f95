import math

import pytest

from mdst.errors import ContractError
from mdst.judge import compute_jacc_avglen, JudgedDialog, JudgedRound
from mdst.metrics import (MetricsReport, aggregate_report, compute_ndcg,
                          ranking_metrics)

from oracles import (mean_rank_reference, mrr_reference, ndcg_reference,
                     recall_at_k_reference)


def test_perfect_ranks():
    m = ranking_metrics([1, 1, 1])
    assert m["mrr"] == 1.0
    assert m["r@1"] == 1.0
    assert m["mean"] == 1.0


def test_mrr_hand_example():
    m = ranking_metrics([1, 2, 4])
    assert m["mrr"] == pytest.approx((1 + 0.5 + 0.25) / 3, abs=1e-12)
    assert m["mrr"] == pytest.approx(0.5833333333, abs=1e-9)


def test_report_column_order_matches_convention():
    assert MetricsReport.COLUMNS == ["MRR", "R@1", "R@5", "R@10", "Mean", "NDCG"]
    report = aggregate_report([{"image_id": 1, "round": 1, "rank": 2}])
    table = report.to_table()
    header = table.splitlines()[0].split()
    assert header == ["MRR", "R@1", "R@5", "R@10", "Mean", "NDCG"]


def test_ndcg_ideal_ranking_is_one():
    relevance = [0.0, 1.0, 0.5, 0.0]
    ranking = [1, 2, 0, 3]
    assert compute_ndcg(ranking, relevance) == pytest.approx(1.0, abs=1e-12)


def test_ndcg_hand_example():
    # relevance {a: 1.0, b: 0.5, rest 0}, submitted order (b, a, ...)
    relevance = [1.0, 0.5] + [0.0] * 98
    ranking = [1, 0] + list(range(2, 100))
    expected = (0.5 / math.log2(2) + 1.0 / math.log2(3)) / \
               (1.0 / math.log2(2) + 0.5 / math.log2(3))
    got = compute_ndcg(ranking, relevance)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.8597, abs=1e-4)


def test_ndcg_invariant_to_irrelevant_tail_permutation(rng):
    relevance = [0.8, 0.0, 0.3, 0.0, 0.0, 0.1]
    ranking = [2, 0, 5, 1, 3, 4]
    base = compute_ndcg(ranking, relevance)
    # permute candidates beyond position K among the zero-relevance tail
    permuted = [2, 0, 5, 4, 1, 3]
    assert compute_ndcg(permuted, relevance) == pytest.approx(base, abs=1e-12)


def test_ndcg_all_zero_relevance_is_undefined():
    with pytest.raises(ContractError):
        compute_ndcg([0, 1, 2], [0.0, 0.0, 0.0])


def test_ndcg_requires_permutation():
    with pytest.raises(ContractError):
        compute_ndcg([0, 0, 1], [1.0, 0.0, 0.0])


def test_metric_oracle_equivalence_200_instances(rng):
    for _ in range(200):
        n = int(rng.integers(1, 40))
        ranks = [int(r) for r in rng.integers(1, 101, size=n)]
        m = ranking_metrics(ranks)
        assert m["mrr"] == pytest.approx(mrr_reference(ranks), abs=1e-9)
        for k in (1, 5, 10):
            assert m[f"r@{k}"] == pytest.approx(
                recall_at_k_reference(ranks, k), abs=1e-9)
        assert m["mean"] == pytest.approx(mean_rank_reference(ranks), abs=1e-9)

        n_cand = int(rng.integers(2, 30))
        relevance = rng.choice([0.0, 0.0, 0.25, 0.5, 1.0],
                               size=n_cand).tolist()
        if not any(r > 0 for r in relevance):
            relevance[int(rng.integers(n_cand))] = 1.0
        ranking = rng.permutation(n_cand).tolist()
        assert compute_ndcg(ranking, relevance) == pytest.approx(
            ndcg_reference(ranking, relevance), abs=1e-9)


def test_rank_improvement_monotonicity(rng):
    # improving any single round's rank never hurts MRR or R@k and never
    # raises Mean
    for _ in range(50):
        n = int(rng.integers(2, 20))
        ranks = [int(r) for r in rng.integers(2, 50, size=n)]
        base = ranking_metrics(ranks)
        i = int(rng.integers(n))
        improved = list(ranks)
        improved[i] = improved[i] - 1
        better = ranking_metrics(improved)
        assert better["mrr"] >= base["mrr"]
        for k in (1, 5, 10):
            assert better[f"r@{k}"] >= base[f"r@{k}"]
        assert better["mean"] <= base["mean"]


def test_report_invariants(rng):
    ranks = [int(r) for r in rng.integers(1, 101, size=60)]
    report = aggregate_report([{"image_id": i, "round": 1, "rank": r}
                               for i, r in enumerate(ranks)])
    assert 0 <= report.r_at_1 <= report.r_at_5 <= report.r_at_10 <= 1
    assert report.mean_rank >= 1
    assert 0 < report.mrr <= 1


def test_empty_ranks_rejected():
    with pytest.raises(ContractError):
        ranking_metrics([])


# --- JACC / AvgLen bookkeeping -------------------------------------------------

def judged_with(verdicts, answers=None):
    answers = answers or ["yes"] * len(verdicts)
    rounds = [JudgedRound(question="q ?", generated=a, gold="yes", verdict=v)
              for v, a in zip(verdicts, answers)]
    return [JudgedDialog(image_id=0, rounds=rounds)]


def test_jacc_published_bookkeeping():
    # 798 correct of 1000 -> 79.8
    judged = judged_with([True] * 798 + [False] * 202)
    jacc, _ = compute_jacc_avglen(judged)
    assert jacc == pytest.approx(79.8, abs=1e-12)


def test_jacc_all_correct():
    jacc, _ = compute_jacc_avglen(judged_with([True] * 10))
    assert jacc == 100.0


def test_avg_len_counts_content_tokens():
    judged = judged_with([True, True], answers=["just 1", "yes"])
    _, avg_len = compute_jacc_avglen(judged)
    assert avg_len == pytest.approx(1.5, abs=1e-12)


def test_avg_len_ignores_punctuation_tokens():
    judged = judged_with([True], answers=["on the left ."])
    _, avg_len = compute_jacc_avglen(judged)
    assert avg_len == 3.0
