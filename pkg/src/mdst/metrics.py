"""Ranking and answer-quality metrics.

Retrieval metrics follow the usual visual-dialog conventions: MRR is the mean
reciprocal ground-truth rank, R@k the fraction of rounds ranked within k, Mean
the average rank. NDCG uses linear gains with a 1/log2(1+position) discount,
evaluated at K = number of candidates with positive relevance and normalized
by the ideal ordering.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ContractError


def ranking_metrics(ranks: list[int]) -> dict:
    """MRR, R@{1,5,10} and Mean rank from 1-based ground-truth ranks."""
    if not ranks:
        raise ContractError("no ranks to aggregate")
    n = len(ranks)
    return {
        "mrr": sum(1.0 / r for r in ranks) / n,
        "r@1": sum(r <= 1 for r in ranks) / n,
        "r@5": sum(r <= 5 for r in ranks) / n,
        "r@10": sum(r <= 10 for r in ranks) / n,
        "mean": sum(ranks) / n,
    }


def compute_ndcg(ranking: list[int], relevance: list[float]) -> float:
    """NDCG of a submitted candidate ordering.

    ``ranking`` lists candidate indices best-first (a permutation of the
    candidate set); ``relevance`` holds per-candidate gains in [0,1]. Rounds
    whose relevance is all zero are undefined and must be excluded upstream.
    """
    if sorted(ranking) != list(range(len(relevance))):
        raise ContractError("ranking must be a permutation of candidate indices")
    k = sum(1 for r in relevance if r > 0)
    if k == 0:
        raise ContractError("NDCG undefined for all-zero relevance")
    dcg = sum(relevance[ranking[pos]] / math.log2(pos + 2) for pos in range(k))
    ideal = sorted(relevance, reverse=True)
    idcg = sum(ideal[pos] / math.log2(pos + 2) for pos in range(k))
    return dcg / idcg


@dataclass
class MetricsReport:
    """Aggregated evaluation metrics with per-dialog breakdowns."""

    mrr: float = 0.0
    r_at_1: float = 0.0
    r_at_5: float = 0.0
    r_at_10: float = 0.0
    mean_rank: float = 0.0
    ndcg: float | None = None
    jacc: float | None = None
    avg_len: float | None = None
    n_rounds: int = 0
    n_ndcg_rounds: int = 0
    n_skipped: int = 0
    per_dialog: list[dict] = field(default_factory=list)

    COLUMNS = ["MRR", "R@1", "R@5", "R@10", "Mean", "NDCG"]

    def row(self) -> list:
        vals = [self.mrr, self.r_at_1, self.r_at_5, self.r_at_10, self.mean_rank,
                self.ndcg]
        return ["" if v is None else round(v, 4) for v in vals]

    def to_json(self) -> dict:
        payload = {
            "mrr": self.mrr, "r@1": self.r_at_1, "r@5": self.r_at_5,
            "r@10": self.r_at_10, "mean": self.mean_rank, "ndcg": self.ndcg,
            "jacc": self.jacc, "avg_len": self.avg_len,
            "n_rounds": self.n_rounds, "n_ndcg_rounds": self.n_ndcg_rounds,
            "n_skipped": self.n_skipped, "per_dialog": self.per_dialog,
        }
        return payload

    def to_table(self) -> str:
        """Aligned text table in the conventional column order."""
        header = self.COLUMNS
        row = [str(v) for v in self.row()]
        widths = [max(len(h), len(v)) for h, v in zip(header, row)]
        line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
        vals = "  ".join(v.ljust(w) for v, w in zip(row, widths))
        return line + "\n" + vals

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def aggregate_report(entries: list[dict], n_skipped: int = 0) -> MetricsReport:
    """Build a MetricsReport from per-round entries with keys
    image_id / round / rank / optional ndcg."""
    ranks = [e["rank"] for e in entries]
    base = ranking_metrics(ranks)
    ndcg_vals = [e["ndcg"] for e in entries if e.get("ndcg") is not None]
    report = MetricsReport(
        mrr=base["mrr"], r_at_1=base["r@1"], r_at_5=base["r@5"],
        r_at_10=base["r@10"], mean_rank=base["mean"],
        ndcg=sum(ndcg_vals) / len(ndcg_vals) if ndcg_vals else None,
        n_rounds=len(ranks), n_ndcg_rounds=len(ndcg_vals),
        n_skipped=n_skipped, per_dialog=entries,
    )
    return report
