"""Leave-one-out retrieval metrics: mAP and Rank-N accuracy.

Every stored image queries the rest of the store; rows sharing the
query's patent id are relevant.  Similarities are computed in float64
so independent implementations agree bitwise, and ties are broken by
the lower row index, matching ``retrieval.search``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from patret.retrieval import EmbeddingStore, k_reciprocal_rerank

__all__ = ["MetricsReport", "average_precision", "evaluate", "render_table"]

DEFAULT_RANKS = (1, 5, 20)


@dataclass
class MetricsReport:
    mean_ap: float
    rank_accuracy: dict
    num_queries: int
    gallery_size: int
    protocol: str
    per_query_ap: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mean_ap,
            "rank_accuracy": {str(n): v for n, v in self.rank_accuracy.items()},
            "num_queries": self.num_queries,
            "gallery_size": self.gallery_size,
            "protocol": self.protocol,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def average_precision(relevance, num_relevant: int) -> float:
    """Mean of precision@r over the ranks r holding a relevant item.

    ``relevance`` lists 0/1 flags in ranked order; ``num_relevant`` is
    the total number of relevant gallery items and must be positive.
    """
    if num_relevant < 1:
        raise ValueError("num_relevant must be >= 1; query has no relevant items")
    flags = np.asarray(relevance, dtype=np.float64).reshape(-1)
    if flags.size and not np.isin(flags, (0.0, 1.0)).all():
        raise ValueError("relevance flags must be 0 or 1")
    hits = np.flatnonzero(flags)
    precisions = (np.arange(hits.size, dtype=np.float64) + 1.0) / (hits + 1.0)
    return float(precisions.sum() / num_relevant)


def _ranked_rows(order: np.ndarray, self_row: int) -> np.ndarray:
    return order[order != self_row]


def evaluate(
    store: EmbeddingStore,
    use_rerank: bool = False,
    k1: int = 20,
    k2: int = 6,
    lam: float = 0.3,
    ranks=DEFAULT_RANKS,
) -> MetricsReport:
    """Score the store against itself, excluding each query's own row."""
    labels = np.asarray(store.labels)
    counts = {}
    for lab in store.labels:
        counts[lab] = counts.get(lab, 0) + 1
    singletons = sorted(lab for lab, c in counts.items() if c < 2)
    if singletons:
        raise ValueError(
            "every patent id needs at least 2 images for leave-one-out "
            f"evaluation; offending ids: {', '.join(map(str, singletons))}"
        )

    if use_rerank:
        dist = k_reciprocal_rerank(store, store.vectors, k1=k1, k2=k2, lam=lam)
        keys = dist
        protocol = (
            f"leave-one-out, k-reciprocal rerank (k1={k1}, k2={k2}, lambda={lam})"
        )
    else:
        sims = store.vectors.astype(np.float64) @ store.vectors.astype(np.float64).T
        keys = -sims
        protocol = "leave-one-out, cosine"

    ranks = tuple(sorted(ranks))
    ap_values = []
    rank_hits = {n: 0 for n in ranks}
    for i in range(store.size):
        order = np.argsort(keys[i], kind="stable")
        ranked = _ranked_rows(order, i)
        flags = (labels[ranked] == labels[i]).astype(np.float64)
        ap_values.append(average_precision(flags, int(counts[labels[i]]) - 1))
        first_hit = int(np.flatnonzero(flags)[0]) + 1
        for n in ranks:
            if first_hit <= n:
                rank_hits[n] += 1

    num_q = store.size
    return MetricsReport(
        mean_ap=float(np.mean(ap_values)),
        rank_accuracy={n: rank_hits[n] / num_q for n in ranks},
        num_queries=num_q,
        gallery_size=store.size,
        protocol=protocol,
        per_query_ap=ap_values,
    )


def render_table(reports: dict) -> str:
    """Aligned text table; one row per named report, metrics in percent."""
    if not reports:
        raise ValueError("no reports to render")
    ranks = sorted(next(iter(reports.values())).rank_accuracy)
    headers = ["run", "mAP"] + [f"Rank-{n}" for n in ranks]
    rows = []
    for name, rep in reports.items():
        rows.append(
            [name, f"{100 * rep.mean_ap:.1f}"]
            + [f"{100 * rep.rank_accuracy[n]:.1f}" for n in ranks]
        )
    widths = [
        max(len(headers[c]), *(len(r[c]) for r in rows))
        for c in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(widths[c]) for c, h in enumerate(headers)),
        "  ".join("-" * widths[c] for c in range(len(headers))),
    ]
    for r in rows:
        lines.append("  ".join(r[c].ljust(widths[c]) for c in range(len(headers))))
    return "\n".join(lines)
