"""Initial retrieval, retrieval metrics and non-learned re-ranking baselines."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .affinity import heading_similarity
from .errors import DataError, NoPositivesError, ParameterError
from .tensor import l2_normalize_rows

DEFAULT_KS = (1, 5, 10, 20)


@dataclass
class RetrievalContext:
    """A query and its ranked candidates.

    ``index`` holds the candidates' row positions in the database arrays;
    ``ids`` their record ids. Scores are non-increasing for an initial
    ranking; re-rankers return a new context with their own scores.
    """

    query_id: int
    ids: np.ndarray
    scores: np.ndarray
    index: np.ndarray
    L: int = 0

    @property
    def K(self) -> int:
        return len(self.ids)

    def reorder(self, order: np.ndarray, scores: np.ndarray | None = None) -> "RetrievalContext":
        order = np.asarray(order, dtype=np.int64)
        new_scores = self.scores[order] if scores is None else np.asarray(scores)[order]
        return replace(self, ids=self.ids[order], scores=new_scores, index=self.index[order])


def _topk_order(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the top-``k`` scores, ties broken by ascending id (exact)."""
    n = scores.size
    if k >= n:
        cand = np.arange(n)
    else:
        thresh = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= thresh)
    order = cand[np.lexsort((ids[cand], -scores[cand]))]
    return order[:k]


def initial_retrieve(query_desc: np.ndarray, db_desc: np.ndarray, db_ids: np.ndarray, K: int,
                     query_id: int = -1, exclude: np.ndarray | None = None, L: int = 0,
                     normalized: bool = False) -> RetrievalContext:
    """Exhaustive cosine top-``K`` of one query against the database.

    ``exclude`` is a boolean mask over database rows removed before ranking
    (e.g. the query's own session). ``K`` larger than the remaining database
    is clipped with a warning.
    """
    db_ids = np.asarray(db_ids)
    q = np.asarray(query_desc, dtype=np.float64)
    db = np.asarray(db_desc)
    if not normalized:
        q = q / max(np.linalg.norm(q), 1e-12)
        db = l2_normalize_rows(np.asarray(db, dtype=np.float64))
    scores = db @ q
    rows = np.arange(len(db_ids))
    if exclude is not None:
        keep = ~np.asarray(exclude, dtype=bool)
        rows, scores = rows[keep], scores[keep]
    if K > rows.size:
        warnings.warn(f"K={K} exceeds database size {rows.size}; clipping", stacklevel=2)
        K = rows.size
    order = _topk_order(scores, db_ids[rows], K)
    idx = rows[order]
    return RetrievalContext(query_id, db_ids[idx], np.clip(scores[order], -1.0, 1.0), idx, min(L, K))


def retrieve_all(query_desc: np.ndarray, query_ids: Sequence[int], db_desc: np.ndarray,
                 db_ids: np.ndarray, K: int, query_sessions: Sequence | None = None,
                 db_sessions: np.ndarray | None = None, L: int = 0,
                 exclude_self: bool = False) -> list[RetrievalContext]:
    """Initial retrieval for a batch of queries with optional session exclusion."""
    qn = l2_normalize_rows(np.asarray(query_desc, dtype=np.float64))
    dbn = l2_normalize_rows(np.asarray(db_desc, dtype=np.float64))
    db_ids = np.asarray(db_ids)
    out = []
    for i, qid in enumerate(query_ids):
        exclude = None
        if query_sessions is not None and db_sessions is not None:
            exclude = np.asarray(db_sessions) == query_sessions[i]
        if exclude_self:
            self_mask = db_ids == qid
            exclude = self_mask if exclude is None else exclude | self_mask
        out.append(initial_retrieve(qn[i], dbn, db_ids, K, query_id=qid, exclude=exclude,
                                    L=L, normalized=True))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def average_precision_at_k(ranked: Sequence[int], relevant: set, k: int) -> float:
    """AP@k normalized by ``min(R, k)`` with ``R`` the total number of relevant items."""
    return ap_from_hits([rid in relevant for rid in list(ranked)[:k]], len(relevant), k)


def ap_from_hits(hits: Sequence[bool], R: int, k: int) -> float:
    """AP@k from per-rank relevance flags and the total relevant count ``R``."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if R <= 0:
        raise NoPositivesError("AP@k is undefined without relevant items")
    found, total = 0, 0.0
    for i, h in enumerate(list(hits)[:k], start=1):
        if h:
            found += 1
            total += found / i
    return total / min(R, k)


def _evaluable(rankings, labels):
    pairs = [(r, set(l)) for r, l in zip(rankings, labels) if len(l) > 0]
    if not pairs:
        raise NoPositivesError("no query has a relevant database item")
    return pairs


def map_at_k(rankings: Sequence[Sequence[int]], labels: Sequence[set], k: int) -> float:
    pairs = _evaluable(rankings, labels)
    return float(np.mean([average_precision_at_k(r, l, k) for r, l in pairs]))


def recall_at_k(rankings: Sequence[Sequence[int]], labels: Sequence[set], k: int) -> float:
    """Fraction of queries with at least one relevant item in the top ``k``."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    pairs = _evaluable(rankings, labels)
    return float(np.mean([any(x in l for x in list(r)[:k]) for r, l in pairs]))


@dataclass
class MetricsReport:
    map: dict[int, float]
    recall: dict[int, float]
    queries: int
    excluded: int
    config_hash: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mAP": {str(k): v for k, v in sorted(self.map.items())},
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "queries": self.queries,
            "excluded_without_positives": self.excluded,
            "config_hash": self.config_hash,
            "seed": self.seed,
            **self.extra,
        }


def evaluate(rankings: Mapping[int, Sequence[int]], labels: Mapping[int, set],
             ks: Sequence[int] = DEFAULT_KS, config_hash: str = "", seed: int | None = None) -> MetricsReport:
    """mAP@k and Recall@k over queries that have at least one relevant item.

    Queries are iterated in sorted id order so the result does not depend on
    mapping order.
    """
    qids = sorted(rankings)
    ranked = [list(rankings[q]) for q in qids]
    rel = [set(labels.get(q, ())) for q in qids]
    n_ok = sum(1 for l in rel if l)
    return MetricsReport(
        map={k: map_at_k(ranked, rel, k) for k in ks},
        recall={k: recall_at_k(ranked, rel, k) for k in ks},
        queries=n_ok,
        excluded=len(qids) - n_ok,
        config_hash=config_hash,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# query expansion
# ---------------------------------------------------------------------------

def _expand(context: RetrievalContext, query_desc: np.ndarray, cand_desc: np.ndarray,
            weights: np.ndarray) -> RetrievalContext:
    q = np.asarray(query_desc, dtype=np.float64)
    q = q / max(np.linalg.norm(q), 1e-12)
    cand = l2_normalize_rows(np.asarray(cand_desc, dtype=np.float64))
    n = weights.size
    expanded = q + weights @ cand[:n]
    expanded /= max(np.linalg.norm(expanded), 1e-12)
    scores = np.clip(cand @ expanded, -1.0, 1.0)
    return context.reorder(np.argsort(-scores, kind="stable"), scores)


def aqe(context: RetrievalContext, query_desc, cand_desc, n_qe: int = 10) -> RetrievalContext:
    """Average query expansion: the query plus its top ``n_qe`` candidates, equal weights."""
    n = _check_nqe(context, n_qe)
    if n == 0:
        return context
    return _expand(context, query_desc, cand_desc, np.ones(n))


def alpha_qe(context: RetrievalContext, query_desc, cand_desc, n_qe: int = 10,
             alpha: float = 3.0) -> RetrievalContext:
    """Expansion weighted by ``max(s, 0) ** alpha`` of the initial similarity."""
    n = _check_nqe(context, n_qe)
    if n == 0:
        return context
    s = np.clip(np.asarray(context.scores[:n], dtype=np.float64), 0.0, None)
    return _expand(context, query_desc, cand_desc, s ** alpha)


def aqe_wd(context: RetrievalContext, query_desc, cand_desc, n_qe: int = 10) -> RetrievalContext:
    """Expansion with decreasing rank weights ``(n_qe - rank) / n_qe``."""
    n = _check_nqe(context, n_qe)
    if n == 0:
        return context
    return _expand(context, query_desc, cand_desc, (n - np.arange(n)) / n)


def _check_nqe(context, n_qe) -> int:
    if n_qe < 0 or n_qe > context.K:
        raise ParameterError(f"n_qe must lie in [0, K={context.K}], got {n_qe}")
    return int(n_qe)


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------

def heading_filter(context: RetrievalContext, query_heading: float, cand_headings: np.ndarray,
                   max_deg: float = 30.0) -> RetrievalContext:
    """Drop candidates whose wrapped heading differs from the query by more than ``max_deg``."""
    h = np.asarray(cand_headings, dtype=np.float64)
    if not np.isfinite(query_heading) or np.any(~np.isfinite(h)):
        raise DataError("heading filter needs query and candidate headings")
    # recover the angular difference from the heading similarity
    diff = (1.0 - heading_similarity(h, query_heading)) * math.pi / 2.0
    keep = np.flatnonzero(diff <= math.radians(max_deg) + 1e-12)
    return context.reorder(keep)


def radio_filter(context: RetrievalContext, query_radio: np.ndarray, cand_radio: np.ndarray,
                 fraction: float = 0.1, beta: float = 2.5e-4) -> RetrievalContext:
    """Keep the ``fraction`` of candidates with the highest radio affinity to the query.

    Applied to a full-database context this is the database-level radio
    filter; survivors keep their visual order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    q = np.asarray(query_radio, dtype=np.float64)
    cand = np.asarray(cand_radio, dtype=np.float64)
    if q.ndim != 1 or cand.ndim != 2 or cand.shape[1] != q.size:
        raise DataError("radio filter needs matching radio descriptors for query and candidates")
    s = 1.0 - beta * np.linalg.norm(cand - q[None, :], axis=1)
    n_keep = max(1, int(math.ceil(fraction * context.K)))
    by_radio = np.lexsort((np.arange(context.K), -s))[:n_keep]
    return context.reorder(np.sort(by_radio))
