"""
Retrieval Evaluation

Recall@K, R-Precision and mAP over pooled descriptors, plus k-NN accuracy.

mAP is the interpolation-free mean of precision@rank taken at every positive
rank (not the eleven-point interpolated variant). Rankings break similarity
ties by ascending id so every metric is deterministic.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.preprocessing import normalize

from config.hardware_profiles import worker_count
from ml.errors import InvalidArgument
from utils.console import warn


METRICS = ('cosine', 'euclidean')


@dataclass(frozen=True)
class DescriptorSet:
    """M descriptors of width D with labels and unique ids"""
    descriptors: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    id_rank: np.ndarray = field(repr=False, compare=False, default=None)

    @classmethod
    def create(cls, descriptors, labels, ids=None) -> 'DescriptorSet':
        descriptors = np.asarray(descriptors, dtype=np.float64)
        if descriptors.ndim != 2:
            raise InvalidArgument(f"descriptors must be an M x D matrix, got shape {descriptors.shape}")
        count = descriptors.shape[0]
        labels = np.asarray(labels).astype(np.int64)
        ids = np.arange(count) if ids is None else np.asarray(ids)

        if count < 2:
            raise InvalidArgument(f"a descriptor set needs at least 2 items, got {count}")
        if labels.shape != (count,) or ids.shape != (count,):
            raise InvalidArgument(f"expected {count} labels and ids, got {labels.shape[0]} and {ids.shape[0]}")
        if len(np.unique(ids)) != count:
            raise InvalidArgument("descriptor ids must be unique")
        if not np.all(np.isfinite(descriptors)):
            raise InvalidArgument("descriptors contain non-finite values")
        # ids may be strings; ties are broken on their sort position
        id_rank = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
        return cls(descriptors=descriptors, labels=labels, ids=ids, id_rank=id_rank)

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass
class QueryRecord:
    query_id: object
    label: int
    positives: int
    first_positive_rank: int
    r_precision: float
    average_precision: float


@dataclass
class RetrievalReport:
    recall_at_k: Dict[int, float]
    r_precision: float
    map_score: float
    queries: List[QueryRecord] = field(default_factory=list)
    skipped_queries: List[object] = field(default_factory=list)
    knn_accuracy: Optional[float] = None

    def to_dict(self) -> Dict:
        data = {
            'recall_at_k': {str(k): v for k, v in self.recall_at_k.items()},
            'r_precision': self.r_precision,
            'map': self.map_score,
            'evaluated_queries': len(self.queries),
            'skipped_queries': [_plain(q) for q in self.skipped_queries],
            'per_query': [
                {
                    'id': _plain(q.query_id),
                    'label': q.label,
                    'positives': q.positives,
                    'first_positive_rank': q.first_positive_rank,
                    'r_precision': q.r_precision,
                    'average_precision': q.average_precision,
                }
                for q in self.queries
            ],
        }
        if self.knn_accuracy is not None:
            data['knn_accuracy'] = self.knn_accuracy
        return data


def _plain(value):
    return value.item() if isinstance(value, np.generic) else value


def _scores(query: np.ndarray, gallery: np.ndarray, metric: str) -> np.ndarray:
    """Larger is better: cosine similarity or negated euclidean distance"""
    if metric == 'cosine':
        if not np.any(query):
            raise InvalidArgument("cosine ranking needs a nonzero query vector")
        if not np.all(np.any(gallery, axis=1)):
            raise InvalidArgument("cosine ranking needs nonzero gallery vectors")
        return normalize(gallery) @ normalize(query[None, :])[0]
    if metric == 'euclidean':
        return -cdist(query[None, :], gallery)[0]
    raise InvalidArgument(f"unknown metric '{metric}' (expected one of {', '.join(METRICS)})")


def _ranking(query: np.ndarray, gallery: DescriptorSet, metric: str) -> np.ndarray:
    """Gallery positions, best first, ties by ascending id"""
    if query.shape != (gallery.dim,):
        raise InvalidArgument(f"query has {query.shape[-1]} dims, gallery has {gallery.dim}")
    scores = _scores(query, gallery.descriptors, metric)
    return np.lexsort((gallery.id_rank, -scores))


def rank_gallery(query, gallery: DescriptorSet, metric: str = 'cosine') -> List:
    """Gallery ids ordered by similarity (cosine) or distance (euclidean)"""
    order = _ranking(np.asarray(query, dtype=np.float64), gallery, metric)
    return [_plain(i) for i in gallery.ids[order]]


def average_precision(relevant: np.ndarray) -> float:
    """Mean of precision@rank over the positive ranks of a ranked relevance vector"""
    hits = np.cumsum(relevant)
    positives = hits[-1] if relevant.size else 0
    if positives == 0:
        return 0.0
    precision = hits / np.arange(1, relevant.size + 1)
    return float(precision[relevant].sum() / positives)


def _is_same_set(a: DescriptorSet, b: DescriptorSet) -> bool:
    return a is b or (
        a.descriptors.shape == b.descriptors.shape
        and np.array_equal(a.ids, b.ids)
        and np.array_equal(a.descriptors, b.descriptors)
    )


def _ranked_relevance(q: int, queries: DescriptorSet, gallery: DescriptorSet, metric: str,
                      self_exclude: bool) -> Tuple[np.ndarray, np.ndarray]:
    order = _ranking(queries.descriptors[q], gallery, metric)
    if self_exclude:
        order = order[gallery.ids[order] != queries.ids[q]]
    return gallery.labels[order] == queries.labels[q], gallery.labels[order]


def _resolve_self_exclude(queries: DescriptorSet, gallery: DescriptorSet, self_exclude: bool) -> None:
    if _is_same_set(queries, gallery) and not self_exclude:
        raise InvalidArgument("queries and gallery are the same set: self_exclude must be true")
    if queries.dim != gallery.dim:
        raise InvalidArgument(f"query descriptors have {queries.dim} dims, gallery has {gallery.dim}")


def evaluate(queries: DescriptorSet, gallery: DescriptorSet, ks: Sequence[int] = (1,),
             self_exclude: bool = False, metric: str = 'cosine') -> RetrievalReport:
    """
    Macro-averaged Recall@K, R-Precision and mAP

    Queries whose label has no gallery item (after self exclusion) are skipped
    and listed in the report.
    """
    _resolve_self_exclude(queries, gallery, self_exclude)
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 1:
        raise InvalidArgument(f"ks must be positive integers, got {ks}")

    def one_query(q: int):
        relevant, _ = _ranked_relevance(q, queries, gallery, metric, self_exclude)
        positives = int(relevant.sum())
        if positives == 0:
            return None
        first = int(np.argmax(relevant)) + 1
        return QueryRecord(
            query_id=_plain(queries.ids[q]),
            label=int(queries.labels[q]),
            positives=positives,
            first_positive_rank=first,
            r_precision=float(relevant[:positives].sum() / positives),
            average_precision=average_precision(relevant),
        )

    with ThreadPoolExecutor(max_workers=worker_count()) as executor:
        results = list(executor.map(one_query, range(len(queries))))

    records = [r for r in results if r is not None]
    skipped = [_plain(queries.ids[q]) for q, r in enumerate(results) if r is None]
    if skipped:
        warn(f"{len(skipped)} queries have no same-label gallery item and were skipped")
    if not records:
        raise InvalidArgument("no query has a same-label item in the gallery")

    count = len(records)
    recall = {k: sum(r.first_positive_rank <= k for r in records) / count for k in ks}
    return RetrievalReport(
        recall_at_k=recall,
        r_precision=sum(r.r_precision for r in records) / count,
        map_score=sum(r.average_precision for r in records) / count,
        queries=records,
        skipped_queries=skipped,
    )


def knn_accuracy(queries: DescriptorSet, gallery: DescriptorSet, k: int = 12,
                 self_exclude: bool = False, metric: str = 'cosine') -> float:
    """
    Majority-vote k-NN classification accuracy

    Vote ties go to the tied label whose first neighbour ranks highest.
    """
    if k < 1:
        raise InvalidArgument(f"k must be positive, got {k}")
    _resolve_self_exclude(queries, gallery, self_exclude)

    correct = 0
    for q in range(len(queries)):
        _, ranked_labels = _ranked_relevance(q, queries, gallery, metric, self_exclude)
        neighbours = ranked_labels[:k]
        labels, first_seen, counts = np.unique(neighbours, return_index=True, return_counts=True)
        winner = labels[np.lexsort((first_seen, -counts))[0]]
        correct += int(winner == queries.labels[q])
    return correct / len(queries)
