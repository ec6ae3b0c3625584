"""KNN pseudo-label refinement: uncertain samples inherit votes from certain ones.

For each uncertain sample, the nearest certain samples in global-feature space
vote voxel-wise on its labels, weighted by clipped cosine similarity.  Certain
samples keep their labels untouched, and the labeled template votes with its
ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import GlobalFeature
from .uncertainty import Partition
from .volume import LabelVolume, nearest_resample_labels

__all__ = [
    "EPS",
    "Neighbor",
    "NeighborSet",
    "knn_certain_neighbors",
    "refine_pseudo_label",
    "refine_all",
]

EPS = 1e-8


@dataclass(frozen=True)
class Neighbor:
    vol_id: str
    weight: float      # max(0, cosine)
    similarity: float  # raw cosine, kept for ordering and audit


@dataclass(frozen=True)
class NeighborSet:
    """Certain neighbors of one query, descending similarity, ties by id."""

    query_id: str
    neighbors: tuple[Neighbor, ...]

    def __post_init__(self):
        if not self.neighbors:
            raise ValueError("neighbor set is empty")
        order = [(-n.similarity, n.vol_id) for n in self.neighbors]
        if order != sorted(order):
            raise ValueError("neighbors are not ordered by similarity")
        object.__setattr__(self, "neighbors", tuple(self.neighbors))


def knn_certain_neighbors(
    features: dict[str, GlobalFeature], certain: frozenset[str] | set[str], query_id: str, k: int
) -> NeighborSet:
    """The min(k, |certain|) most similar certain samples to the query."""
    if k < 1:
        raise ValueError(f"k={k} must be >= 1")
    if not certain:
        raise ValueError("certain set is empty")
    if query_id in certain:
        raise ValueError(f"query {query_id!r} is already certain")
    q = features[query_id].vector
    scored = []
    for vol_id in sorted(certain):
        sim = float(q @ features[vol_id].vector)
        scored.append(Neighbor(vol_id=vol_id, weight=max(0.0, sim), similarity=sim))
    scored.sort(key=lambda n: (-n.similarity, n.vol_id))
    return NeighborSet(query_id=query_id, neighbors=tuple(scored[: min(k, len(scored))]))


def refine_pseudo_label(
    neighbors: NeighborSet, raw_labels: dict[str, LabelVolume]
) -> LabelVolume:
    """Weighted voxel-wise vote of the neighbors' labels.

    Neighbor labels of a different shape are nearest-resampled to the query's
    shape first.  If every weight is (numerically) zero the query keeps its
    own raw labels.
    """
    query = raw_labels[neighbors.query_id]
    shape = query.shape
    num_classes = query.num_classes

    total = sum(n.weight for n in neighbors.neighbors)
    if total < EPS:
        return query

    scores = np.zeros((num_classes,) + shape.as_tuple(), dtype=np.float64)
    for n in neighbors.neighbors:
        lab = raw_labels[n.vol_id]
        if lab.num_classes != num_classes:
            raise ValueError(
                f"neighbor {n.vol_id!r} has {lab.num_classes} classes, query has {num_classes}"
            )
        lab = nearest_resample_labels(lab, shape)
        for c in range(num_classes):
            scores[c][lab.data == c] += n.weight
    scores /= total + EPS
    refined = np.argmax(scores, axis=0).astype(np.uint8)
    return LabelVolume(shape, num_classes, refined)


def refine_all(
    raw: dict[str, LabelVolume],
    partition: Partition,
    features: dict[str, GlobalFeature],
    k: int,
) -> tuple[dict[str, LabelVolume], list[dict]]:
    """Refine every uncertain sample; certain ones pass through untouched.

    ``raw`` must cover every partitioned id, including the labeled template
    (whose entry is its ground truth).  Returns the refreshed pseudo-label set
    for the pool plus an audit trail of neighbor choices.
    """
    missing = (partition.certain | partition.uncertain) - raw.keys()
    if missing:
        raise ValueError(f"raw labels missing for {sorted(missing)}")

    refined: dict[str, LabelVolume] = {}
    audit: list[dict] = []
    for vol_id in sorted(partition.certain):
        if vol_id != partition.labeled_id:
            refined[vol_id] = raw[vol_id]
    for vol_id in sorted(partition.uncertain):
        nbrs = knn_certain_neighbors(features, partition.certain, vol_id, k)
        refined[vol_id] = refine_pseudo_label(nbrs, raw)
        audit.append(
            {
                "id": vol_id,
                "neighbors": [
                    {"id": n.vol_id, "weight": n.weight, "similarity": n.similarity}
                    for n in nbrs.neighbors
                ],
            }
        )
    return refined, audit
