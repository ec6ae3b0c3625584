"""Class prototypes from the one labeled template, and similarity propagation.

The template's labels are pulled down to the feature grid, each class is
summarized by the normalized masked mean of its cell features, and unlabeled
volumes receive initial pseudo-labels by cosine similarity to those
prototypes, upsampled back to full resolution and passed through a per-voxel
softmax/argmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import FeatureGrid
from .volume import (
    LabelVolume,
    ProbVolume,
    Shape3,
    nearest_downsample_labels,
    nearest_upsample_maps,
)

__all__ = [
    "EPS",
    "PrototypeSet",
    "compute_prototypes",
    "similarity_maps",
    "argmax_softmax",
    "initial_pseudo_label",
]

EPS = 1e-8

# Sentinel similarity for classes absent from the template grid: never wins a
# softmax/argmax and contributes exactly zero probability.
NEG_INF = float("-inf")


@dataclass(frozen=True)
class PrototypeSet:
    """One unit-norm feature vector per present class; absent rows are zero."""

    num_classes: int
    present: np.ndarray  # (num_classes,) bool
    vectors: np.ndarray  # (num_classes, channels) float64

    def __post_init__(self):
        present = np.ascontiguousarray(np.asarray(self.present, dtype=bool))
        vectors = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        if present.shape != (self.num_classes,):
            raise ValueError("present mask shape mismatch")
        if vectors.ndim != 2 or vectors.shape[0] != self.num_classes:
            raise ValueError("prototype matrix shape mismatch")
        if not present.any():
            raise ValueError("no class present in prototype set")
        norms = np.linalg.norm(vectors[present], axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("present prototypes must be unit norm")
        if vectors[~present].any():
            raise ValueError("absent prototype rows must be zero")
        present.setflags(write=False)
        vectors.setflags(write=False)
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "vectors", vectors)

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]


def compute_prototypes(grid: FeatureGrid, labels: LabelVolume) -> PrototypeSet:
    """Normalized masked mean of cell features per class on the label's grid.

    Labels are nearest-downsampled to the grid shape first.  A class with no
    cells is marked absent; a present class whose mean feature is exactly the
    zero vector carries no direction and is treated as absent too.
    """
    cell_labels = nearest_downsample_labels(labels, grid.grid_shape)
    feats = grid.data.astype(np.float64).reshape(grid.channels, -1)
    flat = cell_labels.data.reshape(-1)

    num_classes = labels.num_classes
    present = np.zeros(num_classes, dtype=bool)
    vectors = np.zeros((num_classes, grid.channels), dtype=np.float64)
    for c in range(num_classes):
        mask = flat == c
        count = int(mask.sum())
        if count == 0:
            continue
        mean = feats[:, mask].sum(axis=1) / (count + EPS)
        norm = float(np.linalg.norm(mean))
        if norm == 0.0:
            continue
        present[c] = True
        vectors[c] = mean / norm
    if not present.any():
        raise ValueError("template grid yields no usable class prototype")
    return PrototypeSet(num_classes=num_classes, present=present, vectors=vectors)


def similarity_maps(grid: FeatureGrid, protos: PrototypeSet) -> np.ndarray:
    """Cosine similarity of every cell to every prototype.

    Returns (num_classes, d', h', w') float64.  Cells with zero-norm features
    score 0 against every present class; absent classes are -inf everywhere.
    """
    feats = grid.data.astype(np.float64).reshape(grid.channels, -1)
    norms = np.linalg.norm(feats, axis=0)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = feats / safe
    sims = protos.vectors @ unit  # (num_classes, cells)
    sims[:, norms == 0.0] = 0.0
    sims[~protos.present, :] = NEG_INF
    return sims.reshape((protos.num_classes,) + grid.grid_shape.as_tuple())


def argmax_softmax(scores: np.ndarray, num_classes: int, shape: Shape3) -> tuple[LabelVolume, ProbVolume]:
    """Per-voxel softmax over class scores, then argmax with lowest-index ties."""
    flat = scores.reshape(num_classes, -1)
    peak = flat.max(axis=0)
    if not np.isfinite(peak).all():
        raise ValueError("every class scored -inf for some voxel")
    stable = flat - peak
    expd = np.exp(stable)
    probs = expd / expd.sum(axis=0)
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    return (
        LabelVolume(shape, num_classes, labels),
        ProbVolume(shape, num_classes, probs.reshape((num_classes,) + shape.as_tuple())),
    )


def initial_pseudo_label(
    grid: FeatureGrid, protos: PrototypeSet, vol_shape: Shape3
) -> tuple[LabelVolume, ProbVolume]:
    """Propagate template prototypes onto one unlabeled volume.

    Similarities are computed on the cell grid, nearest-upsampled to the full
    volume shape, and only then softmaxed, so probabilities are defined at
    voxel resolution.
    """
    if grid.channels != protos.channels:
        raise ValueError(
            f"grid has {grid.channels} channels, prototypes have {protos.channels}"
        )
    sims = similarity_maps(grid, protos)
    full = nearest_upsample_maps(sims, vol_shape)
    return argmax_softmax(full, protos.num_classes, vol_shape)
