"""Deterministic patch-statistics features standing in for a pretrained encoder.

Each volume is z-score normalized, partitioned into non-overlapping cubic
patches (edge patches truncated), and every patch is summarized by a fixed
vector of local statistics plus optional normalized patch-center coordinates.
The same grid/global-feature contract also accepts features produced by an
external model, loaded verbatim from array files.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import IntensityVolume, Shape3, load_array

__all__ = [
    "EncoderParams",
    "FeatureGrid",
    "GlobalFeature",
    "extract_feature_grid",
    "global_feature",
    "ingest_external_features",
    "uniform_channel_count",
    "zscore",
    "extract_call_count",
]

BASE_CHANNELS = 8  # mean, std, min, max, median, mean|dd|, mean|dh|, mean|dw|

# Diagnostic counter: number of times the built-in extractor ran in this
# process.  The pipeline freezes it after the initial round to prove that no
# raw volume is re-encoded later.
_extract_calls = 0


def extract_call_count() -> int:
    return _extract_calls


@dataclass(frozen=True)
class EncoderParams:
    patch_size: int = 8  # voxels per grid cell along each axis
    include_position: bool = True
    position_weight: float = 0.25

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError(f"patch_size={self.patch_size} must be >= 2")
        if not np.isfinite(self.position_weight) or self.position_weight < 0:
            raise ValueError("position_weight must be finite and >= 0")

    @property
    def channels(self) -> int:
        return BASE_CHANNELS + (3 if self.include_position else 0)


@dataclass(frozen=True)
class FeatureGrid:
    """Per-cell feature vectors on a coarse grid aligned to a source volume."""

    channels: int
    grid_shape: Shape3
    data: np.ndarray  # (channels, d', h', w') float32
    patch_size: tuple[int, int, int] | None = None  # voxels per cell, per axis

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        data = np.asarray(self.data, dtype=np.float32).reshape(
            (self.channels,) + self.grid_shape.as_tuple()
        )
        if not np.isfinite(data).all():
            raise ValueError("feature grid contains non-finite values")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.patch_size is not None:
            patch = tuple(int(p) for p in self.patch_size)
            if len(patch) != 3 or any(p < 1 for p in patch):
                raise ValueError(f"bad patch_size {self.patch_size!r}")
            object.__setattr__(self, "patch_size", patch)


@dataclass(frozen=True)
class GlobalFeature:
    """Channel-wise average of a grid, L2 normalized; zero vector when degenerate."""

    vector: np.ndarray  # (channels,) float64, unit norm unless degenerate
    degenerate: bool = False

    def __post_init__(self):
        vec = np.ascontiguousarray(np.asarray(self.vector, dtype=np.float64))
        if vec.ndim != 1:
            raise ValueError("global feature must be a 1-D vector")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)


def zscore(data: np.ndarray) -> np.ndarray:
    """Volume-wide z-score in float64; a constant volume maps to all zeros."""
    data = np.asarray(data, dtype=np.float64)
    std = float(data.std())
    if std == 0.0:
        return np.zeros_like(data)
    return (data - float(data.mean())) / std


def _abs_gradients(z: np.ndarray) -> list[np.ndarray]:
    """|central difference| along each axis; axes of extent 1 get zeros."""
    grads = []
    for axis in range(3):
        if z.shape[axis] < 2:
            grads.append(np.zeros_like(z))
        else:
            grads.append(np.abs(np.gradient(z, axis=axis)))
    return grads


def extract_feature_grid(vol: IntensityVolume, params: EncoderParams) -> FeatureGrid:
    """Summarize each patch of ``vol`` into a fixed statistics vector.

    Channel order: mean, population std, min, max, median, then mean absolute
    central difference along d, h, w — all computed on the z-scored volume —
    followed (when enabled) by position_weight * (patch center / axis extent)
    for d, h, w.
    """
    global _extract_calls
    _extract_calls += 1

    p = params.patch_size
    shape = vol.shape.as_tuple()
    grid_shape = Shape3(*(-(-s // p) for s in shape))  # ceil division
    z = zscore(vol.data)
    grads = _abs_gradients(z)

    data = np.empty((params.channels,) + grid_shape.as_tuple(), dtype=np.float64)
    for gd in range(grid_shape.d):
        d0 = gd * p
        for gh in range(grid_shape.h):
            h0 = gh * p
            for gw in range(grid_shape.w):
                w0 = gw * p
                sl = (slice(d0, d0 + p), slice(h0, h0 + p), slice(w0, w0 + p))
                patch = z[sl]
                cell = data[:, gd, gh, gw]
                cell[0] = patch.mean()
                cell[1] = patch.std()
                cell[2] = patch.min()
                cell[3] = patch.max()
                cell[4] = np.median(patch)
                cell[5] = grads[0][sl].mean()
                cell[6] = grads[1][sl].mean()
                cell[7] = grads[2][sl].mean()
                if params.include_position:
                    for axis, (start, extent) in enumerate(zip((d0, h0, w0), shape)):
                        span = min(p, extent - start)
                        center = start + span / 2.0
                        cell[BASE_CHANNELS + axis] = params.position_weight * center / extent
    return FeatureGrid(
        channels=params.channels,
        grid_shape=grid_shape,
        data=data,
        patch_size=(p, p, p),
    )


def global_feature(grid: FeatureGrid) -> GlobalFeature:
    """Average the grid over cells and L2-normalize; flag an exactly-zero average."""
    vec = grid.data.astype(np.float64).mean(axis=(1, 2, 3))
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return GlobalFeature(vector=np.zeros_like(vec), degenerate=True)
    return GlobalFeature(vector=vec / norm, degenerate=False)


def ingest_external_features(path, vol_shape: Shape3) -> FeatureGrid:
    """Load an externally produced feature grid for a volume of ``vol_shape``.

    The grid is taken verbatim from the file.  When the header does not name
    a patch size it is inferred as ceil(volume extent / grid extent) per axis.
    """
    grid = load_array(path)
    if not isinstance(grid, FeatureGrid):
        raise ValueError(f"{path}: not a feature grid file")
    gs = grid.grid_shape.as_tuple()
    vs = vol_shape.as_tuple()
    if any(g > v for g, v in zip(gs, vs)):
        raise ValueError(
            f"{path}: grid {gs} larger than volume {vs}"
        )
    if grid.patch_size is not None:
        return grid
    patch = tuple(-(-v // g) for g, v in zip(gs, vs))
    return FeatureGrid(
        channels=grid.channels, grid_shape=grid.grid_shape, data=grid.data, patch_size=patch
    )


def uniform_channel_count(grids: dict[str, FeatureGrid]) -> int:
    """The single channel count shared by all grids; raises on a mismatch."""
    if not grids:
        raise ValueError("no feature grids")
    counts = {g.channels for g in grids.values()}
    if len(counts) != 1:
        per_id = {vol_id: g.channels for vol_id, g in sorted(grids.items())}
        raise ValueError(f"feature channel mismatch across volumes: {per_id}")
    return counts.pop()
