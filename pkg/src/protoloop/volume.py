"""Volumetric data containers, nearest-neighbor resampling, and bit-exact array IO.

All tensors are numpy arrays in row-major order with the depth axis slowest.
On disk each tensor is one self-describing binary file: a 6-byte magic, a
little-endian u32 length prefix, a UTF-8 JSON header, and the raw
little-endian payload.  No compression, no chunking, so save/load
round-trips are bit-exact.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ArrayFormatError",
    "Shape3",
    "IntensityVolume",
    "LabelVolume",
    "ProbVolume",
    "VolumeEntry",
    "DatasetManifest",
    "read_blob",
    "write_blob",
    "save_array",
    "load_array",
    "load_manifest",
    "save_manifest",
    "nearest_axis_indices",
    "nearest_downsample_labels",
    "nearest_upsample_maps",
    "nearest_resample_labels",
]

MAGIC = b"VXAR\x01\x00"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class ArrayFormatError(ValueError):
    """Raised for malformed, truncated, or inconsistent array files."""


@dataclass(frozen=True)
class Shape3:
    """Voxel extents (d, h, w); d is the slowest axis."""

    d: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("d", "h", "w"):
            v = getattr(self, name)
            if int(v) != v or int(v) < 1:
                raise ValueError(f"extent {name}={v!r} must be a positive integer")
            object.__setattr__(self, name, int(v))

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.d, self.h, self.w)

    @property
    def voxels(self) -> int:
        return self.d * self.h * self.w

    @property
    def diagonal(self) -> float:
        """Euclidean length of the volume diagonal, in voxel units."""
        return float(np.sqrt(self.d**2 + self.h**2 + self.w**2))


def _finalize(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class IntensityVolume:
    """A raw scalar volume; float32, finite everywhere."""

    shape: Shape3
    data: np.ndarray  # (d, h, w) float32

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32).reshape(self.shape.as_tuple())
        if not np.isfinite(data).all():
            raise ValueError("intensity data contains non-finite values")
        object.__setattr__(self, "data", _finalize(data))


@dataclass(frozen=True)
class LabelVolume:
    """Integer class ids per voxel; background is class 0."""

    shape: Shape3
    num_classes: int
    data: np.ndarray  # (d, h, w) uint8

    def __post_init__(self):
        if not 2 <= self.num_classes <= 256:
            raise ValueError(f"num_classes={self.num_classes} outside [2, 256]")
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            # refuse silent narrowing: only accept values that fit exactly
            as_u8 = data.astype(np.uint8)
            if not np.array_equal(as_u8, data):
                raise ValueError("label data does not fit in uint8")
            data = as_u8
        data = data.reshape(self.shape.as_tuple())
        if data.size and int(data.max()) >= self.num_classes:
            raise ValueError(
                f"label value {int(data.max())} >= num_classes {self.num_classes}"
            )
        object.__setattr__(self, "data", _finalize(data))


@dataclass(frozen=True)
class ProbVolume:
    """Per-class probabilities; (num_classes, d, h, w), rows sum to 1 per voxel."""

    shape: Shape3
    num_classes: int
    data: np.ndarray  # (num_classes, d, h, w) float32

    def __post_init__(self):
        if not 2 <= self.num_classes <= 256:
            raise ValueError(f"num_classes={self.num_classes} outside [2, 256]")
        data = np.asarray(self.data, dtype=np.float32).reshape(
            (self.num_classes,) + self.shape.as_tuple()
        )
        if not np.isfinite(data).all():
            raise ValueError("probabilities contain non-finite values")
        if float(data.min()) < -1e-5 or float(data.max()) > 1 + 1e-5:
            raise ValueError("probability outside [0, 1] beyond tolerance")
        sums = data.sum(axis=0, dtype=np.float64)
        if float(np.abs(sums - 1.0).max()) > 1e-5:
            raise ValueError("per-voxel probabilities do not sum to 1 within 1e-5")
        data = np.clip(data, 0.0, 1.0)
        object.__setattr__(self, "data", _finalize(data))


# ---------------------------------------------------------------------------
# binary array files

def write_blob(path: str | Path, header: dict, payload: bytes) -> None:
    """Write one magic + JSON header + payload file. Canonical key order."""
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)


def read_blob(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise ArrayFormatError(f"{path}: bad magic; not an array file")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if len(raw) < start + hlen:
        raise ArrayFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArrayFormatError(f"{path}: malformed header ({exc})") from exc
    if not isinstance(header, dict):
        raise ArrayFormatError(f"{path}: header is not a JSON object")
    return header, raw[start + hlen :]


def _header_shape(header: dict, path) -> Shape3:
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(s, int) and s >= 1 for s in shape)
    ):
        raise ArrayFormatError(f"{path}: bad shape {shape!r}")
    return Shape3(*shape)


def save_array(array, path: str | Path) -> None:
    """Persist a typed array; the header records dtype, shape, and kind-specific keys."""
    from . import encoder  # deferred: encoder imports this module

    if isinstance(array, IntensityVolume):
        header = {"dtype": "f32", "shape": list(array.shape.as_tuple()), "order": "row-major"}
        payload = array.data.astype("<f4").tobytes()
    elif isinstance(array, LabelVolume):
        header = {
            "dtype": "u8",
            "shape": list(array.shape.as_tuple()),
            "order": "row-major",
            "num_classes": array.num_classes,
        }
        payload = array.data.tobytes()
    elif isinstance(array, ProbVolume):
        header = {
            "dtype": "f32",
            "shape": list(array.shape.as_tuple()),
            "order": "row-major",
            "num_classes": array.num_classes,
        }
        payload = array.data.astype("<f4").tobytes()
    elif isinstance(array, encoder.FeatureGrid):
        header = {
            "dtype": "f32",
            "shape": list(array.grid_shape.as_tuple()),
            "order": "row-major",
            "channels": array.channels,
        }
        if array.patch_size is not None:
            header["patch_size"] = list(array.patch_size)
        payload = array.data.astype("<f4").tobytes()
    else:
        raise TypeError(f"cannot save object of type {type(array).__name__}")
    write_blob(path, header, payload)


def load_array(path: str | Path):
    """Load a typed array back; the inverse of :func:`save_array`, bit-exact."""
    from . import encoder  # deferred: encoder imports this module

    header, payload = read_blob(path)
    dtype_name = header.get("dtype")
    if dtype_name not in _DTYPES:
        raise ArrayFormatError(f"{path}: unknown dtype {dtype_name!r}")
    if header.get("order") != "row-major":
        raise ArrayFormatError(f"{path}: unsupported order {header.get('order')!r}")
    shape = _header_shape(header, path)
    dtype = _DTYPES[dtype_name]

    planes = 1
    if "channels" in header:
        planes = header["channels"]
        if not isinstance(planes, int) or planes < 1:
            raise ArrayFormatError(f"{path}: bad channels {planes!r}")
    elif dtype_name == "f32" and "num_classes" in header:
        planes = header["num_classes"]
        if not isinstance(planes, int) or planes < 2:
            raise ArrayFormatError(f"{path}: bad num_classes {planes!r}")

    expected = planes * shape.voxels * dtype.itemsize
    if len(payload) != expected:
        raise ArrayFormatError(
            f"{path}: shape/payload mismatch ({len(payload)} bytes, expected {expected})"
        )
    data = np.frombuffer(payload, dtype=dtype).copy()

    if dtype_name == "u8":
        num_classes = header.get("num_classes")
        if num_classes is None:
            # externally produced label file: infer a tight class count
            num_classes = max(2, int(data.max()) + 1) if data.size else 2
        return LabelVolume(shape, num_classes, data)
    if "channels" in header:
        patch = header.get("patch_size")
        if patch is not None:
            if (
                not isinstance(patch, list)
                or len(patch) != 3
                or not all(isinstance(p, int) and p >= 1 for p in patch)
            ):
                raise ArrayFormatError(f"{path}: bad patch_size {patch!r}")
            patch = tuple(patch)
        grid = data.reshape((planes,) + shape.as_tuple())
        if not np.isfinite(grid).all():
            raise ArrayFormatError(f"{path}: non-finite feature values")
        return encoder.FeatureGrid(channels=planes, grid_shape=shape, data=grid, patch_size=patch)
    if "num_classes" in header:
        return ProbVolume(shape, planes, data.reshape((planes,) + shape.as_tuple()))
    vol = data.reshape(shape.as_tuple())
    if not np.isfinite(vol).all():
        raise ArrayFormatError(f"{path}: non-finite values in intensity data")
    return IntensityVolume(shape, vol)


# ---------------------------------------------------------------------------
# dataset manifest

@dataclass(frozen=True)
class VolumeEntry:
    """One pool member: id plus relative paths to its array files."""

    vol_id: str
    intensity: str
    label: str | None = None
    features: str | None = None

    def __post_init__(self):
        if not self.vol_id:
            raise ValueError("volume id must be non-empty")


@dataclass(frozen=True)
class DatasetManifest:
    """The dataset contract: unique ids, and exactly one labeled entry when flagged."""

    num_classes: int
    entries: tuple[VolumeEntry, ...]
    exactly_one_labeled: bool = True
    base_dir: Path = Path(".")

    def __post_init__(self):
        if not 2 <= self.num_classes <= 256:
            raise ValueError(f"num_classes={self.num_classes} outside [2, 256]")
        entries = tuple(self.entries)
        if not entries:
            raise ValueError("manifest has no volumes")
        ids = [e.vol_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("volume ids are not unique")
        labeled = [e for e in entries if e.label is not None]
        if self.exactly_one_labeled and len(labeled) != 1:
            raise ValueError(
                f"manifest flagged exactly-one-labeled but has {len(labeled)} labeled entries"
            )
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "base_dir", Path(self.base_dir))

    def labeled_entry(self) -> VolumeEntry:
        labeled = [e for e in self.entries if e.label is not None]
        if len(labeled) != 1:
            raise ValueError(f"expected exactly one labeled entry, found {len(labeled)}")
        return labeled[0]

    def unlabeled_entries(self) -> list[VolumeEntry]:
        return [e for e in self.entries if e.label is None]

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed manifest ({exc})") from exc
    try:
        entries = tuple(
            VolumeEntry(
                vol_id=v["id"],
                intensity=v["intensity"],
                label=v.get("label"),
                features=v.get("features"),
            )
            for v in doc["volumes"]
        )
        return DatasetManifest(
            num_classes=doc["num_classes"],
            entries=entries,
            exactly_one_labeled=doc.get("exactly_one_labeled", True),
            base_dir=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: manifest missing required field ({exc})") from exc


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    volumes = []
    for e in manifest.entries:
        entry: dict = {"id": e.vol_id, "intensity": e.intensity}
        if e.label is not None:
            entry["label"] = e.label
        if e.features is not None:
            entry["features"] = e.features
        volumes.append(entry)
    doc = {
        "num_classes": manifest.num_classes,
        "exactly_one_labeled": manifest.exactly_one_labeled,
        "volumes": volumes,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# center-aligned nearest-neighbor resampling

def nearest_axis_indices(n_src: int, n_dst: int) -> np.ndarray:
    """Source index per destination index: floor((i + 0.5) * n_src / n_dst).

    Pure integer arithmetic, so the mapping is exact for any extents; results
    are clamped to the valid source range.
    """
    if n_src < 1 or n_dst < 1:
        raise ValueError("extents must be positive")
    i = np.arange(n_dst, dtype=np.int64)
    return np.minimum((2 * i + 1) * n_src // (2 * n_dst), n_src - 1)


def nearest_downsample_labels(labels: LabelVolume, target: Shape3) -> LabelVolume:
    """Map labels onto a coarser grid by reading the center-aligned source voxel."""
    src = labels.shape
    if target.d > src.d or target.h > src.h or target.w > src.w:
        raise ValueError(f"target {target.as_tuple()} exceeds source {src.as_tuple()}")
    idx = [nearest_axis_indices(s, t) for s, t in zip(src.as_tuple(), target.as_tuple())]
    data = labels.data[np.ix_(*idx)]
    return LabelVolume(target, labels.num_classes, data)


def nearest_upsample_maps(maps: np.ndarray, target: Shape3) -> np.ndarray:
    """Expand per-class cell maps (C, d', h', w') to the full volume shape."""
    maps = np.asarray(maps)
    if maps.ndim != 4:
        raise ValueError(f"expected (C, d', h', w') maps, got shape {maps.shape}")
    src = maps.shape[1:]
    tgt = target.as_tuple()
    if any(t < s for s, t in zip(src, tgt)):
        raise ValueError(f"target {tgt} smaller than source {src}")
    idx = [nearest_axis_indices(s, t) for s, t in zip(src, tgt)]
    return maps[:, idx[0]][:, :, idx[1]][:, :, :, idx[2]]


def nearest_resample_labels(labels: LabelVolume, target: Shape3) -> LabelVolume:
    """Resample labels to an arbitrary shape (either direction) center-aligned."""
    if labels.shape == target:
        return labels
    idx = [
        nearest_axis_indices(s, t)
        for s, t in zip(labels.shape.as_tuple(), target.as_tuple())
    ]
    return LabelVolume(target, labels.num_classes, labels.data[np.ix_(*idx)])
