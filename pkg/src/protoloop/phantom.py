"""Seeded synthetic volumes for end-to-end runs with known ground truth.

Each foreground class is an analytic ellipsoid (or a union of two) rasterized
at voxel centers, with per-volume jitter of center and radii and Gaussian
intensity noise on top of per-class means.  The first volume is the labeled
template; ground truth for every volume is written to a separate truth
directory so pipeline quality can be tracked without leaking labels into the
manifest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import (
    DatasetManifest,
    IntensityVolume,
    LabelVolume,
    Shape3,
    VolumeEntry,
    save_array,
    save_manifest,
)

__all__ = ["ClassShape", "PhantomSpec", "generate", "load_spec", "save_spec"]

_FAMILIES = ("ellipsoid", "two_ellipsoids")

# Fixed secondary-lobe convention for the two-ellipsoid family: a smaller copy
# offset along the h axis.
_LOBE_OFFSET = 0.8   # times the main h radius
_LOBE_SCALE = 0.6    # radius scale of the secondary lobe

_MAX_JITTER_ATTEMPTS = 50


@dataclass(frozen=True)
class ClassShape:
    """Geometry and intensity of one foreground class."""

    family: str = "ellipsoid"
    center: tuple[float, float, float] = (0.5, 0.5, 0.5)  # fractional coordinates
    radii: tuple[float, float, float] = (4.0, 4.0, 4.0)   # voxels
    intensity_mean: float = 1.0

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        if len(self.center) != 3 or len(self.radii) != 3:
            raise ValueError("center and radii must have three components")
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    num_volumes: int
    shape: Shape3
    num_classes: int
    classes: tuple[ClassShape, ...]
    background_mean: float = 0.0
    noise_sigma: float = 0.1
    center_jitter: float = 0.0  # max |offset| in voxels, uniform per axis
    radius_jitter: float = 0.0  # max |change| in voxels, uniform per axis
    hard_fraction: float = 0.0  # trailing fraction of volumes with extra noise
    hard_sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.num_volumes < 2:
            raise ValueError("need at least the template plus one pool volume")
        if not 2 <= self.num_classes <= 256:
            raise ValueError(f"num_classes={self.num_classes} outside [2, 256]")
        if len(self.classes) != self.num_classes - 1:
            raise ValueError(
                f"expected {self.num_classes - 1} class shapes, got {len(self.classes)}"
            )
        if self.noise_sigma < 0 or (self.hard_sigma is not None and self.hard_sigma < 0):
            raise ValueError("noise sigma must be >= 0")
        if not 0.0 <= self.hard_fraction < 1.0:
            raise ValueError("hard_fraction must be in [0, 1)")
        if self.center_jitter < 0 or self.radius_jitter < 0:
            raise ValueError("jitter ranges must be >= 0")
        for cs in self.classes:
            self._check_fits(cs)

    def _check_fits(self, cs: ClassShape) -> None:
        """Every jittered lobe must stay inside the volume."""
        extents = self.shape.as_tuple()
        slack_c = self.center_jitter
        slack_r = self.radius_jitter
        lobes = [(cs.center, cs.radii)]
        if cs.family == "two_ellipsoids":
            shifted = (
                cs.center[0],
                cs.center[1] + _LOBE_OFFSET * cs.radii[1] / extents[1],
                cs.center[2],
            )
            lobes.append((shifted, tuple(r * _LOBE_SCALE for r in cs.radii)))
        for center, radii in lobes:
            for axis in range(3):
                c = center[axis] * extents[axis]
                reach = radii[axis] + slack_r + slack_c
                if c - reach < 0 or c + reach > extents[axis]:
                    raise ValueError(
                        f"infeasible geometry: class lobe exceeds volume on axis {axis}"
                    )

    @property
    def hard_count(self) -> int:
        return int(round(self.hard_fraction * self.num_volumes))


def _ellipsoid_mask(
    shape: Shape3, center: np.ndarray, radii: np.ndarray
) -> np.ndarray:
    """Voxels whose centers (i + 0.5) fall inside the analytic ellipsoid."""
    axes = [
        ((np.arange(n) + 0.5) - c) / r
        for n, c, r in zip(shape.as_tuple(), center, radii)
    ]
    dd, hh, ww = np.meshgrid(*axes, indexing="ij", sparse=True)
    return dd**2 + hh**2 + ww**2 <= 1.0


def _rasterize(shape: Shape3, cs: ClassShape, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    mask = _ellipsoid_mask(shape, center, radii)
    if cs.family == "two_ellipsoids":
        shifted = center.copy()
        shifted[1] += _LOBE_OFFSET * radii[1]
        mask = mask | _ellipsoid_mask(shape, shifted, radii * _LOBE_SCALE)
    return mask


def _volume_labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Jittered class masks; retried until every class is present."""
    extents = np.array(spec.shape.as_tuple(), dtype=np.float64)
    for _ in range(_MAX_JITTER_ATTEMPTS):
        labels = np.zeros(spec.shape.as_tuple(), dtype=np.uint8)
        for cls, cs in enumerate(spec.classes, start=1):
            center = np.array(cs.center) * extents
            center += rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)
            radii = np.array(cs.radii) + rng.uniform(
                -spec.radius_jitter, spec.radius_jitter, size=3
            )
            radii = np.maximum(radii, 0.5)
            labels[_rasterize(spec.shape, cs, center, radii)] = cls
        counts = np.bincount(labels.reshape(-1), minlength=spec.num_classes)
        if (counts[: spec.num_classes] > 0).all():
            return labels
    raise ValueError("could not place every class after bounded jitter retries")


def generate(
    spec: PhantomSpec, out_dir: str | Path, all_labeled: bool = False
) -> tuple[DatasetManifest, dict[str, LabelVolume]]:
    """Write a synthetic dataset under ``out_dir`` and return (manifest, truth).

    Volume ``vol_000`` is the labeled template.  Ground truth for every volume
    goes to ``out_dir/truth/``.  With ``all_labeled`` every manifest entry
    keeps its label path (for building validation/test splits).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    truth_dir = out_dir / "truth"
    truth_dir.mkdir(exist_ok=True)

    n_hard = spec.hard_count
    entries = []
    truth: dict[str, LabelVolume] = {}
    for i in range(spec.num_volumes):
        vol_id = f"vol_{i:03d}"
        # independent per-volume streams: generation order never matters
        rng = np.random.default_rng([spec.seed, i])
        label_data = _volume_labels(spec, rng)
        sigma = spec.noise_sigma
        if spec.hard_sigma is not None and i >= spec.num_volumes - n_hard:
            sigma = spec.hard_sigma
        means = np.array(
            [spec.background_mean] + [cs.intensity_mean for cs in spec.classes]
        )
        intensity = means[label_data] + rng.normal(0.0, sigma, size=label_data.shape)

        vol = IntensityVolume(spec.shape, intensity.astype(np.float32))
        labels = LabelVolume(spec.shape, spec.num_classes, label_data)
        truth[vol_id] = labels

        intensity_name = f"{vol_id}.intensity.vxar"
        save_array(vol, out_dir / intensity_name)
        save_array(labels, truth_dir / f"{vol_id}.label.vxar")

        label_name = None
        if i == 0 or all_labeled:
            label_name = f"{vol_id}.label.vxar"
            save_array(labels, out_dir / label_name)
        entries.append(
            VolumeEntry(vol_id=vol_id, intensity=intensity_name, label=label_name)
        )

    manifest = DatasetManifest(
        num_classes=spec.num_classes,
        entries=tuple(entries),
        exactly_one_labeled=not all_labeled,
        base_dir=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest, truth


# ---------------------------------------------------------------------------
# JSON spec files for the CLI

def load_spec(path: str | Path) -> PhantomSpec:
    doc = json.loads(Path(path).read_text())
    try:
        classes = tuple(
            ClassShape(
                family=c.get("family", "ellipsoid"),
                center=tuple(c["center"]),
                radii=tuple(c["radii"]),
                intensity_mean=c["intensity_mean"],
            )
            for c in doc["classes"]
        )
        return PhantomSpec(
            num_volumes=doc["num_volumes"],
            shape=Shape3(*doc["shape"]),
            num_classes=doc["num_classes"],
            classes=classes,
            background_mean=doc.get("background_mean", 0.0),
            noise_sigma=doc.get("noise_sigma", 0.1),
            center_jitter=doc.get("center_jitter", 0.0),
            radius_jitter=doc.get("radius_jitter", 0.0),
            hard_fraction=doc.get("hard_fraction", 0.0),
            hard_sigma=doc.get("hard_sigma"),
            seed=doc.get("seed", 0),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: phantom spec missing required field ({exc})") from exc


def save_spec(spec: PhantomSpec, path: str | Path) -> None:
    doc = {
        "num_volumes": spec.num_volumes,
        "shape": list(spec.shape.as_tuple()),
        "num_classes": spec.num_classes,
        "classes": [
            {
                "family": cs.family,
                "center": list(cs.center),
                "radii": list(cs.radii),
                "intensity_mean": cs.intensity_mean,
            }
            for cs in spec.classes
        ],
        "background_mean": spec.background_mean,
        "noise_sigma": spec.noise_sigma,
        "center_jitter": spec.center_jitter,
        "radius_jitter": spec.radius_jitter,
        "hard_fraction": spec.hard_fraction,
        "hard_sigma": spec.hard_sigma,
        "seed": spec.seed,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
