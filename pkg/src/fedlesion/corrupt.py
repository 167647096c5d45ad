"""Label-noise generators: mask erosion, dilation, and whole-lesion removal.

Morphology runs in the dimensionality of the stored mask with a face-connected
(cross) structuring element iterated ``radius`` times. Lesion identity uses
full connectivity (8-connected in 2D, 26-connected in 3D). Subject counts are
rounded half away from zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .synth import Volume

NOISE_KINDS = ("none", "erosion", "dilation", "removal")


@dataclass(frozen=True)
class NoiseSpec:
    """Declarative corruption for one site's training labels."""

    kind: str = "none"
    magnitude_voxels: int = 0
    lesion_fraction: float = 0.0
    sample_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"unknown noise kind {self.kind!r}, expected one of {NOISE_KINDS}")
        if self.kind in ("erosion", "dilation") and self.magnitude_voxels < 1:
            raise ConfigurationError(f"{self.kind} requires magnitude_voxels >= 1")
        if self.kind == "removal" and not 0.0 < self.lesion_fraction <= 1.0:
            raise ConfigurationError("removal requires lesion_fraction in (0, 1]")
        if not 0.0 <= self.sample_fraction <= 1.0:
            raise ConfigurationError("sample_fraction must lie in [0, 1]")


@dataclass
class SubjectCorruption:
    subject_id: str
    applied: bool
    kind: str
    voxels_added: int = 0
    voxels_removed: int = 0
    lesions_removed: int = 0


@dataclass
class CorruptionReport:
    spec: NoiseSpec
    subjects: list[SubjectCorruption] = field(default_factory=list)

    @property
    def n_applied(self) -> int:
        return sum(1 for s in self.subjects if s.applied)

    def to_dict(self) -> dict:
        return {"spec": asdict(self.spec), "subjects": [asdict(s) for s in self.subjects]}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def round_half_away(x: float) -> int:
    """round() with halves away from zero, e.g. 2.5 -> 3 (banker-free counts)."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def _check_binary(mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ConfigurationError("mask must be binary with values in {0, 1}")
    return arr.astype(bool)


def _cross(ndim: int) -> np.ndarray:
    return ndimage.generate_binary_structure(ndim, 1)


def erode_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """``radius`` iterations of unit-radius erosion with the cross element."""
    if radius < 1:
        raise ConfigurationError("radius must be >= 1")
    m = _check_binary(mask)
    out = ndimage.binary_erosion(m, structure=_cross(m.ndim), iterations=radius, border_value=0)
    return out.astype(np.uint8)


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dual of :func:`erode_mask`; result always contains the input."""
    if radius < 1:
        raise ConfigurationError("radius must be >= 1")
    m = _check_binary(mask)
    out = ndimage.binary_dilation(m, structure=_cross(m.ndim), iterations=radius)
    return out.astype(np.uint8)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Connected components under full connectivity (8 in 2D, 26 in 3D)."""
    m = _check_binary(mask)
    structure = np.ones((3,) * m.ndim, dtype=bool)
    labels, count = ndimage.label(m, structure=structure)
    return labels, count


def remove_lesions(mask: np.ndarray, lesion_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Zero out round(lesion_fraction * n) whole components chosen via rng."""
    if not 0.0 <= lesion_fraction <= 1.0:
        raise ConfigurationError("lesion_fraction must lie in [0, 1]")
    m = _check_binary(mask)
    labels, count = label_components(m)
    if count == 0:
        return m.astype(np.uint8)
    k = round_half_away(lesion_fraction * count)
    out = m.copy()
    if k > 0:
        doomed = rng.choice(count, size=k, replace=False) + 1
        out[np.isin(labels, doomed)] = False
    return out.astype(np.uint8)


def apply_site_noise(site_volumes: list[Volume], spec: NoiseSpec) -> tuple[list[Volume], CorruptionReport]:
    """Corrupt a seeded fraction of a site's subjects; originals stay untouched.

    Returns new Volume objects (images shared, masks replaced) and a report of
    what changed per subject. ``clean_mask`` always keeps the ground truth.
    """
    report = CorruptionReport(spec=spec)
    rng = np.random.default_rng(spec.seed)
    n = len(site_volumes)
    chosen: set[int] = set()
    if spec.kind != "none" and n > 0:
        n_sel = round_half_away(spec.sample_fraction * n)
        chosen = set(rng.choice(n, size=n_sel, replace=False).tolist())

    out: list[Volume] = []
    for idx, vol in enumerate(site_volumes):
        clean = vol.clean_mask if vol.clean_mask is not None else vol.mask.copy()
        if idx not in chosen:
            out.append(Volume(vol.image, vol.mask.copy(), vol.subject_id, vol.site_id, clean, vol.seed))
            report.subjects.append(SubjectCorruption(vol.subject_id, False, "none"))
            continue
        before = vol.mask.astype(bool)
        if spec.kind == "erosion":
            new_mask = erode_mask(vol.mask, spec.magnitude_voxels)
        elif spec.kind == "dilation":
            new_mask = dilate_mask(vol.mask, spec.magnitude_voxels)
        else:
            new_mask = remove_lesions(vol.mask, spec.lesion_fraction, rng)
        after = new_mask.astype(bool)
        report.subjects.append(
            SubjectCorruption(
                subject_id=vol.subject_id,
                applied=True,
                kind=spec.kind,
                voxels_added=int((after & ~before).sum()),
                voxels_removed=int((before & ~after).sum()),
                lesions_removed=label_components(before)[1] - label_components(after)[1],
            )
        )
        out.append(Volume(vol.image, new_mask, vol.subject_id, vol.site_id, clean, vol.seed))
    return out, report
