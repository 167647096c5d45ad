"""Synthetic multi-site lesion datasets.

Each subject is a two-channel image (bright-lesion and dark-lesion contrast)
over a circular "brain" with a smooth noisy background, plus a binary lesion
mask. Lesions are rasterized ellipses placed so they never touch under full
connectivity, which keeps the connected-component count equal to the number
of lesions drawn. Everything is a pure function of the config and seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .errors import ConfigurationError

DATASET_FORMAT_VERSION = 1

# appearance constants (relative to a brain baseline intensity of 1.0)
_TEXTURE_AMPLITUDE = 0.3
_VOXEL_NOISE_STD = 0.08
_LESION_EDGE_SIGMA = 0.7
_BRAIN_RADIUS_FRACTION = 0.46
_PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic cohort generator."""

    image_size: int = 64
    n_dims: int = 2
    subjects_per_site: int = 20
    n_sites: int = 3
    lesion_count_range: tuple[int, int] = (1, 8)
    lesion_radius_range: tuple[float, float] = (1.0, 5.0)
    background_texture_scale: float = 4.0
    channel_contrast: tuple[float, float] = (2.0, -1.0)
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16")
        if self.n_dims not in (2, 3):
            raise ConfigurationError("n_dims must be 2 or 3")
        if self.subjects_per_site < 0 or self.n_sites < 1:
            raise ConfigurationError("subjects_per_site >= 0 and n_sites >= 1 required")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ConfigurationError("lesion_count_range must satisfy 0 <= min <= max")
        rlo, rhi = self.lesion_radius_range
        if rlo <= 0 or rhi < rlo:
            raise ConfigurationError("lesion_radius_range must be positive and ordered")
        if self.background_texture_scale <= 0:
            raise ConfigurationError("background_texture_scale must be positive")
        if len(self.channel_contrast) != 2:
            raise ConfigurationError("channel_contrast needs one offset per channel")
        if self.seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")


@dataclass
class Volume:
    """One subject: two-channel image, binary lesion mask, provenance.

    ``image`` is [2, *spatial]; ``mask`` shares the spatial dims. When a
    corruption is applied later, ``clean_mask`` keeps the original ground
    truth untouched.
    """

    image: np.ndarray
    mask: np.ndarray
    subject_id: str
    site_id: str
    clean_mask: np.ndarray | None = None
    seed: int | None = None

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return tuple(self.image.shape[1:])

    @property
    def ground_truth(self) -> np.ndarray:
        return self.clean_mask if self.clean_mask is not None else self.mask


@dataclass
class SplitSpec:
    train_per_site: int
    val: int
    test: int

    def __post_init__(self):
        if min(self.train_per_site, self.val, self.test) < 0:
            raise ConfigurationError("split counts must be non-negative")


@dataclass
class FederationDataset:
    """Per-site training lists plus the central validation and test pools."""

    site_train: list[list[Volume]] = field(default_factory=list)
    central_validation: list[Volume] = field(default_factory=list)
    test: list[Volume] = field(default_factory=list)

    def all_volumes(self) -> list[Volume]:
        out = [v for site in self.site_train for v in site]
        return out + list(self.central_validation) + list(self.test)


def _brain_mask(shape: tuple[int, ...]) -> np.ndarray:
    center = [(s - 1) / 2.0 for s in shape]
    radius = _BRAIN_RADIUS_FRACTION * min(shape)
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    dist2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return dist2 <= radius**2


def _rasterize_ellipse(shape, center, radii, angle) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    deltas = [g - c for g, c in zip(grids, center)]
    if len(shape) == 2:
        dy, dx = deltas
        u = dy * np.cos(angle) + dx * np.sin(angle)
        v = -dy * np.sin(angle) + dx * np.cos(angle)
        q = (u / radii[0]) ** 2 + (v / radii[1]) ** 2
    else:
        # axis-aligned ellipsoids are enough in 3D; rotation adds nothing here
        q = sum((d / r) ** 2 for d, r in zip(deltas, radii))
    return q <= 1.0


def _place_lesions(cfg: SynthConfig, shape, brain, rng) -> np.ndarray:
    count = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
    mask = np.zeros(shape, dtype=bool)
    center = [(s - 1) / 2.0 for s in shape]
    brain_radius = _BRAIN_RADIUS_FRACTION * min(shape)
    full_structure = np.ones((3,) * len(shape), dtype=bool)

    for _ in range(count):
        placed = False
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            radii = rng.uniform(*cfg.lesion_radius_range, size=len(shape))
            angle = rng.uniform(0.0, np.pi)
            margin = float(np.max(radii)) + 1.0
            if brain_radius <= margin:
                break
            # uniform center within the ball that keeps the lesion inside the brain
            direction = rng.standard_normal(len(shape))
            direction /= np.linalg.norm(direction) + 1e-12
            r = (brain_radius - margin) * rng.uniform() ** (1.0 / len(shape))
            lesion_center = [c + r * d for c, d in zip(center, direction)]
            candidate = _rasterize_ellipse(shape, lesion_center, radii, angle)
            if not candidate.any():
                continue
            # one-voxel clearance so components never merge, even 8/26-connected
            if not (binary_dilation(candidate, structure=full_structure) & mask).any():
                mask |= candidate
                placed = True
                break
        if not placed:
            raise ConfigurationError(
                "could not place all lesions; lesion_count/radius ranges are too "
                f"crowded for image_size={cfg.image_size}"
            )
    return mask


def generate_subject(cfg: SynthConfig, subject_seed: int) -> Volume:
    """Generate one subject deterministically from (cfg, subject_seed)."""
    if subject_seed < 0:
        raise ConfigurationError("subject_seed must be non-negative")
    rng = np.random.default_rng([cfg.seed, subject_seed])
    shape = (cfg.image_size,) * cfg.n_dims
    brain = _brain_mask(shape)
    mask = _place_lesions(cfg, shape, brain, rng)
    edge = gaussian_filter(mask.astype(np.float64), sigma=_LESION_EDGE_SIGMA)

    channels = []
    for contrast in cfg.channel_contrast:
        texture = gaussian_filter(rng.standard_normal(shape), sigma=cfg.background_texture_scale)
        texture /= texture.std() + 1e-12
        chan = 1.0 + _TEXTURE_AMPLITUDE * texture
        chan += _VOXEL_NOISE_STD * rng.standard_normal(shape)
        chan += contrast * edge
        chan[~brain] = 0.0
        channels.append(chan)

    image = np.stack(channels).astype(np.float32)
    mask_u8 = mask.astype(np.uint8)
    return Volume(
        image=image,
        mask=mask_u8,
        subject_id=f"s{subject_seed:05d}",
        site_id="",
        clean_mask=mask_u8.copy(),
        seed=subject_seed,
    )


def generate_federation(cfg: SynthConfig, split: SplitSpec) -> FederationDataset:
    """Build disjoint per-site train lists plus central validation and test pools."""
    if split.train_per_site > cfg.subjects_per_site:
        raise ConfigurationError(
            f"split requests {split.train_per_site} training subjects per site but the "
            f"config generates only {cfg.subjects_per_site}"
        )
    ds = FederationDataset()
    for site in range(cfg.n_sites):
        site_id = f"site{site:02d}"
        volumes = []
        for j in range(split.train_per_site):
            vol = generate_subject(cfg, site * cfg.subjects_per_site + j)
            vol.site_id = site_id
            volumes.append(vol)
        ds.site_train.append(volumes)

    next_seed = cfg.n_sites * cfg.subjects_per_site
    for j in range(split.val):
        vol = generate_subject(cfg, next_seed + j)
        vol.site_id = "central"
        ds.central_validation.append(vol)
    next_seed += split.val
    for j in range(split.test):
        vol = generate_subject(cfg, next_seed + j)
        vol.site_id = "test"
        ds.test.append(vol)
    return ds


# ---------------------------------------------------------------------------
# on-disk format: one directory per subject with an .npz plus a JSON sidecar

def _save_volume(vol: Volume, subject_dir: Path) -> None:
    subject_dir.mkdir(parents=True, exist_ok=True)
    arrays = {"image": vol.image, "mask": vol.mask}
    if vol.clean_mask is not None:
        arrays["clean_mask"] = vol.clean_mask
    np.savez_compressed(subject_dir / "arrays.npz", **arrays)
    sidecar = {"subject_id": vol.subject_id, "site_id": vol.site_id, "seed": vol.seed}
    (subject_dir / "meta.json").write_text(json.dumps(sidecar, indent=2))


def _load_volume(subject_dir: Path) -> Volume:
    with np.load(subject_dir / "arrays.npz") as data:
        image = data["image"]
        mask = data["mask"]
        clean = data["clean_mask"] if "clean_mask" in data.files else None
    meta = json.loads((subject_dir / "meta.json").read_text())
    return Volume(
        image=image,
        mask=mask,
        subject_id=meta["subject_id"],
        site_id=meta["site_id"],
        clean_mask=clean,
        seed=meta.get("seed"),
    )


def save_dataset(ds: FederationDataset, out_dir: str | Path) -> Path:
    """Write the dataset as ``sites/<site>/<subject>/``, ``validation/``, ``test/``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    index = {
        "format_version": DATASET_FORMAT_VERSION,
        "sites": [],
        "validation": [v.subject_id for v in ds.central_validation],
        "test": [v.subject_id for v in ds.test],
    }
    for site_volumes in ds.site_train:
        site_id = site_volumes[0].site_id if site_volumes else "empty"
        index["sites"].append({"site_id": site_id, "subjects": [v.subject_id for v in site_volumes]})
        for vol in site_volumes:
            _save_volume(vol, root / "sites" / site_id / vol.subject_id)
    for vol in ds.central_validation:
        _save_volume(vol, root / "validation" / vol.subject_id)
    for vol in ds.test:
        _save_volume(vol, root / "test" / vol.subject_id)
    (root / "dataset.json").write_text(json.dumps(index, indent=2))
    return root


def load_dataset(root: str | Path) -> FederationDataset:
    root = Path(root)
    index_path = root / "dataset.json"
    if not index_path.exists():
        raise ConfigurationError(f"not a dataset directory (no dataset.json): {root}")
    index = json.loads(index_path.read_text())
    ds = FederationDataset()
    for site in index["sites"]:
        ds.site_train.append(
            [_load_volume(root / "sites" / site["site_id"] / sid) for sid in site["subjects"]]
        )
    ds.central_validation = [_load_volume(root / "validation" / sid) for sid in index["validation"]]
    ds.test = [_load_volume(root / "test" / sid) for sid in index["test"]]
    return ds
