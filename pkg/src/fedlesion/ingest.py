"""Loading preprocessed real volumes and turning any Volume into 2D slices.

Volumes arrive as one directory per subject holding ``flair``, ``t1`` and
``mask`` NIfTI files (already co-registered and skull-stripped; this module
does no spatial preprocessing). A small built-in NIfTI-1 reader covers the
common data types for .nii / .nii.gz; only reading is supported.

Arrays are reordered to slice-major layout, i.e. a loaded 3D volume is
[channels, slices, H, W] with axial slices along the first spatial axis.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestionError
from .synth import FederationDataset, Volume

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


@dataclass
class SliceRecord:
    """One axial slice that intersects the imaged brain."""

    image_slice: np.ndarray  # [2, H, W]
    mask_slice: np.ndarray  # [H, W]
    subject_id: str
    slice_index: int


def read_nifti(path: str | Path) -> np.ndarray:
    """Read a NIfTI-1 volume (.nii or .nii.gz) as an array indexed [x, y, z]."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 352:
        raise IngestionError(f"{path} is too short to be a NIfTI-1 file")

    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise IngestionError(f"{path} lacks a NIfTI-1 magic string")
    endian = "<" if struct.unpack("<i", raw[0:4])[0] == 348 else ">"
    if struct.unpack(endian + "i", raw[0:4])[0] != 348:
        raise IngestionError(f"{path} has an unrecognized header size")

    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    scl_slope = struct.unpack(endian + "f", raw[112:116])[0]
    scl_inter = struct.unpack(endian + "f", raw[116:120])[0]

    ndim = dim[0]
    if not 1 <= ndim <= 4:
        raise IngestionError(f"{path}: unsupported dimensionality {ndim}")
    shape = tuple(dim[1 : 1 + ndim])
    if datatype not in _NIFTI_DTYPES:
        raise IngestionError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)

    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    arr = data.reshape(shape, order="F")
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr.astype(np.float32) * slope + scl_inter
    return np.asarray(arr)


def _find_modality(subject_dir: Path, name: str) -> Path | None:
    for suffix in (".nii.gz", ".nii"):
        candidate = subject_dir / f"{name}{suffix}"
        if candidate.exists():
            return candidate
    return None


def _to_slice_major(arr: np.ndarray) -> np.ndarray:
    # NIfTI stores x fastest; axial slices live along z
    if arr.ndim == 3:
        return np.ascontiguousarray(arr.transpose(2, 1, 0))
    return arr


def load_volume(
    subject_dir: str | Path,
    modality_order: tuple[str, ...] = ("flair", "t1"),
    require_mask: bool = True,
    site_id: str = "",
) -> Volume:
    """Stack the subject's modalities in the given order into one Volume."""
    subject_dir = Path(subject_dir)
    channels = []
    for name in modality_order:
        path = _find_modality(subject_dir, name)
        if path is None:
            raise IngestionError(f"missing modality {name!r} under {subject_dir}")
        channels.append(_to_slice_major(read_nifti(path)).astype(np.float32))
    shapes = {c.shape for c in channels}
    if len(shapes) != 1:
        raise IngestionError(f"modality shapes disagree under {subject_dir}: {sorted(shapes)}")

    mask_path = _find_modality(subject_dir, "mask")
    if mask_path is None:
        if require_mask:
            raise IngestionError(f"missing mask under {subject_dir}")
        mask = np.zeros(channels[0].shape, dtype=np.uint8)
    else:
        mask = (_to_slice_major(read_nifti(mask_path)) > 0).astype(np.uint8)
        if mask.shape != channels[0].shape:
            raise IngestionError(f"mask shape {mask.shape} disagrees with image {channels[0].shape}")

    return Volume(
        image=np.stack(channels),
        mask=mask,
        subject_id=subject_dir.name,
        site_id=site_id,
        clean_mask=mask.copy(),
    )


def normalize(volume: Volume) -> Volume:
    """Z-score each channel over the nonzero brain region; background stays 0."""
    brain = np.any(volume.image != 0, axis=0)
    if not brain.any():
        raise IngestionError(f"{volume.subject_id}: volume is entirely zero")
    channels = []
    for c in range(volume.image.shape[0]):
        chan = volume.image[c].astype(np.float64)
        values = chan[brain]
        std = values.std()
        if std == 0.0:
            raise IngestionError(f"{volume.subject_id}: channel {c} has zero variance over the brain")
        out = np.zeros_like(chan)
        out[brain] = (values - values.mean()) / std
        channels.append(out)
    return Volume(
        image=np.stack(channels).astype(np.float32),
        mask=volume.mask,
        subject_id=volume.subject_id,
        site_id=volume.site_id,
        clean_mask=volume.clean_mask,
        seed=volume.seed,
    )


def slices(volume: Volume) -> list[SliceRecord]:
    """All axial slices with any nonzero image voxel, in slice order."""
    if volume.image.ndim == 3:  # a single 2D slice
        if not volume.image.any():
            return []
        return [SliceRecord(volume.image, volume.mask, volume.subject_id, 0)]
    records = []
    for z in range(volume.image.shape[1]):
        if volume.image[:, z].any():
            records.append(SliceRecord(volume.image[:, z], volume.mask[z], volume.subject_id, z))
    return records


def load_manifest(path: str | Path, modality_order: tuple[str, ...] = ("flair", "t1")) -> FederationDataset:
    """Load a site manifest: JSON with per-site subject dirs plus validation/test lists.

    Paths in the manifest are resolved relative to the manifest file.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest not found: {path}")
    spec = json.loads(path.read_text())
    base = path.parent

    def _load_many(entries, site_id):
        return [load_volume(base / e, modality_order, site_id=site_id) for e in entries]

    ds = FederationDataset()
    for i, site_entries in enumerate(spec.get("sites", [])):
        ds.site_train.append(_load_many(site_entries, f"site{i:02d}"))
    ds.central_validation = _load_many(spec.get("validation", []), "central")
    ds.test = _load_many(spec.get("test", []), "test")
    return ds
