"""Volume data model, preprocessing chain, and the VOXV1 file format.

A volume is an (H, W, D) scalar grid with per-axis spacing in millimetres.
Axis 2 indexes axial slices; axis 0 / axis 1 are the in-plane rows / columns.
On disk, voxels are stored slice-contiguous (axial plane d is one contiguous
block), little-endian.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import ndimage

AIR_HU = -1000.0
HU_MIN = -1000.0
HU_MAX = 1000.0

VOLUME_MAGIC = "VOXV1"

_DTYPE_NAMES = {"float32": "<f4", "float64": "<f8", "int16": "<i2"}


class VolumeError(Exception):
    """Base class for volume-domain failures."""


class InvalidMetadataError(VolumeError):
    pass


class DomainMismatchError(VolumeError):
    pass


class ResampleError(VolumeError):
    pass


class VolumeIOError(VolumeError):
    pass


class Domain(str, Enum):
    RAW = "raw"
    HOUNSFIELD = "hounsfield"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class CtVolume:
    """A 3D scalar grid with spacing metadata and an intensity-domain tag."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    domain: Domain

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise VolumeError(f"voxel grid must be 3D with positive dims, got {v.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidMetadataError(f"spacing must be positive per axis, got {self.spacing}")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.domain == Domain.NORMALIZED:
            if v.size and (v.min() < 0.0 or v.max() > 1.0):
                raise VolumeError("normalized volume has voxels outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray, domain: Domain | None = None) -> "CtVolume":
        return CtVolume(voxels, self.spacing, self.domain if domain is None else domain)


def _air_value(domain: Domain) -> float:
    return 0.0 if domain == Domain.NORMALIZED else AIR_HU


def hu_rescale(raw: np.ndarray, slope: float, intercept: float,
               spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> CtVolume:
    """Map raw scanner integers to Hounsfield units: v' = slope * v + intercept."""
    if slope == 0:
        raise InvalidMetadataError("rescale slope must be nonzero")
    voxels = np.asarray(raw, dtype=np.float32) * np.float32(slope) + np.float32(intercept)
    return CtVolume(voxels, tuple(spacing), Domain.HOUNSFIELD)


def clip_hu(vol: CtVolume) -> CtVolume:
    """Clamp Hounsfield values to [-1000, +1000]."""
    if vol.domain != Domain.HOUNSFIELD:
        raise DomainMismatchError(f"clip_hu expects hounsfield domain, got {vol.domain.value}")
    return vol.with_voxels(np.clip(vol.voxels, HU_MIN, HU_MAX))


def normalize(vol: CtVolume) -> CtVolume:
    """Linearly map clipped HU values to [0, 1]: v' = (v + 1000) / 2000."""
    if vol.domain != Domain.HOUNSFIELD:
        raise DomainMismatchError(f"normalize expects hounsfield domain, got {vol.domain.value}")
    if vol.voxels.min() < HU_MIN or vol.voxels.max() > HU_MAX:
        raise VolumeError("normalize requires a clipped volume (values in [-1000, 1000])")
    out = (vol.voxels - HU_MIN) / (HU_MAX - HU_MIN)
    return CtVolume(out.astype(vol.voxels.dtype), vol.spacing, Domain.NORMALIZED)


def resample(vol: CtVolume, target_spacing: Sequence[float],
             mode: str = "trilinear") -> CtVolume:
    """Resample onto a uniform grid with the requested spacing.

    Interpolation is trilinear by default (nearest-neighbour behind the
    flag); out-of-bounds samples take the air value for the volume's domain.
    """
    ts = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in ts):
        raise ResampleError(f"target spacing must be positive, got {ts}")
    if mode not in ("trilinear", "nearest"):
        raise ResampleError(f"unknown interpolation mode {mode!r}")
    old_shape = vol.shape
    new_shape = tuple(int(round(n * s / t)) for n, s, t in zip(old_shape, vol.spacing, ts))
    if min(new_shape) < 1:
        raise ResampleError(f"degenerate output grid {new_shape} for spacing {ts}")
    if ts == vol.spacing:
        return CtVolume(vol.voxels.copy(), ts, vol.domain)
    axes = [np.arange(n, dtype=np.float64) * t / s
            for n, t, s in zip(new_shape, ts, vol.spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 1 if mode == "trilinear" else 0
    out = ndimage.map_coordinates(
        vol.voxels.astype(np.float64), coords, order=order,
        mode="constant", cval=_air_value(vol.domain))
    return CtVolume(out.astype(vol.voxels.dtype), ts, vol.domain)


def crop_or_pad(vol: CtVolume, target: Sequence[int]) -> CtVolume:
    """Center-crop larger axes, symmetrically pad smaller ones with air."""
    target = tuple(int(t) for t in target)
    if any(t < 1 for t in target):
        raise VolumeError(f"target shape must be >= 1 per axis, got {target}")
    v = vol.voxels
    # crop first, then pad, independently per axis
    slices = []
    for n, t in zip(v.shape, target):
        if n > t:
            lo = (n - t) // 2
            slices.append(slice(lo, lo + t))
        else:
            slices.append(slice(None))
    v = v[tuple(slices)]
    pads = []
    for n, t in zip(v.shape, target):
        extra = max(t - n, 0)
        pads.append((extra // 2, extra - extra // 2))
    if any(p != (0, 0) for p in pads):
        v = np.pad(v, pads, mode="constant", constant_values=_air_value(vol.domain))
    return CtVolume(v.copy(), vol.spacing, vol.domain)


def preprocess(raw: np.ndarray, slope: float, intercept: float,
               spacing: Sequence[float], target_spacing: Sequence[float],
               target_shape: Sequence[int], mode: str = "trilinear") -> CtVolume:
    """Full chain: HU rescale -> resample -> crop/pad -> clip -> normalize."""
    vol = hu_rescale(raw, slope, intercept, spacing)
    vol = resample(vol, target_spacing, mode=mode)
    vol = crop_or_pad(vol, target_shape)
    return normalize(clip_hu(vol))


def save_volume(vol: CtVolume, path: str | os.PathLike) -> None:
    """Write a VOXV1 file: one-line text header + raw little-endian payload."""
    dtype_name = vol.voxels.dtype.name
    if dtype_name not in _DTYPE_NAMES:
        raise VolumeIOError(f"unsupported voxel dtype {dtype_name}")
    h, w, d = vol.shape
    header = (f"{VOLUME_MAGIC} {h} {w} {d} "
              f"{vol.spacing[0]!r} {vol.spacing[1]!r} {vol.spacing[2]!r} "
              f"{vol.domain.value} {dtype_name}\n")
    # slice-contiguous: each axial plane (fixed axis-2 index) is one block
    payload = np.ascontiguousarray(
        np.moveaxis(vol.voxels, 2, 0)).astype(_DTYPE_NAMES[dtype_name])
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload.tobytes())


def load_volume(path: str | os.PathLike) -> CtVolume:
    """Read a VOXV1 file; the round trip with save_volume is bit-exact."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").strip()
        payload = f.read()
    parts = header.split()
    if len(parts) != 9 or parts[0] != VOLUME_MAGIC:
        raise VolumeIOError(f"bad VOXV1 header: {header!r}")
    try:
        h, w, d = (int(p) for p in parts[1:4])
        spacing = tuple(float(p) for p in parts[4:7])
        domain = Domain(parts[7])
    except ValueError as exc:
        raise VolumeIOError(f"bad VOXV1 header: {header!r}") from exc
    dtype_name = parts[8]
    if dtype_name not in _DTYPE_NAMES:
        raise VolumeIOError(f"unknown dtype {dtype_name!r}")
    dt = np.dtype(_DTYPE_NAMES[dtype_name])
    expected = h * w * d * dt.itemsize
    if len(payload) != expected:
        raise VolumeIOError(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype=dt).reshape(d, h, w)
    voxels = np.moveaxis(flat, 0, 2).astype(dtype_name)
    return CtVolume(voxels, spacing, domain)
