"""3D scalar volumes and sparse label volumes.

Arrays are indexed ``data[i, j, k]`` with shape ``(H, W, L)``. The linear
voxel index used on disk and by :func:`encode_index` is x-fastest,
``i + H * (j + W * k)``, which is the NIfTI payload order.
"""
from dataclasses import dataclass, field

import numpy as np

UNLABELED = 255
NUCLEI = ("AN", "CM", "LD", "LP", "MD", "PuA", "PuL", "VA", "VLA", "VLP", "VPL", "VPM", "CL")
NUM_CLASSES = len(NUCLEI) + 1  # nuclei + background

# left-right is the first (x) voxel axis
LR_AXIS = 0


def encode_index(i, j, k, dims):
    h, w, _ = dims
    return i + h * (j + w * k)


def decode_index(n, dims):
    h, w, _ = dims
    i = n % h
    j = (n // h) % w
    k = n // (h * w)
    return i, j, k


def _check_geometry(shape, spacing, affine):
    if len(shape) != 3 or any(int(s) < 1 for s in shape):
        raise ValueError(f"volume dims must be three positive integers, got {shape}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    if affine is None:
        affine = np.diag(spacing + (1.0,))
    affine = np.array(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got shape {affine.shape}")
    affine.setflags(write=False)
    return spacing, affine


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Single-channel scalar field on a voxel grid.

    ``data`` is copied and made read-only. Non-finite intensities raise unless
    ``allow_nonfinite`` is set.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = None
    allow_nonfinite: bool = field(default=False, repr=False)

    def __post_init__(self):
        data = np.array(self.data)
        if data.dtype.kind not in "fiu":
            raise TypeError(f"volume data must be numeric, got {data.dtype}")
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        spacing, affine = _check_geometry(data.shape, self.spacing, self.affine)
        if not self.allow_nonfinite and not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities (pass allow_nonfinite=True to keep them)")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data, **kw):
        return Volume3D(data, self.spacing, self.affine, **kw)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.affine, other.affine)
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class SparseLabelVolume:
    """Per-voxel labels: 0 background, 1..13 nuclei, ``UNLABELED`` (255) unknown."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = None
    class_names: tuple = NUCLEI

    def __post_init__(self):
        lab = np.array(self.labels)
        if lab.dtype.kind not in "iu":
            raise TypeError(f"labels must be integers, got {lab.dtype}")
        bad = (lab != UNLABELED) & ((lab < 0) | (lab > len(self.class_names)))
        if bad.any():
            raise ValueError(f"label values must be UNLABELED or in [0, {len(self.class_names)}]; "
                             f"found {np.unique(lab[bad])[:5].tolist()}")
        lab = lab.astype(np.uint8)
        spacing, affine = _check_geometry(lab.shape, self.spacing, self.affine)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def dims(self):
        return self.labels.shape

    @property
    def labeled(self):
        return self.labels != UNLABELED

    def with_labels(self, labels):
        return SparseLabelVolume(labels, self.spacing, self.affine, self.class_names)

    def __eq__(self, other):
        if not isinstance(other, SparseLabelVolume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.affine, other.affine)
            and np.array_equal(self.labels, other.labels)
            and self.class_names == other.class_names
        )


def _array(vol):
    return vol.labels if isinstance(vol, SparseLabelVolume) else vol.data


def _rebuild(vol, arr, affine):
    if isinstance(vol, SparseLabelVolume):
        return SparseLabelVolume(arr, vol.spacing, affine, vol.class_names)
    return Volume3D(arr, vol.spacing, affine, allow_nonfinite=vol.allow_nonfinite)


def crop(vol, origin, size):
    """Cut a ``size`` box starting at voxel ``origin``; world positions are kept."""
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    for axis, (o, s, d) in enumerate(zip(origin, size, vol.dims)):
        if o < 0 or s < 1 or o + s > d:
            raise IndexError(f"crop out of bounds on axis {axis}: origin {o} + size {s} exceeds dim {d}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    shift = np.eye(4)
    shift[:3, 3] = origin
    return _rebuild(vol, _array(vol)[sl], vol.affine @ shift)


def center_crop(vol, size):
    origin = [(d - s) // 2 for d, s in zip(vol.dims, size)]
    return crop(vol, origin, size)


def flip_lr(vol):
    """Reverse the voxel order along the left-right axis (affine unchanged)."""
    return _rebuild(vol, np.flip(_array(vol), axis=LR_AXIS), vol.affine)
