from dataclasses import dataclass
from typing import ClassVar, Optional, Tuple

import numpy as np

from app.errors import GeometryError
from app.models.base_model import BaseModel

MASK_LABELS = (0, 1, 2)
TIBIA = 1
FIBULA = 2


def _as_triple(values, name, positive=False):
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise GeometryError(f"{name} must have 3 components, got {len(values)}")
    if not all(np.isfinite(values)):
        raise GeometryError(f"{name} must be finite")
    if positive and any(v <= 0 for v in values):
        raise GeometryError(f"{name} components must be positive: {values}")
    return values


@dataclass(frozen=True, eq=False)
class Volume(BaseModel):
    """Scalar voxel volume indexed [x, y, z] with physical spacing in mm."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    kind: ClassVar[str] = 'volume'

    def __post_init__(self):
        data = self._coerce(np.asarray(self.data))
        if data.ndim != 3:
            raise GeometryError(f"{self.kind} data must be 3-dimensional, got shape {data.shape}")
        if any(d <= 0 for d in data.shape):
            raise GeometryError(f"nonpositive dimension: {data.shape}")
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'spacing', _as_triple(self.spacing, 'spacing', positive=True))
        object.__setattr__(self, 'origin', _as_triple(self.origin, 'origin'))

    @staticmethod
    def _coerce(data):
        return data.astype(np.float64, copy=False)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    @property
    def extent(self):
        """Physical size of the grid in mm per axis."""
        return np.asarray(self.dims, dtype=np.float64) * np.asarray(self.spacing)

    @property
    def center(self):
        """Physical coordinate of the grid centre."""
        return np.asarray(self.origin) + 0.5 * self.extent

    def index_to_physical(self, indices):
        """Voxel-centre convention: origin + (index + 0.5) * spacing."""
        indices = np.asarray(indices, dtype=np.float64)
        return np.asarray(self.origin) + (indices + 0.5) * np.asarray(self.spacing)

    def physical_to_index(self, points):
        """Continuous voxel index of physical points."""
        points = np.asarray(points, dtype=np.float64)
        return (points - np.asarray(self.origin)) / np.asarray(self.spacing) - 0.5

    def grid_points(self):
        """Physical coordinates of every voxel centre, shape (X, Y, Z, 3)."""
        axes = [np.asarray(self.origin[a]) + (np.arange(n) + 0.5) * self.spacing[a]
                for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)

    def same_grid(self, other):
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing)
                and np.allclose(self.origin, other.origin))

    def with_data(self, data):
        """Return a value of the same kind on this grid with new data."""
        return type(self)(data=data, spacing=self.spacing, origin=self.origin)

    def equals(self, other):
        return (type(self) is type(other)
                and self.spacing == other.spacing
                and self.origin == other.origin
                and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))

    def __repr__(self):
        return f'<{type(self).__name__} dims={self.dims} spacing={self.spacing}>'


@dataclass(frozen=True, eq=False, repr=False)
class Mask(Volume):
    """Label volume: 0 background, 1 tibia, 2 fibula."""

    kind: ClassVar[str] = 'mask'

    @staticmethod
    def _coerce(data):
        if data.size and not np.isin(np.unique(data), MASK_LABELS).all():
            raise GeometryError(f"mask labels must be in {MASK_LABELS}")
        return data.astype(np.uint8, copy=False)

    def foreground(self, label=None):
        """Boolean array of voxels carrying `label` (any nonzero label when None)."""
        if label is None or label == 'both':
            return self.data > 0
        return self.data == label

    def label_counts(self):
        return {label: int(np.count_nonzero(self.data == label)) for label in MASK_LABELS}

    def is_anatomical(self):
        return bool(np.any(self.data))


@dataclass(frozen=True)
class BBox(BaseModel):
    """Voxel box, min inclusive and max exclusive."""

    min_corner: Tuple[int, int, int]
    max_corner: Tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min_corner)
        hi = tuple(int(v) for v in self.max_corner)
        if len(lo) != 3 or len(hi) != 3:
            raise GeometryError("bounding box corners must have 3 components")
        if any(a >= b for a, b in zip(lo, hi)):
            raise GeometryError(f"bounding box min must be below max: {lo} / {hi}")
        object.__setattr__(self, 'min_corner', lo)
        object.__setattr__(self, 'max_corner', hi)

    @property
    def shape(self):
        return tuple(b - a for a, b in zip(self.min_corner, self.max_corner))

    def slices(self):
        return tuple(slice(a, b) for a, b in zip(self.min_corner, self.max_corner))

    def within(self, dims):
        return all(a >= 0 for a in self.min_corner) and all(
            b <= d for b, d in zip(self.max_corner, dims))

    def offset(self, inner):
        """Express a box given relative to this one in this box's parent coordinates."""
        lo = tuple(a + b for a, b in zip(self.min_corner, inner.min_corner))
        hi = tuple(a + b for a, b in zip(self.min_corner, inner.max_corner))
        return BBox(lo, hi)

    def clipped(self, dims):
        lo = tuple(max(0, a) for a in self.min_corner)
        hi = tuple(min(d, b) for b, d in zip(self.max_corner, dims))
        return BBox(lo, hi)

    def to_string(self):
        return ' '.join(str(v) for v in self.min_corner + self.max_corner)

    @classmethod
    def from_string(cls, text: str, dims: Optional[Tuple[int, int, int]] = None):
        values = [int(v) for v in text.replace(',', ' ').split()]
        if len(values) != 6:
            raise GeometryError(f"bounding box needs 6 integers, got '{text}'")
        box = cls(tuple(values[:3]), tuple(values[3:]))
        if dims is not None and not box.within(dims):
            raise GeometryError(f"bounding box {text} outside dims {dims}")
        return box
