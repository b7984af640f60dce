from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from app.errors import GeometryError
from app.models.base_model import BaseModel
from app.models.geometry import RigidTransform
from app.models.volume import BBox, Mask


class WeberLabel(str, Enum):
    """Danis-Weber type of a lateral malleolar fracture."""

    A = 'A'
    B = 'B'
    C = 'C'

    @property
    def index(self):
        return 'ABC'.index(self.value)

    @classmethod
    def from_index(cls, index):
        return cls('ABC'[int(index)])

    @classmethod
    def from_plane(cls, fracture_z, z_lo, z_hi):
        """A below the syndesmosis, B at its level, C above it."""
        if fracture_z < z_lo:
            return cls.A
        if fracture_z <= z_hi:
            return cls.B
        return cls.C


NUM_CLASSES = len(WeberLabel)


@dataclass(frozen=True)
class PhantomParams(BaseModel):
    """Geometry of one synthetic ankle; lengths in mm, z positions in voxel slices."""

    dims: Tuple[int, int, int] = (32, 32, 32)
    spacing: Tuple[float, float, float] = (1.75, 1.75, 1.0)
    tibia_radius: float = 8.0
    fibula_radius: float = 4.5
    taper: float = 0.15
    bone_clearance: float = 2.5
    syndesmosis_lo: int = 12
    syndesmosis_hi: int = 18
    syndesmosis_bulge: float = 1.5
    fibula_bottom: int = 3
    bone_top: int = 29
    fracture_z: int = 15
    fracture_gap: int = 2
    fragment_rotation_deg: float = 4.0
    fragment_translation_mm: float = 1.0
    pose_rotation_deg: float = 15.0
    pose_tilt_deg: float = 3.0
    pose_translation_mm: Tuple[float, float, float] = (10.0, 10.0, 2.0)
    contralateral: bool = True
    crop_margin: int = 8

    def __post_init__(self):
        object.__setattr__(self, 'dims', tuple(int(v) for v in self.dims))
        object.__setattr__(self, 'spacing', tuple(float(v) for v in self.spacing))
        object.__setattr__(self, 'pose_translation_mm', tuple(float(v) for v in self.pose_translation_mm))
        if any(d <= 0 for d in self.dims) or any(s <= 0 for s in self.spacing):
            raise GeometryError("phantom dims and spacing must be positive")
        if not 0 <= self.syndesmosis_lo < self.syndesmosis_hi < self.dims[2]:
            raise GeometryError(
                f"syndesmosis range [{self.syndesmosis_lo}, {self.syndesmosis_hi}] invalid for dims {self.dims}")
        if self.tibia_radius <= 0 or self.fibula_radius <= 0:
            raise GeometryError("bone radii must be positive")
        if self.fracture_gap < 1:
            raise GeometryError("fracture gap must be at least one slice")
        if not 0 <= self.fibula_bottom < self.syndesmosis_lo or not self.syndesmosis_hi < self.bone_top <= self.dims[2]:
            raise GeometryError("bone extent must enclose the syndesmosis")

    @property
    def label(self):
        return WeberLabel.from_plane(self.fracture_z, self.syndesmosis_lo, self.syndesmosis_hi)

    @property
    def extent(self):
        return np.asarray(self.dims, dtype=np.float64) * np.asarray(self.spacing)

    @property
    def tibia_center(self):
        """Bone axis position (x, y) in mm, measured from the grid origin."""
        extent = self.extent
        width = (2.0 * self.tibia_radius + self.bone_clearance
                 + 2.0 * self.fibula_radius + self.syndesmosis_bulge)
        x = 0.5 * extent[0] - 0.5 * width + self.tibia_radius
        return np.array([x, 0.5 * extent[1]])

    @property
    def fibula_center(self):
        tibia = self.tibia_center
        return np.array([tibia[0] + self.tibia_radius + self.bone_clearance + self.fibula_radius, tibia[1]])

    def radius_at(self, radius, z_index):
        """Bones taper linearly towards the distal (low z) end."""
        height = max(self.bone_top - self.fibula_bottom, 1)
        frac = np.clip((self.bone_top - np.asarray(z_index, dtype=np.float64)) / height, 0.0, 1.0)
        return radius * (1.0 - self.taper * frac)

    def syndesmosis_box(self):
        """Crop box around the tibiofibular joint on the healthy template."""
        spacing = np.asarray(self.spacing)
        margin_mm = 2.0 * spacing[:2]
        lo_mm = np.array([self.tibia_center[0] - self.tibia_radius,
                          self.tibia_center[1] - self.tibia_radius]) - margin_mm
        hi_mm = np.array([self.fibula_center[0] + self.fibula_radius + self.syndesmosis_bulge,
                          self.tibia_center[1] + self.tibia_radius]) + margin_mm
        lo_xy = np.floor(lo_mm / spacing[:2]).astype(int)
        hi_xy = np.ceil(hi_mm / spacing[:2]).astype(int)
        lo = (lo_xy[0], lo_xy[1], self.syndesmosis_lo - self.crop_margin)
        hi = (hi_xy[0], hi_xy[1], self.syndesmosis_hi + 1 + self.crop_margin)
        return BBox(lo, hi).clipped(self.dims)


@dataclass(frozen=True)
class PhantomRanges(BaseModel):
    """Sampling ranges for dataset generation."""

    tibia_radius: Tuple[float, float] = (7.5, 8.5)
    fibula_radius: Tuple[float, float] = (4.0, 5.0)
    fracture_gap: Tuple[int, int] = (2, 3)
    boundary_clearance: int = 1
    plane_span: int = 6
    fragment_rotation_deg: float = 4.0
    fragment_translation_mm: float = 1.0
    pose_rotation_deg: float = 15.0
    pose_tilt_deg: float = 3.0
    pose_translation_mm: Tuple[float, float, float] = (10.0, 10.0, 2.0)

    def __post_init__(self):
        if self.fracture_gap[0] < 1 or self.fracture_gap[0] > self.fracture_gap[1]:
            raise GeometryError(f"invalid fracture gap range {self.fracture_gap}")
        if self.plane_span < 1 or self.boundary_clearance < 0:
            raise GeometryError("plane span must be positive and clearance nonnegative")


@dataclass(frozen=True, eq=False)
class PhantomCase(BaseModel):
    """Healthy template, fractured contralateral ankle and ground truth."""

    healthy: Mask
    fractured: Mask
    label: WeberLabel
    params: PhantomParams
    pose: RigidTransform
    case_id: str = ''
    split: str = ''

    @property
    def crop_box(self):
        return self.params.syndesmosis_box()


@dataclass(frozen=True, eq=False)
class Dataset(BaseModel):
    """Phantom cases grouped by split."""

    cases: List[PhantomCase] = field(default_factory=list)

    def split(self, name):
        return [case for case in self.cases if case.split == name]

    def counts(self, name: Optional[str] = None):
        cases = self.cases if name is None else self.split(name)
        out = {label: 0 for label in WeberLabel}
        for case in cases:
            out[case.label] += 1
        return out
