from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.errors import GeometryError, RegistrationError
from app.models.base_model import BaseModel

ORTHONORMAL_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class PointCloud(BaseModel):
    """Physical 3D points in mm, shape (N, 3), with optional unit normals."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise RegistrationError("point cloud coordinates must be finite")
        object.__setattr__(self, 'points', points)
        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if normals.shape != points.shape or not np.all(np.isfinite(normals)):
                raise RegistrationError(f"normals must be finite and match the points, got {normals.shape}")
            object.__setattr__(self, 'normals', normals)

    def __len__(self):
        return int(self.points.shape[0])

    @property
    def centroid(self):
        if len(self) == 0:
            raise RegistrationError("empty point cloud has no centroid")
        return self.points.mean(axis=0)


@dataclass(frozen=True, eq=False)
class RigidTransform(BaseModel):
    """Maps source physical coordinates to target: p' = scale * R p + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        scale = float(self.scale)
        if np.linalg.norm(rotation.T @ rotation - np.eye(3)) > ORTHONORMAL_TOLERANCE:
            raise GeometryError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise GeometryError("rotation matrix must have determinant +1")
        if not scale > 0:
            raise GeometryError(f"scale must be positive, got {scale}")
        if not np.all(np.isfinite(translation)):
            raise GeometryError("translation must be finite")
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)
        object.__setattr__(self, 'scale', scale)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, offset):
        return cls(translation=np.asarray(offset, dtype=np.float64))

    @classmethod
    def from_matrix(cls, matrix):
        """Build from a 4x4 homogeneous similarity matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        linear = matrix[:3, :3]
        scale = float(np.cbrt(np.linalg.det(linear)))
        if scale <= 0:
            raise GeometryError("matrix is not a proper similarity transform")
        return cls(rotation=linear / scale, translation=matrix[:3, 3], scale=scale)

    @classmethod
    def about_center(cls, rotation, center, translation=None, scale=1.0):
        """Rotate (and scale) about `center`, then translate."""
        rotation = np.asarray(rotation, dtype=np.float64)
        center = np.asarray(center, dtype=np.float64)
        offset = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
        t = center - scale * rotation @ center + offset
        return cls(rotation=rotation, translation=t, scale=scale)

    @property
    def matrix(self):
        out = np.eye(4)
        out[:3, :3] = self.scale * self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self):
        r_inv = self.rotation.T
        s_inv = 1.0 / self.scale
        return RigidTransform(rotation=r_inv, translation=-s_inv * r_inv @ self.translation,
                              scale=s_inv)

    def compose(self, first):
        """Transform equal to applying `first`, then self."""
        return RigidTransform(
            rotation=self.rotation @ first.rotation,
            translation=self.scale * self.rotation @ first.translation + self.translation,
            scale=self.scale * first.scale,
        )

    def rotation_angle_deg(self):
        cos = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(cos)))


def rotation_matrix(axis, degrees):
    """Rotation about a coordinate axis ('x', 'y' or 'z')."""
    theta = np.radians(degrees)
    c, s = np.cos(theta), np.sin(theta)
    if axis == 'x':
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == 'y':
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == 'z':
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise GeometryError(f"unknown axis: {axis}")


@dataclass(frozen=True)
class IcpConfig(BaseModel):
    """Iterative closest point settings."""

    max_iterations: int = 50
    convergence_epsilon: float = 1e-8
    allow_scale: bool = False
    max_correspondence_distance: Optional[float] = None

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise RegistrationError("max_iterations must be at least 1")
        if not self.convergence_epsilon > 0:
            raise RegistrationError("convergence_epsilon must be positive")
        if self.max_correspondence_distance is not None and not self.max_correspondence_distance > 0:
            raise RegistrationError("max_correspondence_distance must be positive")


@dataclass(frozen=True, eq=False)
class IcpResult(BaseModel):
    """Outcome of an ICP run."""

    transform: RigidTransform
    rms_residual: float
    iterations: int
    converged: bool
    history: List[float] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class RegistrationResult(BaseModel):
    """Fractured-to-healthy registration with the warped mask."""

    transform: RigidTransform
    rms_residual: float
    iterations: int
    converged: bool
    transformed: object
    mirror_plane_x: Optional[float] = None
