import json
import os

import numpy as np
from marshmallow import Schema, ValidationError, fields, validate
from scipy import ndimage
from scipy.spatial import cKDTree

from app.errors import RegistrationError
from app.models.geometry import IcpConfig, IcpResult, PointCloud, RegistrationResult, RigidTransform, rotation_matrix
from app.models.volume import FIBULA, TIBIA
from app.services.base_service import BaseService
from app.services.volume_service import VolumeService

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)
RANK_TOLERANCE = 1e-12
SEED_TURNS_DEG = (-10.0, 10.0)
HOP_FRACTIONS = (1.0, 0.5)
HOP_ROUNDS = 3

# sub-voxel surface sampling, in index units unless noted
SURFACE_SIGMA_MM = 1.25
ISO_LEVEL = 0.5
LEVEL_TOLERANCE = 0.02
NEWTON_STEPS = 4
MAX_NEWTON_STEP = 0.5
MAX_DRIFT = 2.0
GRADIENT_FLOOR = 1e-6
TARGET_DENSITY = 2


class TransformSchema(Schema):
    """Schema for a registration result written as JSON."""

    rotation = fields.List(fields.Float(allow_nan=False), required=True, validate=validate.Length(equal=9))
    translation = fields.List(fields.Float(allow_nan=False), required=True, validate=validate.Length(equal=3))
    scale = fields.Float(required=True, validate=validate.Range(min=0, min_inclusive=False))
    rms_residual = fields.Float(load_default=None, allow_none=True)
    iterations = fields.Int(load_default=None, allow_none=True)
    converged = fields.Bool(load_default=None, allow_none=True)
    mirror_plane_x = fields.Float(load_default=None, allow_none=True)


class RegistrationService(BaseService):
    """Mirror-and-ICP alignment of fractured masks onto healthy templates."""

    def __init__(self, config=None):
        super().__init__(config)
        self.volume_service = VolumeService(self.config)
        self.transform_schema = TransformSchema()

    def default_icp_config(self):
        return IcpConfig(
            max_iterations=self.config.ICP_MAX_ITERATIONS,
            convergence_epsilon=self.config.ICP_CONVERGENCE_EPSILON,
            allow_scale=self.config.ICP_ALLOW_SCALE,
            max_correspondence_distance=self.config.ICP_MAX_CORRESPONDENCE_DISTANCE,
        )

    def extract_surface_points(self, mask, label='both'):
        """Voxel centres of foreground voxels with at least one background 6-neighbour."""
        region = mask.foreground(None if label == 'both' else label)
        if not region.any():
            raise RegistrationError(f"mask has no voxels with label {label}")
        interior = ndimage.binary_erosion(region, structure=SIX_CONNECTED, border_value=0)
        surface = np.argwhere(region & ~interior)
        return PointCloud(mask.index_to_physical(surface))

    def surface_samples(self, mask, label='both', density=1):
        """Points on the smoothed label boundary with outward unit normals.

        Each label is blurred on its own, so touching bones never merge.
        Boundary voxels, split into density**3 sub-voxel seeds, are moved
        onto the half level of the blurred field by a few Newton steps
        along its gradient; seeds that fail to settle are dropped.
        """
        labels = (TIBIA, FIBULA) if label in (None, 'both') else (label,)
        spacing = np.asarray(mask.spacing, dtype=np.float64)
        offsets = (np.arange(density) + 0.5) / density - 0.5
        sub = np.stack(np.meshgrid(offsets, offsets, offsets, indexing='ij'), axis=-1).reshape(-1, 3)

        points, normals = [], []
        for value in labels:
            region = mask.foreground(value)
            if not region.any():
                continue
            field = ndimage.gaussian_filter(region.astype(np.float64), sigma=SURFACE_SIGMA_MM / spacing,
                                            mode='constant')
            gradient = np.gradient(field)
            interior = ndimage.binary_erosion(region, structure=SIX_CONNECTED, border_value=0)
            seeds = np.argwhere(region & ~interior).astype(np.float64)
            seeds = (seeds[:, None, :] + sub[None, :, :]).reshape(-1, 3)
            located, slope = self._settle_on_level(field, gradient, seeds)
            outward = -slope / spacing
            outward /= np.linalg.norm(outward, axis=1, keepdims=True)
            points.append(located)
            normals.append(outward)

        if not points or not sum(len(p) for p in points):
            raise RegistrationError(f"mask has no surface with label {label}")
        return PointCloud(mask.index_to_physical(np.concatenate(points)), normals=np.concatenate(normals))

    @staticmethod
    def _settle_on_level(field, gradient, seeds):
        upper = np.asarray(field.shape, dtype=np.float64) - 1.0

        def sample(points):
            coords = points.T
            value = ndimage.map_coordinates(field, coords, order=1, mode='nearest')
            slope = np.stack([ndimage.map_coordinates(g, coords, order=1, mode='nearest') for g in gradient], axis=1)
            return value, slope

        points = seeds.copy()
        for _ in range(NEWTON_STEPS):
            value, slope = sample(points)
            norm2 = np.sum(slope * slope, axis=1)
            step = np.zeros_like(points)
            moving = norm2 > GRADIENT_FLOOR
            step[moving] = ((value[moving] - ISO_LEVEL) / norm2[moving])[:, None] * slope[moving]
            length = np.linalg.norm(step, axis=1, keepdims=True)
            step *= np.minimum(1.0, MAX_NEWTON_STEP / np.maximum(length, GRADIENT_FLOOR))
            points = np.clip(points - step, 0.0, upper)

        value, slope = sample(points)
        keep = ((np.abs(value - ISO_LEVEL) < LEVEL_TOLERANCE)
                & (np.sum(slope * slope, axis=1) > GRADIENT_FLOOR)
                & (np.linalg.norm(points - seeds, axis=1) <= MAX_DRIFT))
        return points[keep], slope[keep]

    def mirror_cloud(self, cloud, plane_x):
        """Reflect x about the plane x = plane_x."""
        if not np.isfinite(plane_x):
            raise RegistrationError(f"mirror plane must be finite, got {plane_x}")
        points = cloud.points.copy()
        points[:, 0] = 2.0 * plane_x - points[:, 0]
        normals = None
        if cloud.normals is not None:
            normals = cloud.normals.copy()
            normals[:, 0] = -normals[:, 0]
        return PointCloud(points, normals=normals)

    def estimate_transform(self, src, dst, allow_scale=False):
        """Least-squares rigid (or similarity) fit of index-paired points.

        Args:
            src: PointCloud or (N, 3) array of source points
            dst: PointCloud or (N, 3) array of matched target points
            allow_scale: also fit a uniform scale

        Returns:
            RigidTransform mapping src onto dst
        """
        a = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=np.float64)
        b = dst.points if isinstance(dst, PointCloud) else np.asarray(dst, dtype=np.float64)
        if a.shape != b.shape:
            raise RegistrationError(f"paired clouds differ in shape: {a.shape} vs {b.shape}")
        if a.shape[0] < 3:
            raise RegistrationError(f"need at least 3 correspondences, got {a.shape[0]}")

        ca = a.mean(axis=0)
        cb = b.mean(axis=0)
        aa = a - ca
        bb = b - cb
        u, s, vt = np.linalg.svd(aa.T @ bb)
        if s[0] <= 0 or s[1] <= RANK_TOLERANCE * s[0]:
            raise RegistrationError("degenerate configuration: cross-covariance rank below 2")

        d = np.ones(3)
        if np.linalg.det(vt.T @ u.T) < 0:
            d[-1] = -1.0
        rotation = vt.T @ np.diag(d) @ u.T

        scale = 1.0
        if allow_scale:
            scale = float(np.sum(s * d) / np.sum(aa * aa))
        translation = cb - scale * rotation @ ca
        return RigidTransform(rotation=rotation, translation=translation, scale=scale)

    def icp(self, src, dst, cfg=None, init=None):
        """Iterative closest point from src onto dst.

        Each round pairs every moved source point with its nearest target
        point (projected onto the target's tangent plane when dst carries
        normals) and refits the transform with estimate_transform. A run
        stops when the Frobenius norm of the change of the homogeneous
        matrix drops below cfg.convergence_epsilon, or after
        cfg.max_iterations rounds. history[i] is the RMS correspondence
        distance at the start of round i + 1.

        Without init the clouds start centroid-aligned. Unless that run
        already fits exactly, runs restarted from small turns about z and,
        for normal-free clouds, from grid-step shifts are tried as well;
        the lowest residual wins and its own history is returned.
        """
        cfg = cfg or self.default_icp_config()
        if len(src) < 3 or len(dst) < 3:
            raise RegistrationError(f"ICP needs at least 3 points per cloud, got {len(src)} and {len(dst)}")
        tree = cKDTree(dst.points)
        if init is None:
            init = RigidTransform.from_translation(dst.centroid - src.centroid)

        best = self._icp_run(src, dst, tree, cfg, init)
        if self._settled(best, cfg):
            return best
        for angle in SEED_TURNS_DEG:
            seed = RigidTransform.about_center(rotation_matrix('z', angle), dst.centroid).compose(init)
            best = self._better(best, self._try_run(src, dst, tree, cfg, seed))
        if dst.normals is None:
            best = self._hop_search(src, dst, tree, cfg, best)
        self.logger.debug(f"ICP kept run with rms={best.rms_residual:.6g} after {best.iterations} iterations")
        return best

    def _icp_run(self, src, dst, tree, cfg, init):
        cap = np.inf if cfg.max_correspondence_distance is None else cfg.max_correspondence_distance
        transform = init
        previous = transform.matrix
        history = []
        converged = False

        iterations = 0
        for iterations in range(1, cfg.max_iterations + 1):
            moved = transform.apply(src.points)
            distances, indices = tree.query(moved, k=1, distance_upper_bound=cap)
            valid = np.isfinite(distances)
            if np.count_nonzero(valid) < 3:
                raise RegistrationError("fewer than 3 correspondences within the distance cap")
            targets, residuals = self._correspondences(moved[valid], dst, indices[valid])
            history.append(float(np.sqrt(np.mean(residuals ** 2))))

            delta = self.estimate_transform(moved[valid], targets, cfg.allow_scale)
            transform = delta.compose(transform)
            change = float(np.linalg.norm(transform.matrix - previous))
            previous = transform.matrix
            self.logger.debug(f"ICP iteration {iterations}: rms={history[-1]:.6g} change={change:.3g}")
            if change < cfg.convergence_epsilon:
                converged = True
                break

        moved = transform.apply(src.points)
        distances, indices = tree.query(moved, k=1, distance_upper_bound=cap)
        valid = np.isfinite(distances)
        rms = float('inf')
        if valid.any():
            _, residuals = self._correspondences(moved[valid], dst, indices[valid])
            rms = float(np.sqrt(np.mean(residuals ** 2)))
        return IcpResult(transform=transform, rms_residual=rms, iterations=iterations,
                         converged=converged, history=history)

    @staticmethod
    def _correspondences(points, dst, indices):
        matched = dst.points[indices]
        if dst.normals is None:
            return matched, np.linalg.norm(matched - points, axis=1)
        normals = dst.normals[indices]
        offset = np.sum((matched - points) * normals, axis=1)
        return points + offset[:, None] * normals, np.abs(offset)

    def _try_run(self, src, dst, tree, cfg, init):
        try:
            return self._icp_run(src, dst, tree, cfg, init)
        except RegistrationError as e:
            self.logger.debug(f"ICP restart dropped: {str(e)}")
            return None

    @staticmethod
    def _settled(result, cfg):
        return result.rms_residual <= cfg.convergence_epsilon

    @staticmethod
    def _better(best, candidate):
        if candidate is not None and candidate.rms_residual < best.rms_residual:
            return candidate
        return best

    def _hop_search(self, src, dst, tree, cfg, best):
        """Greedy restarts shifted along the source grid axes.

        Two voxel clouds on the same lattice attract each other whenever
        their points coincide, so a run can stall a whole grid step away
        from the true pose.
        """
        _, neighbours = cKDTree(src.points).query(src.points, k=2)
        step = float(np.median(neighbours[:, 1]))
        if not np.isfinite(step) or step <= 0:
            return best
        for _ in range(HOP_ROUNDS):
            if self._settled(best, cfg):
                break
            axes = best.transform.scale * best.transform.rotation
            round_best = best
            for fraction in HOP_FRACTIONS:
                for axis in range(3):
                    for sign in (-1.0, 1.0):
                        shift = RigidTransform.from_translation(sign * fraction * step * axes[:, axis])
                        candidate = self._try_run(src, dst, tree, cfg, shift.compose(best.transform))
                        round_best = self._better(round_best, candidate)
            if round_best is best:
                break
            best = round_best
        return best

    def apply_transform(self, mask, transform, reference=None):
        """Warp a mask by inverse mapping with nearest-neighbour sampling."""
        return self.volume_service.warp(mask, transform, reference)

    def register_pair(self, fractured, healthy, cfg=None, mirror=True, label='both'):
        """Mirror the fractured ankle, align it to the healthy template and warp it onto its grid.

        Alignment runs on sub-voxel surface samples and the mask is carried
        over with the label-wise anti-aliased warp.
        """
        try:
            src = self.surface_samples(fractured, label)
            dst = self.surface_samples(healthy, label, density=TARGET_DENSITY)

            plane_x = None
            if mirror:
                plane_x = float(src.centroid[0])
                src = self.mirror_cloud(src, plane_x)
            init = RigidTransform.from_translation(dst.centroid - src.centroid)
            result = self.icp(src, dst, cfg, init=init)

            moving = fractured
            to_mirrored = RigidTransform.identity()
            if mirror:
                # flip() mirrors about the grid centre; shift onto the centroid plane
                moving = self.volume_service.flip(fractured, 'x')
                offset = 2.0 * (plane_x - fractured.center[0])
                to_mirrored = RigidTransform.from_translation([offset, 0.0, 0.0])
            warped = self.volume_service.warp_labels(moving, result.transform.compose(to_mirrored), reference=healthy)
        except RegistrationError as e:
            self.logger.error(f"Error registering pair: {str(e)}")
            raise

        self.logger.info(
            f"Registered pair in {result.iterations} iterations, rms={result.rms_residual:.4f} mm, "
            f"rotation={result.transform.rotation_angle_deg():.2f} deg")
        return RegistrationResult(transform=result.transform, rms_residual=result.rms_residual,
                                  iterations=result.iterations, converged=result.converged,
                                  transformed=warped, mirror_plane_x=plane_x)

    def crop_syndesmosis(self, transformed, healthy_box):
        """Crop the registered mask with the box drawn on the healthy template."""
        return self.volume_service.crop(transformed, healthy_box)

    # ------------------------------------------------------------ transform files

    def transform_to_dict(self, result):
        transform = result.transform
        return {
            'rotation': transform.rotation.reshape(-1).tolist(),
            'translation': transform.translation.tolist(),
            'scale': transform.scale,
            'rms_residual': result.rms_residual,
            'iterations': result.iterations,
            'converged': result.converged,
            'mirror_plane_x': getattr(result, 'mirror_plane_x', None),
        }

    def save_transform(self, result, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w') as handle:
            json.dump(self.transform_to_dict(result), handle, indent=2, sort_keys=True)

    def load_transform(self, path):
        try:
            with open(path) as handle:
                data = self.transform_schema.load(json.load(handle))
        except (OSError, json.JSONDecodeError) as e:
            raise RegistrationError(f"cannot read transform {path}: {str(e)}") from e
        except ValidationError as e:
            raise RegistrationError(f"invalid transform {path}: {e.messages}") from e
        return RigidTransform(rotation=np.reshape(data['rotation'], (3, 3)),
                              translation=data['translation'], scale=data['scale'])
