import csv
import os

import numpy as np
from scipy import ndimage

from app.errors import GeometryError
from app.models.geometry import RigidTransform, rotation_matrix
from app.models.phantom import Dataset, PhantomCase, PhantomParams, PhantomRanges, WeberLabel
from app.models.volume import FIBULA, TIBIA, BBox, Mask
from app.services.base_service import BaseService
from app.services.volume_service import VolumeService

SPLITS = ('labeled', 'unlabeled', 'test')
MANIFEST_FIELDS = ['path', 'split', 'label', 'fracture_z', 'syndesmosis_lo', 'syndesmosis_hi',
                   'healthy_path', 'crop_box']
# ground truth of every case, unlabeled ones included; read for evaluation only
ORACLE_FIELDS = ['path', 'fracture_z', 'hidden_label']
ORACLE_FILE = 'oracle.csv'
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def count_components(mask, label):
    """Number of 6-connected components carrying `label`."""
    _, count = ndimage.label(mask.foreground(label), structure=SIX_CONNECTED)
    return int(count)


class PhantomService(BaseService):
    """Synthetic tibia/fibula phantoms with ground-truth Weber labels."""

    def __init__(self, config=None):
        super().__init__(config)
        self.volume_service = VolumeService(self.config)

    # --------------------------------------------------------- rendering

    def render_mask(self, params, pose=None, mirror=False, fracture=None):
        """Rasterise the two bones at voxel centres.

        Observed voxels are mapped back to the canonical ankle through the
        inverse pose and, for a contralateral ankle, a mirror about the
        volume's central x plane. `fracture` is the distal fragment
        displacement, or None for an intact fibula.
        """
        template = Mask(data=np.zeros(params.dims, dtype=np.uint8), spacing=params.spacing)
        points = template.grid_points().reshape(-1, 3)
        if pose is not None:
            points = pose.inverse().apply(points)
        if mirror:
            points = points.copy()
            points[:, 0] = params.extent[0] - points[:, 0]

        tibia = self._tibia(params, points)
        if fracture is None:
            fibula = self._fibula(params, points, lo=params.fibula_bottom, hi=params.bone_top)
        else:
            proximal = self._fibula(params, points, lo=params.fracture_z + params.fracture_gap, hi=params.bone_top)
            distal = self._fibula(params, fracture.inverse().apply(points),
                                  lo=params.fibula_bottom, hi=params.fracture_z)
            fibula = proximal | distal

        labels = np.zeros(points.shape[0], dtype=np.uint8)
        labels[fibula] = FIBULA
        labels[tibia] = TIBIA
        return template.with_data(labels.reshape(params.dims))

    @staticmethod
    def _slice_index(params, points):
        return np.floor(points[:, 2] / params.spacing[2]).astype(np.int64)

    def _tibia(self, params, points):
        z = self._slice_index(params, points)
        radial = np.hypot(points[:, 0] - params.tibia_center[0], points[:, 1] - params.tibia_center[1])
        inside = (z >= params.syndesmosis_lo) & (z < params.bone_top)
        return inside & (radial <= params.radius_at(params.tibia_radius, z))

    def _fibula(self, params, points, lo, hi):
        z = self._slice_index(params, points)
        radial = np.hypot(points[:, 0] - params.fibula_center[0], points[:, 1] - params.fibula_center[1])
        radius = params.radius_at(params.fibula_radius, z)
        band = (z >= params.syndesmosis_lo) & (z <= params.syndesmosis_hi)
        radius = radius + np.where(band, params.syndesmosis_bulge, 0.0)
        return (z >= lo) & (z < hi) & (radial <= radius)

    # ---------------------------------------------------------- sampling

    def sample_pose(self, params, rng):
        """Random rigid pose about the volume centre within the configured ranges."""
        spin = rng.uniform(-params.pose_rotation_deg, params.pose_rotation_deg)
        tilt = rng.uniform(-params.pose_tilt_deg, params.pose_tilt_deg)
        offset = rng.uniform(-1.0, 1.0, size=3) * np.asarray(params.pose_translation_mm)
        rotation = rotation_matrix('z', spin) @ rotation_matrix('x', tilt)
        return RigidTransform.about_center(rotation, 0.5 * params.extent, offset)

    def sample_fragment(self, params, rng):
        """Small rigid displacement of the distal fibula about the top of the fragment."""
        axis_tilt = rng.uniform(-params.fragment_rotation_deg, params.fragment_rotation_deg)
        axis_spin = rng.uniform(-params.fragment_rotation_deg, params.fragment_rotation_deg)
        shift = np.zeros(3)
        shift[:2] = rng.uniform(-1.0, 1.0, size=2) * params.fragment_translation_mm
        center = np.array([params.fibula_center[0], params.fibula_center[1],
                           params.fracture_z * params.spacing[2]])
        rotation = rotation_matrix('x', axis_tilt) @ rotation_matrix('y', axis_spin)
        return RigidTransform.about_center(rotation, center, shift)

    def generate_pair(self, params, seed):
        """Healthy template, fractured contralateral ankle and its Weber label."""
        case = self.generate_case(params, seed)
        return case.healthy, case.fractured, case.label

    def generate_case(self, params, seed, case_id='', split=''):
        first = params.fibula_bottom + 1
        last = params.bone_top - 1 - params.fracture_gap
        if not first <= params.fracture_z <= last:
            raise GeometryError(
                f"fracture plane z={params.fracture_z} outside fibula extent [{first}, {last}]")
        rng = np.random.default_rng(seed)
        pose = self.sample_pose(params, rng)
        fragment = self.sample_fragment(params, rng)

        healthy = self.render_mask(params)
        fractured = self.render_mask(params, pose=pose, mirror=params.contralateral, fracture=fragment)
        return PhantomCase(healthy=healthy, fractured=fractured, label=params.label,
                           params=params, pose=pose, case_id=case_id, split=split)

    # -------------------------------------------------------- augmentation

    def augment(self, mask, seed, angle_deg=None, scale=None, flip_x=None, flip_y=None):
        """Random in-plane rotation, scale and left/right or front/back flips.

        Explicit keyword values override the sampled ones. The z axis is never
        flipped, since that would swap Weber A and C.
        """
        rng = np.random.default_rng(seed)
        sampled = (rng.uniform(-15.0, 15.0), rng.uniform(0.9, 1.1), rng.random() < 0.5, rng.random() < 0.5)
        angle = sampled[0] if angle_deg is None else angle_deg
        factor = sampled[1] if scale is None else scale
        mirror_x = sampled[2] if flip_x is None else flip_x
        mirror_y = sampled[3] if flip_y is None else flip_y

        out = mask
        if angle != 0.0 or factor != 1.0:
            transform = RigidTransform.about_center(rotation_matrix('z', angle), mask.center, scale=factor)
            out = self.volume_service.warp(mask, transform)
        if mirror_x:
            out = self.volume_service.flip(out, 'x')
        if mirror_y:
            out = self.volume_service.flip(out, 'y')
        return out

    # ------------------------------------------------------------ datasets

    def plane_range(self, label, params, ranges):
        """Fracture-plane z interval (inclusive) that yields `label`."""
        lo, hi, gap = params.syndesmosis_lo, params.syndesmosis_hi, params.fracture_gap
        clearance, span = ranges.boundary_clearance, ranges.plane_span
        if label is WeberLabel.A:
            bounds = (max(lo - span, params.fibula_bottom + 1), lo - 1 - clearance)
        elif label is WeberLabel.B:
            bounds = (lo + clearance, hi - clearance)
        else:
            bounds = (hi + 1 + clearance, min(hi + span, params.bone_top - 1 - gap))
        if bounds[0] > bounds[1]:
            raise GeometryError(f"no room for a type {label.value} fracture plane with {params}")
        return bounds

    def sample_params(self, label, ranges, rng, base=None):
        base = base or PhantomParams()
        gap = int(rng.integers(ranges.fracture_gap[0], ranges.fracture_gap[1] + 1))
        params = base.update(
            tibia_radius=float(rng.uniform(*ranges.tibia_radius)),
            fibula_radius=float(rng.uniform(*ranges.fibula_radius)),
            fracture_gap=gap,
            fragment_rotation_deg=ranges.fragment_rotation_deg,
            fragment_translation_mm=ranges.fragment_translation_mm,
            pose_rotation_deg=ranges.pose_rotation_deg,
            pose_tilt_deg=ranges.pose_tilt_deg,
            pose_translation_mm=tuple(ranges.pose_translation_mm),
        )
        first, last = self.plane_range(label, params, ranges)
        return params.update(fracture_z=int(rng.integers(first, last + 1)))

    def make_dataset(self, n_labeled, n_unlabeled, n_test, ranges=None, seed=0, base=None):
        """Class-balanced phantom splits; unlabeled cases keep a hidden label."""
        counts = {'labeled': n_labeled, 'unlabeled': n_unlabeled, 'test': n_test}
        if any(int(n) < 0 for n in counts.values()):
            raise GeometryError(f"split sizes must be nonnegative, got {counts}")
        if n_test % len(WeberLabel):
            raise GeometryError(f"test split of {n_test} cannot be balanced over {len(WeberLabel)} classes")
        ranges = ranges or PhantomRanges()
        rng = np.random.default_rng(seed)

        cases = []
        for split in SPLITS:
            n = int(counts[split])
            classes = rng.permutation(np.arange(n) % len(WeberLabel))
            for i, index in enumerate(classes):
                label = WeberLabel.from_index(index)
                params = self.sample_params(label, ranges, rng, base)
                case_seed = int(rng.integers(0, 2 ** 63 - 1))
                cases.append(self.generate_case(params, case_seed, case_id=f'{split}_{i:04d}', split=split))
            self.logger.info(f"Generated {n} {split} phantoms")
        return Dataset(cases=cases)

    def write_dataset(self, dataset, out_dir):
        """Write every case as RVOL plus manifest.csv and oracle.csv; returns the manifest path.

        Unlabeled rows of the manifest carry neither a label nor a fracture
        plane; their ground truth lives in oracle.csv only.
        """
        try:
            os.makedirs(out_dir, exist_ok=True)
            rows, oracle = [], []
            for case in dataset.cases:
                fractured_path = os.path.join(case.split, f'{case.case_id}_fractured.rvol')
                healthy_path = os.path.join(case.split, f'{case.case_id}_healthy.rvol')
                self.volume_service.save_volume(case.fractured, os.path.join(out_dir, fractured_path))
                self.volume_service.save_volume(case.healthy, os.path.join(out_dir, healthy_path))
                hidden = case.split == 'unlabeled'
                rows.append({
                    'path': fractured_path,
                    'split': case.split,
                    'label': '' if hidden else case.label.value,
                    'fracture_z': '' if hidden else case.params.fracture_z,
                    'syndesmosis_lo': case.params.syndesmosis_lo,
                    'syndesmosis_hi': case.params.syndesmosis_hi,
                    'healthy_path': healthy_path,
                    'crop_box': case.crop_box.to_string(),
                })
                oracle.append({'path': fractured_path, 'fracture_z': case.params.fracture_z,
                               'hidden_label': case.label.value})
            manifest = os.path.join(out_dir, 'manifest.csv')
            self._write_csv(manifest, MANIFEST_FIELDS, rows)
            self._write_csv(os.path.join(out_dir, ORACLE_FILE), ORACLE_FIELDS, oracle)
            self.logger.info(f"Wrote {len(rows)} cases to {out_dir}")
            return manifest
        except OSError as e:
            self.logger.error(f"Error writing dataset to {out_dir}: {str(e)}")
            raise GeometryError(f"cannot write dataset to {out_dir}: {e.strerror}") from e

    def read_manifest(self, data_dir):
        """Rows of manifest.csv with paths resolved against `data_dir`."""
        manifest = os.path.join(data_dir, 'manifest.csv')
        if not os.path.isfile(manifest):
            raise GeometryError(f"missing manifest: {manifest}")
        with open(manifest, newline='') as handle:
            rows = list(csv.DictReader(handle))
        for row in rows:
            missing = [name for name in MANIFEST_FIELDS[:6] if name not in row]
            if missing:
                raise GeometryError(f"manifest {manifest} lacks columns {missing}")
            row['path'] = os.path.join(data_dir, row['path'])
            if row.get('healthy_path'):
                row['healthy_path'] = os.path.join(data_dir, row['healthy_path'])
            row['fracture_z'] = int(row['fracture_z']) if row['fracture_z'] else None
            row['syndesmosis_lo'] = int(row['syndesmosis_lo'])
            row['syndesmosis_hi'] = int(row['syndesmosis_hi'])
        return rows

    def read_oracle(self, data_dir):
        """Hidden Weber label per resolved case path; empty when oracle.csv is absent."""
        path = os.path.join(data_dir, ORACLE_FILE)
        if not os.path.isfile(path):
            return {}
        with open(path, newline='') as handle:
            return {os.path.join(data_dir, row['path']): row['hidden_label'] for row in csv.DictReader(handle)}

    @staticmethod
    def _write_csv(path, fields, rows):
        with open(path, 'w', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)

    def crop_box_of(self, row, dims):
        return BBox.from_string(row['crop_box'], dims)
