import os
import tempfile
import unittest

import numpy as np
import numpy.testing as npt

from app.errors import GeometryError
from app.models.phantom import PhantomParams, PhantomRanges, WeberLabel
from app.models.volume import FIBULA, TIBIA
from app.services.phantom_service import MANIFEST_FIELDS, ORACLE_FILE, PhantomService, count_components
from config import TestingConfig


class WeberLabelTest(unittest.TestCase):

    def test_plane_position_decides_the_type(self):
        self.assertIs(WeberLabel.from_plane(11, 12, 18), WeberLabel.A)
        self.assertIs(WeberLabel.from_plane(12, 12, 18), WeberLabel.B)
        self.assertIs(WeberLabel.from_plane(18, 12, 18), WeberLabel.B)
        self.assertIs(WeberLabel.from_plane(19, 12, 18), WeberLabel.C)

    def test_index_round_trip(self):
        for label in WeberLabel:
            self.assertIs(WeberLabel.from_index(label.index), label)


class PhantomRenderTest(unittest.TestCase):

    def setUp(self):
        self.service = PhantomService(TestingConfig)
        self.params = PhantomParams()

    def test_healthy_template_layout(self):
        mask = self.service.render_mask(self.params)
        self.assertEqual(mask.dims, self.params.dims)
        counts = mask.label_counts()
        self.assertGreater(counts[TIBIA], 0)
        self.assertGreater(counts[FIBULA], 0)
        # tibia ends at the syndesmosis, the fibula reaches further down
        self.assertFalse((mask.data[:, :, :self.params.syndesmosis_lo] == TIBIA).any())
        self.assertTrue((mask.data[:, :, self.params.fibula_bottom] == FIBULA).any())
        self.assertFalse(mask.data[:, :, self.params.bone_top:].any())
        self.assertEqual(count_components(mask, FIBULA), 1)
        self.assertEqual(count_components(mask, TIBIA), 1)

    def test_fracture_splits_the_fibula(self):
        for seed in range(5):
            with self.subTest(seed=seed):
                healthy, fractured, label = self.service.generate_pair(self.params, seed)
                self.assertIs(label, WeberLabel.B)
                self.assertEqual(count_components(healthy, FIBULA), 1)
                self.assertEqual(count_components(fractured, FIBULA), 2)
                self.assertEqual(count_components(fractured, TIBIA), 1)

    def test_component_counts_hold_across_sampled_cases(self):
        rng = np.random.default_rng(21)
        ranges = PhantomRanges()
        for label in WeberLabel:
            for seed in range(6):
                with self.subTest(label=label.value, seed=seed):
                    params = self.service.sample_params(label, ranges, rng)
                    healthy, fractured, got = self.service.generate_pair(params, seed)
                    self.assertIs(got, label)
                    self.assertEqual(count_components(healthy, FIBULA), 1)
                    self.assertEqual(count_components(healthy, TIBIA), 1)
                    self.assertEqual(count_components(fractured, FIBULA), 2)
                    self.assertEqual(count_components(fractured, TIBIA), 1)

    def test_generation_is_deterministic(self):
        first = self.service.generate_case(self.params, 7)
        second = self.service.generate_case(self.params, 7)
        other = self.service.generate_case(self.params, 8)
        self.assertTrue(first.fractured.equals(second.fractured))
        npt.assert_array_equal(first.pose.matrix, second.pose.matrix)
        self.assertFalse(first.fractured.equals(other.fractured))

    def test_pose_stays_within_configured_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pose = self.service.sample_pose(self.params, rng)
            self.assertLessEqual(pose.rotation_angle_deg(),
                                 self.params.pose_rotation_deg + self.params.pose_tilt_deg + 1e-9)

    def test_plane_outside_fibula_is_rejected(self):
        with self.assertRaises(GeometryError):
            self.service.generate_case(self.params.update(fracture_z=self.params.fibula_bottom), 0)
        with self.assertRaises(GeometryError):
            self.service.generate_case(self.params.update(fracture_z=self.params.bone_top - 1), 0)

    def test_invalid_geometry_is_rejected(self):
        with self.assertRaises(GeometryError):
            PhantomParams(syndesmosis_lo=20, syndesmosis_hi=18)
        with self.assertRaises(GeometryError):
            PhantomParams(fracture_gap=0)

    def test_crop_box_covers_the_syndesmosis(self):
        box = self.params.syndesmosis_box()
        self.assertTrue(box.within(self.params.dims))
        self.assertLessEqual(box.min_corner[2], self.params.syndesmosis_lo)
        self.assertGreater(box.max_corner[2], self.params.syndesmosis_hi)
        healthy = self.service.render_mask(self.params)
        inside = healthy.data[box.slices()]
        self.assertEqual(int((inside == TIBIA).sum()), int((healthy.data[:, :, box.min_corner[2]:box.max_corner[2]]
                                                            == TIBIA).sum()))


class AugmentTest(unittest.TestCase):

    def setUp(self):
        self.service = PhantomService(TestingConfig)
        self.mask = self.service.render_mask(PhantomParams())

    def test_neutral_augmentation_is_identity(self):
        out = self.service.augment(self.mask, 0, angle_deg=0.0, scale=1.0, flip_x=False, flip_y=False)
        self.assertTrue(out.equals(self.mask))

    def test_flips_never_touch_z(self):
        out = self.service.augment(self.mask, 0, angle_deg=0.0, scale=1.0, flip_x=True, flip_y=True)
        npt.assert_array_equal(out.data, self.mask.data[::-1, ::-1, :])
        # slice label counts along z are unchanged
        npt.assert_array_equal((out.data > 0).sum(axis=(0, 1)), (self.mask.data > 0).sum(axis=(0, 1)))

    def test_sampled_augmentation_is_seeded(self):
        first = self.service.augment(self.mask, 11)
        second = self.service.augment(self.mask, 11)
        self.assertTrue(first.equals(second))
        self.assertEqual(first.dims, self.mask.dims)


class DatasetTest(unittest.TestCase):

    def setUp(self):
        self.service = PhantomService(TestingConfig)
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_plane_ranges_match_labels(self):
        params, ranges = PhantomParams(), PhantomRanges()
        for label in WeberLabel:
            first, last = self.service.plane_range(label, params, ranges)
            for z in (first, last):
                self.assertIs(WeberLabel.from_plane(z, params.syndesmosis_lo, params.syndesmosis_hi), label)
            self.assertGreaterEqual(first, params.fibula_bottom + 1)
            self.assertLessEqual(last, params.bone_top - 1 - params.fracture_gap)

    def test_splits_are_class_balanced(self):
        dataset = self.service.make_dataset(6, 3, 6, seed=4)
        self.assertEqual(len(dataset.split('labeled')), 6)
        self.assertEqual(len(dataset.split('unlabeled')), 3)
        self.assertEqual(set(dataset.counts('test').values()), {2})
        self.assertEqual(set(dataset.counts('labeled').values()), {2})
        for case in dataset.cases:
            self.assertIs(case.label, case.params.label)
        with self.assertRaises(GeometryError):
            self.service.make_dataset(3, 0, 4)

    def test_written_dataset_reads_back(self):
        dataset = self.service.make_dataset(3, 3, 3, seed=1)
        manifest = self.service.write_dataset(dataset, self.tmp.name)
        with open(manifest) as handle:
            self.assertEqual(handle.readline().strip(), ','.join(MANIFEST_FIELDS))
        rows = self.service.read_manifest(self.tmp.name)
        self.assertEqual(len(rows), 9)
        for row, case in zip(rows, dataset.cases):
            self.assertTrue(os.path.isfile(row['path']))
            self.assertTrue(os.path.isfile(row['healthy_path']))
            self.assertNotIn('hidden_label', row)
            if case.split == 'unlabeled':
                self.assertEqual(row['label'], '')
                self.assertIsNone(row['fracture_z'])
            else:
                self.assertEqual(row['label'], case.label.value)
                self.assertEqual(row['fracture_z'], case.params.fracture_z)
            self.assertEqual(self.service.crop_box_of(row, case.params.dims), case.crop_box)

        self.assertTrue(os.path.isfile(os.path.join(self.tmp.name, ORACLE_FILE)))
        oracle = self.service.read_oracle(self.tmp.name)
        self.assertEqual(oracle, {row['path']: case.label.value for row, case in zip(rows, dataset.cases)})

    def test_missing_oracle_reads_as_empty(self):
        self.assertEqual(self.service.read_oracle(self.tmp.name), {})

    def test_missing_manifest(self):
        with self.assertRaisesRegex(GeometryError, 'missing manifest'):
            self.service.read_manifest(self.tmp.name)

    def test_same_seed_same_dataset(self):
        first = self.service.make_dataset(3, 0, 3, seed=9)
        second = self.service.make_dataset(3, 0, 3, seed=9)
        for a, b in zip(first.cases, second.cases):
            self.assertEqual(a.params, b.params)
            self.assertTrue(a.fractured.equals(b.fractured))


if __name__ == '__main__':
    unittest.main()
