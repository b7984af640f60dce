import csv
import os
import tempfile
import unittest

import numpy as np
import numpy.testing as npt

from app.errors import TrainingError
from app.models.training import ConfidenceBuffer, LabeledSet, TrainConfig, UnlabeledSet
from app.services.pipeline_service import PipelineService
from app.services.ssl_service import EPOCH_LOG_FIELDS, SemiSupervisedTrainer
from app.tensornet import Tensor, softmax_ce
from config import DeskConfig, TestingConfig

SLOW = os.environ.get('WEBERLINE_SLOW_TESTS') == '1'
CROP = (16, 16)


def tiny_config(**overrides):
    values = dict(learning_rate=1e-2, batch_size=8, epochs=1, buffer_capacity=16, rwn_width=8,
                  augment=False, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def banded_images(labels, rng, size=CROP):
    """Class k lights up the k-th third of the rows, plus noise."""
    images = rng.uniform(0.0, 0.1, size=(len(labels),) + size)
    band = size[0] // 3
    for i, k in enumerate(labels):
        images[i, k * band:(k + 1) * band, 4:12] += 1.0
    return images


def make_sets(seed=0, n_labeled=9, n_unlabeled=9):
    rng = np.random.default_rng(seed)
    labels = np.arange(n_labeled) % 3
    hidden = np.arange(n_unlabeled) % 3
    labeled = LabeledSet(banded_images(labels, rng), labels)
    unlabeled = UnlabeledSet(banded_images(hidden, rng), hidden)
    return labeled, unlabeled


class LossAlgebraTest(unittest.TestCase):

    def setUp(self):
        self.trainer = SemiSupervisedTrainer(tiny_config(), crop_size=CROP, config=TestingConfig)
        self.rng = np.random.default_rng(5)

    def test_total_loss_composition(self):
        for _ in range(100):
            l, u, mmd = self.rng.uniform(0.0, 3.0, size=3)
            weight = float(self.rng.uniform(0.0, 20.0))
            total = self.trainer.loss_total(Tensor(l), Tensor(u), Tensor(mmd), weight)
            self.assertEqual(float(total.data), float(Tensor(l).data + Tensor(u).data + Tensor(mmd).data * weight))
        with self.assertRaises(TrainingError):
            self.trainer.loss_total(Tensor(0.0), Tensor(0.0), Tensor(0.0), -1.0)

    def test_unit_weights_reduce_to_plain_cross_entropy(self):
        for weighting in ('logit', 'loss'):
            trainer = SemiSupervisedTrainer(tiny_config(weighting=weighting), crop_size=CROP, config=TestingConfig)
            for _ in range(100):
                n = int(self.rng.integers(1, 10))
                logits = self.rng.normal(size=(n, 3)) * 2.0
                pseudo = self.rng.integers(0, 3, size=n)
                weighted = trainer.loss_unsupervised(logits, pseudo, np.ones(n))
                plain = softmax_ce(logits, pseudo)
                self.assertAlmostEqual(float(weighted.data), float(plain.data), delta=1e-12)

    def test_weights_scale_the_loss(self):
        trainer = SemiSupervisedTrainer(tiny_config(weighting='loss'), crop_size=CROP, config=TestingConfig)
        logits = self.rng.normal(size=(4, 3))
        pseudo = np.array([0, 1, 2, 0])
        half = trainer.loss_unsupervised(logits, pseudo, np.full(4, 0.5))
        self.assertAlmostEqual(float(half.data), 0.5 * float(softmax_ce(logits, pseudo).data), delta=1e-12)
        with self.assertRaises(TrainingError):
            trainer.loss_unsupervised(logits, pseudo, np.full(4, 1.5))
        zero = self.trainer.loss_unsupervised(logits, pseudo, np.zeros(4))
        self.assertAlmostEqual(float(zero.data), np.log(3.0), delta=1e-12)

    def test_mmd_identity_and_symmetry(self):
        for _ in range(100):
            d = int(self.rng.integers(1, 8))
            x = self.rng.normal(size=(int(self.rng.integers(1, 12)), d))
            y = self.rng.normal(loc=0.5, size=(int(self.rng.integers(1, 12)), d))
            self.assertLessEqual(abs(float(self.trainer.loss_mmd(x, x).data)), 1e-12)
            xy = float(self.trainer.loss_mmd(x, y).data)
            yx = float(self.trainer.loss_mmd(y, x).data)
            self.assertAlmostEqual(xy, yx, delta=1e-12)
            self.assertGreaterEqual(xy, -1e-12)
            self.assertAlmostEqual(float(self.trainer.loss_mmd(x, y, sigma=2.0).data),
                                   float(self.trainer.loss_mmd(y, x, sigma=2.0).data), delta=1e-12)

    def test_singleton_mmd_by_hand(self):
        for _ in range(20):
            x, y = self.rng.normal(size=(1, 4)), self.rng.normal(size=(1, 4))
            sigma = float(self.rng.uniform(0.5, 3.0))
            distance2 = float(np.sum((x - y) ** 2))
            expected = 2.0 - 2.0 * np.exp(-distance2 / (2.0 * sigma * sigma))
            self.assertAlmostEqual(float(self.trainer.loss_mmd(x, y, sigma=sigma).data), expected, places=12)

    def test_mmd_rejects_bad_inputs(self):
        with self.assertRaises(TrainingError):
            self.trainer.loss_mmd(np.zeros((0, 3)), np.ones((2, 3)))
        with self.assertRaises(TrainingError):
            self.trainer.loss_mmd(np.zeros((2, 3)), np.ones((2, 4)))
        with self.assertRaises(TrainingError):
            self.trainer.loss_mmd(np.zeros((2, 3)), np.ones((2, 3)), sigma=0.0)

    def test_median_bandwidth(self):
        self.assertEqual(self.trainer.median_bandwidth(np.zeros((1, 2))), 1.0)
        self.assertEqual(self.trainer.median_bandwidth(np.zeros((3, 2))), 1.0)
        self.assertAlmostEqual(self.trainer.median_bandwidth(np.array([[0.0], [2.0]])), 2.0)


class SelectionTest(unittest.TestCase):

    def setUp(self):
        self.trainer = SemiSupervisedTrainer(tiny_config(), crop_size=CROP, config=TestingConfig)

    def test_threshold_is_strict(self):
        selected = self.trainer.select_confident(np.array([0.4, 0.5, 0.51, 0.9]))
        npt.assert_array_equal(selected, [False, False, True, True])
        with self.assertRaises(TrainingError):
            self.trainer.select_confident(np.array([0.5]), threshold=1.0)

    def test_selected_vectors_enter_the_buffer(self):
        buffer = ConfidenceBuffer(3)
        vectors = np.arange(8.0).reshape(4, 2)
        self.trainer.select_confident(np.array([0.9, 0.1, 0.8, 0.7]), buffer=buffer, vectors=vectors)
        npt.assert_array_equal(buffer.entries, vectors[[0, 2, 3]])
        self.trainer.select_confident(np.array([0.9, 0.1, 0.1, 0.1]), buffer=buffer, vectors=vectors + 10)
        # oldest entry leaves first
        npt.assert_array_equal(buffer.entries, [[4.0, 5.0], [6.0, 7.0], [10.0, 11.0]])

    def test_logit_ties_take_lowest_index(self):
        labels, confidence = self.trainer.label_logits(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]))
        npt.assert_array_equal(labels, [0, 1])
        self.assertAlmostEqual(confidence[0], np.exp(1.0) / (2 * np.exp(1.0) + 1.0))

    def test_logit_confidence_by_hand(self):
        labels, confidence = self.trainer.label_logits(np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
        npt.assert_array_equal(labels, [0, 0])
        self.assertAlmostEqual(confidence[0], np.exp(2.0) / (np.exp(2.0) + 2.0), places=12)
        self.assertAlmostEqual(round(confidence[0], 3), 0.787)
        self.assertAlmostEqual(confidence[1], 1.0 / 3.0, places=12)

    def test_positive_scaling_keeps_the_argmax(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(50, 3)) * 3.0
        labels, confidence = self.trainer.label_logits(logits)
        for factor in (0.1, 0.5, 2.0, 10.0):
            scaled, _ = self.trainer.label_logits(logits * factor)
            npt.assert_array_equal(scaled, labels)
        self.assertTrue(np.all((confidence > 0.0) & (confidence <= 1.0)))

    def test_pseudo_label_of_an_image_batch(self):
        images = banded_images([0, 1, 2, 1], np.random.default_rng(3))
        bn = self.trainer.state.extractor.block1.bn
        mean_before = bn.running_mean.copy()
        labels, confidence = self.trainer.pseudo_label(images)
        npt.assert_array_equal(bn.running_mean, mean_before)
        _, _, logits = self.trainer.extract_features(images)
        expected, expected_confidence = self.trainer.label_logits(logits)
        npt.assert_array_equal(labels, expected)
        npt.assert_allclose(confidence, expected_confidence)
        self.assertEqual(labels.shape, (4,))

    def test_prototypes_need_every_class(self):
        maps = np.random.default_rng(0).normal(size=(4, 64, 4, 4))
        prototypes = self.trainer.compute_prototypes(maps, [0, 1, 2, 2])
        npt.assert_allclose(prototypes[2].feature_map, maps[2:].mean(axis=0))
        with self.assertRaises(TrainingError):
            self.trainer.compute_prototypes(maps, [0, 1, 1, 1])

    def test_relation_scores(self):
        maps = np.random.default_rng(1).normal(size=(2, 64, 4, 4))
        prototypes = self.trainer.compute_prototypes(np.concatenate([maps, maps[:1]]), [0, 1, 2])
        scores = self.trainer.relation_weights(maps, prototypes)
        self.assertEqual(scores.shape, (2, 3))
        self.assertTrue(np.all((scores >= 0.0) & (scores <= 1.0)))
        single = self.trainer.rwn_forward(maps[0], prototypes[1].feature_map)
        self.assertAlmostEqual(single, scores[0, 1], delta=1e-12)

    def test_augmentation_never_flips_rows(self):
        rows = np.linspace(0.1, 1.0, CROP[0])
        images = np.repeat(np.tile(rows[:, None], (1, CROP[1]))[None], 6, axis=0)
        out = self.trainer.augment_batch(images)
        for image in out:
            npt.assert_allclose(image.max(axis=1) / image.max(axis=1)[0], rows / rows[0])


class TrainingStepTest(unittest.TestCase):

    def setUp(self):
        self.labeled, self.unlabeled = make_sets()

    def trainer(self, **overrides):
        return SemiSupervisedTrainer(tiny_config(**overrides), crop_size=CROP, config=TestingConfig)

    def test_relation_step_only_moves_the_relation_network(self):
        trainer = self.trainer()
        before = {group: trainer.state.checksum(group) for group in ('theta_s', 'phi', 'theta_r')}
        loss, prototypes = trainer.rwn_step(self.labeled.images, self.labeled.labels)
        self.assertTrue(np.isfinite(loss))
        self.assertEqual(len(prototypes), 3)
        self.assertEqual(trainer.state.checksum('theta_s'), before['theta_s'])
        self.assertEqual(trainer.state.checksum('phi'), before['phi'])
        self.assertNotEqual(trainer.state.checksum('theta_r'), before['theta_r'])

    def test_extractor_step_leaves_relation_network_fixed(self):
        trainer = self.trainer()
        _, prototypes = trainer.rwn_step(self.labeled.images, self.labeled.labels)
        before = trainer.state.checksum('theta_r')
        body = trainer.state.checksum('theta_s')
        stats = trainer.extractor_step(self.labeled.images, self.labeled.labels, self.unlabeled.images,
                                       prototypes, self.unlabeled.hidden_labels)
        self.assertEqual(trainer.state.checksum('theta_r'), before)
        self.assertNotEqual(trainer.state.checksum('theta_s'), body)
        self.assertAlmostEqual(stats['loss_total'],
                               stats['loss_l'] + stats['loss_u'] + 15.0 * stats['loss_mmd'], places=9)
        self.assertLessEqual(stats['n_correct'], stats['n_selected'])

    def test_missing_class_is_rejected(self):
        trainer = self.trainer()
        partial = self.labeled.subset(np.flatnonzero(self.labeled.labels < 2))
        with self.assertRaises(TrainingError):
            trainer.train_epoch(partial, self.unlabeled)

    def test_same_seed_same_parameters(self):
        first, second = self.trainer(augment=True), self.trainer(augment=True)
        log_a = first.fit(self.labeled, self.unlabeled).epochs[-1]
        log_b = second.fit(self.labeled, self.unlabeled).epochs[-1]
        self.assertEqual(log_a.to_dict(), log_b.to_dict())
        for group in ('theta_s', 'phi', 'theta_r'):
            self.assertEqual(first.state.checksum(group), second.state.checksum(group))

    def test_supervised_mode_ignores_unlabeled_data(self):
        with_unlabeled = self.trainer(mode='supervised')
        with_unlabeled.fit(self.labeled, self.unlabeled)
        without = self.trainer(mode='semi')
        without.fit(self.labeled, UnlabeledSet(np.zeros((0,) + CROP)))
        for group in ('theta_s', 'phi', 'theta_r'):
            self.assertEqual(with_unlabeled.state.checksum(group), without.state.checksum(group))

    def test_fit_writes_log_and_restores_best_epoch(self):
        trainer = self.trainer(epochs=2)
        validation, _ = make_sets(seed=1, n_labeled=6, n_unlabeled=0)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'train_log.csv')
            history = trainer.fit(self.labeled, self.unlabeled, validation, log_path=path)
            with open(path) as handle:
                rows = list(csv.reader(handle))
        self.assertEqual(rows[0], EPOCH_LOG_FIELDS)
        self.assertEqual(len(rows), 3)
        self.assertIn(history.best_epoch, (1, 2))
        best = history.epochs[history.best_epoch - 1].val_accuracy
        self.assertAlmostEqual(trainer.accuracy(validation.images, validation.labels), best)

    def test_supervised_loss_falls_on_separable_data(self):
        trainer = self.trainer(mode='supervised', epochs=10)
        history = trainer.fit(self.labeled)
        losses = [log.loss_l for log in history.epochs]
        self.assertEqual(len(losses), 10)
        self.assertLess(losses[-1], losses[0])

    def test_evaluate_builds_a_report(self):
        trainer = self.trainer()
        trainer.fit(self.labeled, self.unlabeled)
        report = trainer.evaluate(self.labeled.images, self.labeled.labels)
        npt.assert_array_equal(report.confusion.counts.sum(axis=1), [3, 3, 3])
        with self.assertRaises(TrainingError):
            trainer.evaluate(np.zeros((0,) + CROP), np.zeros(0))


class FewLabelTest(unittest.TestCase):
    """Labeled-only ablation against the full trainer with one label per class."""

    def test_unlabeled_data_does_not_hurt(self):
        accuracies = {'semi': [], 'supervised': []}
        for seed in range(3):
            rng = np.random.default_rng(100 + seed)
            labeled = LabeledSet(banded_images([0, 1, 2], rng), np.arange(3))
            hidden = np.arange(24) % 3
            unlabeled = UnlabeledSet(banded_images(hidden, rng), hidden)
            test_labels = np.arange(30) % 3
            test_images = banded_images(test_labels, rng)
            for mode in accuracies:
                trainer = SemiSupervisedTrainer(tiny_config(mode=mode, epochs=8, seed=seed),
                                                crop_size=CROP, config=TestingConfig)
                trainer.fit(labeled, unlabeled)
                accuracies[mode].append(trainer.accuracy(test_images, test_labels))
        margin = 1.0 / 30.0
        self.assertGreaterEqual(np.mean(accuracies['semi']), np.mean(accuracies['supervised']) - margin,
                                f"accuracies: {accuracies}")


@unittest.skipUnless(SLOW, 'set WEBERLINE_SLOW_TESTS=1 for the semi-supervised benefit run')
class SemiSupervisedBenefitTest(unittest.TestCase):
    """Full trainer against the labeled-only ablation on desk-scale phantoms."""

    def test_unlabeled_data_improves_accuracy(self):
        service = PipelineService(DeskConfig)
        accuracies = {'semi': [], 'supervised': []}
        with tempfile.TemporaryDirectory() as tmp:
            base = service.build_config({'train': {'labeled_fraction': 0.2}})
            data_dir = service.stage_phantom(base, tmp)
            for seed in range(5):
                for mode, weight in (('semi', base.train.mmd_weight), ('supervised', 0.0)):
                    cfg = service.build_config({'seed': seed, 'train': {'labeled_fraction': 0.2, 'mode': mode,
                                                                        'mmd_weight': weight}})
                    (labeled, unlabeled, validation, test), _ = service.prepare(
                        data_dir, cfg, os.path.join(tmp, f'{mode}_{seed}'))
                    trainer = SemiSupervisedTrainer(cfg.train, crop_size=cfg.crop_size, config=DeskConfig)
                    trainer.fit(labeled, unlabeled, validation)
                    accuracies[mode].append(trainer.evaluate(test.images, test.labels).overall_accuracy)
        gain = np.mean(accuracies['semi']) - np.mean(accuracies['supervised'])
        self.assertGreaterEqual(gain, 0.03, f"accuracies: {accuracies}")


if __name__ == '__main__':
    unittest.main()
