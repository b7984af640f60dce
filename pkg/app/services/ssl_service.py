import csv
import math
import os

import numpy as np
from scipy.spatial.distance import pdist

from app.errors import TrainingError
from app.models.phantom import NUM_CLASSES
from app.models.training import ClassPrototype, ConfidenceBuffer, EpochLog, TrainingHistory
from app.services.base_service import BaseService
from app.services.metrics_service import MetricsService
from app.tensornet import SGD, Tensor, TrainState, softmax, softmax_ce

EPOCH_LOG_FIELDS = ['epoch', 'loss_l', 'loss_u', 'loss_mmd', 'loss_total', 'n_selected',
                    'pseudo_label_accuracy', 'val_accuracy', 'loss_rwn']
SHIFT_RANGE = 2


def _value(x):
    return float(x.data) if isinstance(x, Tensor) else float(x)


def _format(value):
    if value is None:
        return ''
    if isinstance(value, int):
        return str(value)
    return f'{value:.6f}'


class SemiSupervisedTrainer(BaseService):
    """Self-training classifier with relation-weighted pseudo-labels and an MMD alignment term.

    Each step alternates two phases. Phase 1 trains the relation network
    against labeled prototypes while the extractor is frozen. Phase 2 freezes
    the relation network and updates the extractor on the labeled loss, the
    weighted pseudo-label loss and lambda times the MMD between the confident
    labeled and unlabeled feature sets. All randomness comes from one
    generator seeded by `TrainConfig.seed`.
    """

    def __init__(self, train_config, num_classes=NUM_CLASSES, crop_size=(32, 32), config=None, state=None):
        super().__init__(config)
        self.train_config = train_config
        self.num_classes = num_classes
        self.rng = np.random.default_rng(train_config.seed)
        self.state = state or TrainState.build(num_classes, self.rng, train_config.rwn_width,
                                               train_config.se_reduction, crop_size)
        self.extractor_optimizer = SGD(self.state.extractor.parameters(), lr=train_config.learning_rate,
                                       momentum=train_config.momentum)
        self.rwn_optimizer = SGD(self.state.rwn.parameters(), lr=train_config.learning_rate,
                                 momentum=train_config.momentum)
        self.labeled_buffer = ConfidenceBuffer(train_config.buffer_capacity)
        self.unlabeled_buffer = ConfidenceBuffer(train_config.buffer_capacity)
        self.metrics_service = MetricsService(self.config)

    @property
    def semi_supervised(self):
        return self.train_config.mode == 'semi'

    # ------------------------------------------------------------ forward passes

    def extract_features(self, images, training=False):
        """Return (feature maps, feature vectors, logits) for an (N, H, W) batch."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 3 or images.shape[0] == 0:
            raise TrainingError(f"feature extraction needs a nonempty (N, H, W) batch, got {images.shape}")
        self.state.extractor.train(training)
        return self.state.extractor(Tensor(images[:, None, :, :]))

    def compute_prototypes(self, feature_maps, labels):
        """Per-class mean of labeled feature maps."""
        maps = feature_maps.data if isinstance(feature_maps, Tensor) else np.asarray(feature_maps, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        prototypes = []
        for k in range(self.num_classes):
            members = labels == k
            if not members.any():
                raise TrainingError(f"no labeled sample of class {k} to build a prototype")
            prototypes.append(ClassPrototype(class_id=k, feature_map=maps[members].mean(axis=0)))
        return prototypes

    def relation_scores(self, feature_maps, prototypes, training=False):
        """N x K relation scores between every sample and every class prototype."""
        maps = feature_maps.data if isinstance(feature_maps, Tensor) else np.asarray(feature_maps, dtype=np.float64)
        n, k = maps.shape[0], len(prototypes)
        stacked = np.stack([p.feature_map for p in prototypes])
        samples = np.repeat(maps, k, axis=0)
        references = np.tile(stacked, (n, 1, 1, 1))
        self.state.rwn.train(training)
        return self.state.rwn(Tensor(samples), Tensor(references)).reshape(n, k)

    def rwn_forward(self, sample_map, prototype_map):
        """Relation score in [0, 1] of one C x H x W map against one prototype map."""
        sample_map = np.asarray(sample_map, dtype=np.float64)
        prototype_map = np.asarray(prototype_map, dtype=np.float64)
        if sample_map.shape != prototype_map.shape:
            raise TrainingError(f"relation pair shape mismatch: {sample_map.shape} vs {prototype_map.shape}")
        self.state.rwn.eval()
        return float(self.state.rwn(Tensor(sample_map[None]), Tensor(prototype_map[None])).data[0])

    def relation_weights(self, feature_maps, prototypes):
        return self.relation_scores(feature_maps, prototypes, training=False).data

    def pseudo_label(self, images):
        """Pseudo labels of an unlabeled (N, H, W) batch under the current state.

        Runs the extractor in eval mode, so batch-norm buffers are untouched.
        """
        _, _, logits = self.extract_features(images, training=False)
        return self.label_logits(logits)

    @staticmethod
    def label_logits(logits):
        """Argmax class (lowest index on ties) and its softmax probability."""
        probabilities = softmax(logits.data if isinstance(logits, Tensor) else logits)
        labels = np.argmax(probabilities, axis=1)
        return labels, probabilities[np.arange(labels.size), labels]

    def predict(self, images):
        """Eval-mode class predictions and probabilities, in chunks of one batch."""
        images = np.asarray(images, dtype=np.float64)
        chunk = self.train_config.batch_size
        probabilities = []
        for start in range(0, images.shape[0], chunk):
            _, _, logits = self.extract_features(images[start:start + chunk])
            probabilities.append(softmax(logits.data))
        probabilities = np.concatenate(probabilities) if probabilities else np.zeros((0, self.num_classes))
        return np.argmax(probabilities, axis=1), probabilities

    # -------------------------------------------------------------------- losses

    def loss_supervised(self, logits, labels):
        return softmax_ce(logits, labels)

    def loss_unsupervised(self, logits, pseudo_labels, weights):
        """Cross-entropy against pseudo-labels with relation weights.

        weights holds one value per sample, broadcast across the logits, or a
        full N x K matrix. With 'logit' weighting the logits are scaled before
        the softmax; with 'loss' weighting each sample's loss is scaled.
        """
        logits = logits if isinstance(logits, Tensor) else Tensor(logits)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.size and (weights.min() < 0.0 or weights.max() > 1.0):
            raise TrainingError("relation weights must lie in [0, 1]")
        if logits.shape[0] == 0:
            return Tensor(0.0)
        if self.train_config.weighting == 'loss':
            per_sample = weights if weights.ndim == 1 else weights[np.arange(logits.shape[0]), pseudo_labels]
            return softmax_ce(logits, pseudo_labels, weights=per_sample)
        scale = weights.reshape(-1, 1) if weights.ndim == 1 else weights
        return softmax_ce(logits * scale, pseudo_labels)

    def select_confident(self, confidences, threshold=None, buffer=None, vectors=None):
        """Boolean mask of samples whose confidence exceeds the threshold.

        When a buffer is given, the selected rows of `vectors` are pushed into it.
        """
        threshold = self.train_config.confidence_threshold if threshold is None else threshold
        if not 0.0 < threshold < 1.0:
            raise TrainingError(f"threshold must lie in (0, 1), got {threshold}")
        selected = np.asarray(confidences, dtype=np.float64) > threshold
        if buffer is not None and vectors is not None:
            data = vectors.data if isinstance(vectors, Tensor) else np.asarray(vectors, dtype=np.float64)
            buffer.push(data[selected])
        return selected

    @staticmethod
    def median_bandwidth(*feature_sets):
        """Median pairwise distance over the union; 1.0 when undefined or zero."""
        union = np.concatenate([np.asarray(f, dtype=np.float64).reshape(len(f), -1) for f in feature_sets])
        if union.shape[0] < 2:
            return 1.0
        median = float(np.median(pdist(union)))
        return median if median > 0 else 1.0

    def loss_mmd(self, labeled_features, unlabeled_features, sigma=None):
        """Biased squared MMD with a Gaussian kernel."""
        a = labeled_features if isinstance(labeled_features, Tensor) else Tensor(labeled_features)
        b = unlabeled_features if isinstance(unlabeled_features, Tensor) else Tensor(unlabeled_features)
        if a.shape[0] == 0 or b.shape[0] == 0:
            raise TrainingError("MMD needs two nonempty feature sets")
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise TrainingError(f"MMD feature sets differ in shape: {a.shape} vs {b.shape}")
        if sigma is None:
            sigma = self.train_config.mmd_bandwidth or self.median_bandwidth(a.data, b.data)
        if not sigma > 0:
            raise TrainingError(f"MMD bandwidth must be positive, got {sigma}")
        gamma = 1.0 / (2.0 * sigma * sigma)

        def kernel_mean(x, y):
            diff = x.reshape(x.shape[0], 1, x.shape[1]) - y.reshape(1, y.shape[0], y.shape[1])
            return ((diff * diff).sum(axis=2) * -gamma).exp().mean()

        return kernel_mean(a, a) + kernel_mean(b, b) - kernel_mean(a, b) * 2.0

    @staticmethod
    def loss_total(loss_l, loss_u, loss_mmd, weight):
        """loss_l + loss_u + weight * loss_mmd."""
        if weight < 0:
            raise TrainingError(f"lambda must be nonnegative, got {weight}")
        return loss_l + loss_u + loss_mmd * weight

    # --------------------------------------------------------------- batching

    def augment_batch(self, images):
        """Horizontal shift and flip plus intensity gain; rows (z) are never flipped."""
        n = images.shape[0]
        shifts = self.rng.integers(-SHIFT_RANGE, SHIFT_RANGE + 1, size=n)
        flips = self.rng.random(n) < 0.5
        gains = self.rng.uniform(0.9, 1.1, size=n)
        out = np.zeros_like(images)
        for i in range(n):
            image = images[i][:, ::-1] if flips[i] else images[i]
            shifted = np.roll(image, shifts[i], axis=1)
            if shifts[i] > 0:
                shifted[:, :shifts[i]] = 0.0
            elif shifts[i] < 0:
                shifted[:, shifts[i]:] = 0.0
            out[i] = gains[i] * shifted
        return out

    def _batch_plan(self, n, steps):
        """Index batches of equal size drawn from fresh permutations, cycling as needed."""
        size = min(self.train_config.batch_size, max(n, 2))
        needed = steps * size
        order = []
        while len(order) < needed:
            order.extend(self.rng.permutation(n).tolist())
        return [np.asarray(order[s * size:(s + 1) * size]) for s in range(steps)]

    def _cover_classes(self, indices, labels):
        """Append one random sample of every class missing from the batch."""
        present = set(labels[indices].tolist())
        extra = []
        for k in range(self.num_classes):
            if k not in present:
                extra.append(int(self.rng.choice(np.flatnonzero(labels == k))))
        return np.concatenate([indices, np.asarray(extra, dtype=np.int64)]) if extra else indices

    # ------------------------------------------------------------------ steps

    def rwn_step(self, images, labels):
        """Phase 1: fit theta_R on labeled prototypes; theta_s and phi stay fixed."""
        maps, _, _ = self.extract_features(images, training=False)
        prototypes = self.compute_prototypes(maps, labels)
        scores = self.relation_scores(maps.data, prototypes, training=True)
        loss = softmax_ce(scores, labels)
        self.rwn_optimizer.zero_grad()
        loss.backward()
        self.rwn_optimizer.step()
        return _value(loss), prototypes

    def extractor_step(self, images, labels, unlabeled_images=None, prototypes=None, hidden_labels=None):
        """Phase 2: update theta_s and phi; theta_R stays fixed."""
        cfg = self.train_config
        _, vectors_l, logits_l = self.extract_features(images, training=True)
        loss_l = self.loss_supervised(logits_l, labels)
        _, confidence_l = self.label_logits(logits_l)
        selected_l = self.select_confident(confidence_l)

        stats = {'n_selected': 0, 'n_correct': 0}
        loss_u = Tensor(0.0)
        loss_mmd = Tensor(0.0)
        vectors_u, selected_u = None, None
        if unlabeled_images is not None and len(unlabeled_images):
            maps_u, _, logits_eval = self.extract_features(unlabeled_images, training=False)
            pseudo, confidence_u = self.label_logits(logits_eval)
            weights = self.relation_weights(maps_u.data, prototypes)[np.arange(pseudo.size), pseudo]
            selected_u = self.select_confident(confidence_u)

            _, vectors_u, logits_u = self.extract_features(unlabeled_images, training=True)
            chosen = np.flatnonzero(selected_u)
            if chosen.size:
                loss_u = self.loss_unsupervised(logits_u[chosen], pseudo[chosen], weights[chosen])
            stats['n_selected'] = int(chosen.size)
            if hidden_labels is not None:
                stats['n_correct'] = int(np.sum(pseudo[chosen] == np.asarray(hidden_labels)[chosen]))

            if cfg.mmd_weight > 0:
                set_l = self._expanded_set(self.labeled_buffer, vectors_l, selected_l)
                set_u = self._expanded_set(self.unlabeled_buffer, vectors_u, selected_u)
                if set_l is not None and set_u is not None:
                    loss_mmd = self.loss_mmd(set_l, set_u)

        total = self.loss_total(loss_l, loss_u, loss_mmd, cfg.mmd_weight)
        self.extractor_optimizer.zero_grad()
        total.backward()
        self.extractor_optimizer.step()

        self.select_confident(confidence_l, buffer=self.labeled_buffer, vectors=vectors_l)
        if vectors_u is not None:
            self.select_confident(confidence_u, buffer=self.unlabeled_buffer, vectors=vectors_u)
        stats.update(loss_l=_value(loss_l), loss_u=_value(loss_u), loss_mmd=_value(loss_mmd),
                     loss_total=_value(total))
        return stats

    @staticmethod
    def _expanded_set(buffer, vectors, selected):
        """Buffered vectors (constants) followed by this batch's selected vectors."""
        parts = []
        if len(buffer):
            parts.append(Tensor(buffer.entries))
        chosen = np.flatnonzero(selected)
        if chosen.size:
            parts.append(vectors[chosen])
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else Tensor.concat(parts, axis=0)

    # ------------------------------------------------------------------ epochs

    def train_epoch(self, labeled, unlabeled=None, epoch=0):
        """One pass over the larger of the two sets; the smaller one is cycled."""
        cfg = self.train_config
        if len(labeled) == 0 or not labeled.covers(self.num_classes):
            raise TrainingError("labeled set must contain every class")
        use_unlabeled = self.semi_supervised and unlabeled is not None and len(unlabeled) > 0
        n_u = len(unlabeled) if use_unlabeled else 0
        steps = math.ceil(max(len(labeled), n_u) / cfg.batch_size)
        labeled_plan = self._batch_plan(len(labeled), steps)
        unlabeled_plan = self._batch_plan(n_u, steps) if use_unlabeled else [None] * steps

        totals = {'loss_l': 0.0, 'loss_u': 0.0, 'loss_mmd': 0.0, 'loss_total': 0.0, 'loss_rwn': 0.0}
        selected = correct = 0
        for batch_l, batch_u in zip(labeled_plan, unlabeled_plan):
            batch_l = self._cover_classes(batch_l, labeled.labels)
            images_l = labeled.images[batch_l]
            labels_l = labeled.labels[batch_l]
            if cfg.augment:
                images_l = self.augment_batch(images_l)

            prototypes = None
            if use_unlabeled:
                loss_rwn, prototypes = self.rwn_step(images_l, labels_l)
                totals['loss_rwn'] += loss_rwn
                images_u = unlabeled.images[batch_u]
                if cfg.augment:
                    images_u = self.augment_batch(images_u)
                hidden = None if unlabeled.hidden_labels is None else unlabeled.hidden_labels[batch_u]
                stats = self.extractor_step(images_l, labels_l, images_u, prototypes, hidden)
            else:
                stats = self.extractor_step(images_l, labels_l)
            for key in ('loss_l', 'loss_u', 'loss_mmd', 'loss_total'):
                totals[key] += stats[key]
            selected += stats['n_selected']
            correct += stats['n_correct']

        log = EpochLog(epoch=epoch, n_selected=selected, **{k: v / steps for k, v in totals.items()})
        if use_unlabeled and unlabeled.hidden_labels is not None and selected:
            log.pseudo_label_accuracy = correct / selected
        return log

    def accuracy(self, images, labels):
        predictions, _ = self.predict(images)
        return float(np.mean(predictions == np.asarray(labels))) if len(predictions) else None

    def fit(self, labeled, unlabeled=None, validation=None, epochs=None, log_path=None):
        """Train for the configured epochs, keeping the best-validation parameters when validating."""
        epochs = self.train_config.epochs if epochs is None else epochs
        history = TrainingHistory()
        best_accuracy, best_state = -1.0, None
        try:
            for epoch in range(1, epochs + 1):
                log = self.train_epoch(labeled, unlabeled, epoch)
                if validation is not None and len(validation):
                    log.val_accuracy = self.accuracy(validation.images, validation.labels)
                    if log.val_accuracy > best_accuracy:
                        best_accuracy, best_state = log.val_accuracy, self.state.state_dict()
                        history.best_epoch = epoch
                history.epochs.append(log)
                self.logger.info(
                    f"Epoch {epoch}/{epochs}: total={log.loss_total:.4f} l={log.loss_l:.4f} "
                    f"u={log.loss_u:.4f} mmd={log.loss_mmd:.4f} selected={log.n_selected}")
        except TrainingError as e:
            self.logger.error(f"Error training: {str(e)}")
            raise
        if best_state is not None:
            self.state.load_state_dict(best_state)
            self.logger.info(f"Restored parameters of epoch {history.best_epoch} (val acc {best_accuracy:.4f})")
        if log_path:
            self.write_epoch_log(history, log_path)
        return history

    def evaluate(self, images, labels, structures=None):
        """Argmax predictions on a test set summarised as a MetricsReport."""
        if len(labels) == 0:
            raise TrainingError("cannot evaluate on an empty test set")
        predictions, probabilities = self.predict(images)
        return self.metrics_service.build_report(labels, predictions, probabilities, structures=structures)

    @staticmethod
    def write_epoch_log(history, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(EPOCH_LOG_FIELDS)
            for log in history.epochs:
                writer.writerow([_format(getattr(log, name)) for name in EPOCH_LOG_FIELDS])
