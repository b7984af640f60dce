import csv
import io
import os

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from app.errors import MetricError
from app.models.geometry import PointCloud
from app.models.report import BinaryRates, ClassMetrics, ConfusionMatrix, MetricsReport, StructureScore
from app.models.phantom import WeberLabel
from app.models.volume import FIBULA, TIBIA
from app.services.base_service import BaseService

REPORT_FIELDS = ['class', 'support', 'accuracy', 'precision', 'specificity', 'sensitivity', 'auroc']
STRUCTURES = (('tibia', TIBIA), ('fibula', FIBULA))


def format_value(value):
    """Fixed six-decimal text; undefined values become empty strings."""
    if value is None:
        return ''
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f'{float(value):.6f}'


def _ratio(numerator, denominator):
    return None if denominator == 0 else numerator / denominator


def _mean_defined(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


class MetricsService(BaseService):
    """Segmentation overlap and classification metrics."""

    # ------------------------------------------------------------ segmentation

    def dice(self, a, b):
        """2|a & b| / (|a| + |b|); 1.0 when both regions are empty."""
        a = np.asarray(a, dtype=bool)
        b = np.asarray(b, dtype=bool)
        if a.shape != b.shape:
            raise MetricError(f"dice needs equal dims, got {a.shape} and {b.shape}")
        total = int(a.sum()) + int(b.sum())
        if total == 0:
            return 1.0
        return 2.0 * int(np.logical_and(a, b).sum()) / total

    def directed_distances(self, a, b):
        """Distance from every point of a to its nearest point of b."""
        a = self._points(a)
        b = self._points(b)
        distances, _ = cKDTree(b).query(a, k=1)
        return np.asarray(distances, dtype=np.float64)

    def hd95(self, a, b):
        """Symmetric 95th-percentile surface distance (nearest-rank, ceil(0.95 n)-th order statistic)."""
        return max(self._nearest_rank(self.directed_distances(a, b), 0.95),
                   self._nearest_rank(self.directed_distances(b, a), 0.95))

    def hausdorff(self, a, b):
        return max(float(self.directed_distances(a, b).max()), float(self.directed_distances(b, a).max()))

    @staticmethod
    def _nearest_rank(values, q):
        ordered = np.sort(values)
        rank = int(np.ceil(q * ordered.size))
        return float(ordered[max(rank, 1) - 1])

    @staticmethod
    def _points(cloud):
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        points = points.reshape(-1, 3)
        if points.shape[0] == 0:
            raise MetricError("surface distance needs nonempty point sets")
        return points

    def structure_scores(self, predicted, reference, surface_points):
        """Per-structure Dice and HD95 of two masks on the same grid.

        Args:
            predicted: Mask under evaluation
            reference: Mask used as ground truth
            surface_points: callable(mask, label) -> PointCloud

        Returns:
            List of StructureScore for tibia, fibula and their mean
        """
        scores = []
        for name, label in STRUCTURES:
            a = predicted.foreground(label)
            b = reference.foreground(label)
            both_empty = not a.any() and not b.any()
            hd = None
            if a.any() and b.any():
                hd = self.hd95(surface_points(predicted, label), surface_points(reference, label))
            scores.append(StructureScore(name=name, dice=self.dice(a, b), hd95=hd, both_empty=both_empty))
        scores.append(StructureScore(name='mean', dice=float(np.mean([s.dice for s in scores])),
                                     hd95=_mean_defined([s.hd95 for s in scores])))
        return scores

    # ---------------------------------------------------------- classification

    def confusion(self, true_labels, predicted_labels, num_classes):
        y = np.asarray(true_labels, dtype=np.int64).reshape(-1)
        p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
        if y.shape != p.shape:
            raise MetricError(f"label vectors differ in length: {y.size} vs {p.size}")
        if y.size and (min(y.min(), p.min()) < 0 or max(y.max(), p.max()) >= num_classes):
            raise MetricError(f"labels must lie in [0, {num_classes})")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (y, p), 1)
        return ConfusionMatrix(counts)

    def binary_rates(self, tp, tn, fp, fn):
        """Accuracy, precision, specificity and sensitivity from one-vs-rest counts."""
        return BinaryRates(
            accuracy=_ratio(tp + tn, tp + tn + fp + fn),
            precision=_ratio(tp, tp + fp),
            specificity=_ratio(tn, tn + fp),
            sensitivity=_ratio(tp, tp + fn),
        )

    def auroc(self, scores, is_positive):
        """Rank-sum AUROC with ascending, tie-averaged ranks."""
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        positive = np.asarray(is_positive, dtype=bool).reshape(-1)
        if scores.shape != positive.shape:
            raise MetricError("scores and labels differ in length")
        n_pos = int(positive.sum())
        n_neg = int(positive.size - n_pos)
        if n_pos == 0 or n_neg == 0:
            raise MetricError("AUROC needs at least one positive and one negative sample")
        ranks = rankdata(scores, method='average')
        return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))

    def build_report(self, true_labels, predicted_labels, scores=None, class_names=None, structures=None):
        """One-vs-rest metrics per class, a macro row and the confusion matrix."""
        names = list(class_names or [label.value for label in WeberLabel])
        k = len(names)
        cm = self.confusion(true_labels, predicted_labels, k)
        if cm.total == 0:
            raise MetricError("cannot report on an empty test set")
        y = np.asarray(true_labels, dtype=np.int64).reshape(-1)
        score_matrix = None if scores is None else np.asarray(scores, dtype=np.float64).reshape(y.size, k)

        rows = []
        for index, name in enumerate(names):
            rates = self.binary_rates(*cm.one_vs_rest(index))
            area = None
            if score_matrix is not None and 0 < int(np.sum(y == index)) < y.size:
                area = self.auroc(score_matrix[:, index], y == index)
            rows.append(ClassMetrics(name=name, support=int(cm.counts[index].sum()),
                                     accuracy=rates.accuracy, precision=rates.precision,
                                     specificity=rates.specificity, sensitivity=rates.sensitivity,
                                     auroc=area))
        macro = ClassMetrics(
            name='macro', support=cm.total,
            accuracy=_mean_defined([r.accuracy for r in rows]),
            precision=_mean_defined([r.precision for r in rows]),
            specificity=_mean_defined([r.specificity for r in rows]),
            sensitivity=_mean_defined([r.sensitivity for r in rows]),
            auroc=_mean_defined([r.auroc for r in rows]),
        )
        overall = float(np.trace(cm.counts)) / cm.total
        return MetricsReport(classes=rows, macro=macro, overall_accuracy=overall, confusion=cm,
                             structures=list(structures or []))

    # ---------------------------------------------------------------- output

    def report_csv(self, report):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(REPORT_FIELDS)
        for row in report.classes + [report.macro]:
            writer.writerow([row.name, row.support] + [format_value(getattr(row, name)) for name in REPORT_FIELDS[2:]])
        writer.writerow(['overall', report.confusion.total, format_value(report.overall_accuracy), '', '', '', ''])
        return buffer.getvalue()

    def confusion_csv(self, report, normalized=False):
        names = [row.name for row in report.classes]
        values = report.confusion.row_normalized() if normalized else report.confusion.counts
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['true\\pred'] + names)
        for name, row in zip(names, values):
            writer.writerow([name] + [format_value(v) for v in row])
        return buffer.getvalue()

    def structures_csv(self, scores, case_ids=None):
        """Registration overlap table; one row per (case, structure)."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['case', 'structure', 'dice', 'hd95', 'both_empty'])
        for index, case_scores in enumerate(scores):
            case = case_ids[index] if case_ids else str(index)
            for score in case_scores:
                writer.writerow([case, score.name, format_value(score.dice), format_value(score.hd95),
                                 int(score.both_empty)])
        return buffer.getvalue()

    def report_text(self, report):
        lines = [f"{'class':<8}{'n':>5}{'acc':>10}{'pre':>10}{'spe':>10}{'sen':>10}{'auroc':>10}"]
        for row in report.classes + [report.macro]:
            cells = [format_value(getattr(row, name)) or '-' for name in REPORT_FIELDS[2:]]
            lines.append(f"{row.name:<8}{row.support:>5}" + ''.join(f'{c:>10}' for c in cells))
        lines.append(f"overall accuracy: {format_value(report.overall_accuracy)}")
        lines.append('')
        lines.append('confusion matrix (rows = true, columns = predicted)')
        names = [row.name for row in report.classes]
        lines.append(' ' * 8 + ''.join(f'{n:>8}' for n in names))
        for name, counts in zip(names, report.confusion.counts):
            lines.append(f'{name:<8}' + ''.join(f'{int(c):>8}' for c in counts))
        lines.append('')
        lines.append('row-normalized')
        for name, rates in zip(names, report.confusion.row_normalized()):
            lines.append(f'{name:<8}' + ''.join(f'{r:>8.3f}' for r in rates))
        for score in report.structures:
            hd = format_value(score.hd95) or '-'
            lines.append(f"{score.name}: dice={format_value(score.dice)} hd95={hd}")
        return '\n'.join(lines) + '\n'

    def write_report(self, report, out_dir):
        """Write metrics.csv, confusion.csv, confusion_normalized.csv and report.txt."""
        try:
            os.makedirs(out_dir, exist_ok=True)
            outputs = {
                'metrics.csv': self.report_csv(report),
                'confusion.csv': self.confusion_csv(report),
                'confusion_normalized.csv': self.confusion_csv(report, normalized=True),
                'report.txt': self.report_text(report),
            }
            for name, text in outputs.items():
                with open(os.path.join(out_dir, name), 'w', newline='') as handle:
                    handle.write(text)
        except OSError as e:
            self.logger.error(f"Error writing report to {out_dir}: {str(e)}")
            raise MetricError(f"cannot write report to {out_dir}: {e.strerror}") from e
        self.logger.info(f"Wrote metrics report to {out_dir}")
        return os.path.join(out_dir, 'metrics.csv')
