import json
import os

import numpy as np
from marshmallow import Schema, ValidationError, fields, validate, validates_schema

from app.errors import StageError, WeberlineError
from app.models.geometry import IcpConfig
from app.models.phantom import NUM_CLASSES, PhantomParams, PhantomRanges, WeberLabel
from app.models.pipeline import DatasetConfig, PipelineConfig
from app.models.report import StructureScore
from app.models.training import LabeledSet, TrainConfig, UnlabeledSet
from app.models.volume import BBox
from app.services.base_service import BaseService
from app.services.metrics_service import MetricsService
from app.services.phantom_service import PhantomService
from app.services.registration_service import RegistrationService
from app.services.ssl_service import SemiSupervisedTrainer
from app.services.volume_service import VolumeService
from config import get_config


class IcpSchema(Schema):
    max_iterations = fields.Int(required=True, validate=validate.Range(min=1))
    convergence_epsilon = fields.Float(required=True, validate=validate.Range(min=0, min_inclusive=False))
    allow_scale = fields.Bool(required=True)
    max_correspondence_distance = fields.Float(required=True, allow_none=True)


class TrainSchema(Schema):
    learning_rate = fields.Float(required=True, validate=validate.Range(min=0, min_inclusive=False))
    momentum = fields.Float(required=True, validate=validate.Range(min=0))
    batch_size = fields.Int(required=True, validate=validate.Range(min=2))
    epochs = fields.Int(required=True, validate=validate.Range(min=0))
    mmd_weight = fields.Float(required=True, validate=validate.Range(min=0))
    confidence_threshold = fields.Float(required=True, validate=validate.Range(
        min=0, max=1, min_inclusive=False, max_inclusive=False))
    buffer_capacity = fields.Int(required=True, validate=validate.Range(min=1))
    mmd_bandwidth = fields.Float(required=True, allow_none=True)
    weighting = fields.Str(required=True, validate=validate.OneOf(['logit', 'loss']))
    mode = fields.Str(required=True, validate=validate.OneOf(['semi', 'supervised']))
    augment = fields.Bool(required=True)
    rwn_width = fields.Int(required=True, validate=validate.Range(min=1))
    se_reduction = fields.Int(required=True, validate=validate.Range(min=1))
    labeled_fraction = fields.Float(required=True, validate=validate.Range(min=0, max=1, min_inclusive=False))
    validation_fraction = fields.Float(required=True, validate=validate.Range(min=0, max=1, max_inclusive=False))
    seed = fields.Int(required=True, validate=validate.Range(min=0))


class DatasetSchema(Schema):
    labeled = fields.Int(required=True, validate=validate.Range(min=0))
    unlabeled = fields.Int(required=True, validate=validate.Range(min=0))
    test = fields.Int(required=True, validate=validate.Range(min=0))


class PhantomRangesSchema(Schema):
    tibia_radius = fields.List(fields.Float(), required=True, validate=validate.Length(equal=2))
    fibula_radius = fields.List(fields.Float(), required=True, validate=validate.Length(equal=2))
    fracture_gap = fields.List(fields.Int(), required=True, validate=validate.Length(equal=2))
    boundary_clearance = fields.Int(required=True)
    plane_span = fields.Int(required=True)
    fragment_rotation_deg = fields.Float(required=True)
    fragment_translation_mm = fields.Float(required=True)
    pose_rotation_deg = fields.Float(required=True)
    pose_tilt_deg = fields.Float(required=True)
    pose_translation_mm = fields.List(fields.Float(), required=True, validate=validate.Length(equal=3))


class PipelineConfigSchema(Schema):
    """Schema for pipeline JSON config files and effective-config dumps."""

    profile = fields.Str(required=True)
    defaults_version = fields.Str(required=True)
    seed = fields.Int(required=True, validate=validate.Range(min=0))
    output_dir = fields.Str(required=True)
    data_dir = fields.Str(required=True)
    crop_size = fields.List(fields.Int(validate=validate.Range(min=1)), required=True,
                            validate=validate.Length(equal=2))
    phantom_dims = fields.List(fields.Int(validate=validate.Range(min=1)), required=True,
                               validate=validate.Length(equal=3))
    phantom_spacing = fields.List(fields.Float(validate=validate.Range(min=0, min_inclusive=False)),
                                  required=True, validate=validate.Length(equal=3))
    dataset = fields.Nested(DatasetSchema, required=True)
    phantom = fields.Nested(PhantomRangesSchema, required=True)
    icp = fields.Nested(IcpSchema, required=True)
    train = fields.Nested(TrainSchema, required=True)

    @validates_schema
    def validate_crop(self, data, **kwargs):
        if any(v % 4 or v < 8 for v in data.get('crop_size', [])):
            raise ValidationError('crop size must be a multiple of 4 and at least 8', 'crop_size')


def _merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class PipelineService(BaseService):
    """End-to-end phantom, register, crop, train and evaluate run."""

    def __init__(self, config=None):
        super().__init__(config)
        self.schema = PipelineConfigSchema()
        self.volume_service = VolumeService(self.config)
        self.phantom_service = PhantomService(self.config)
        self.registration_service = RegistrationService(self.config)
        self.metrics_service = MetricsService(self.config)

    # ------------------------------------------------------------------ config

    def profile_defaults(self, profile=None):
        """Plain-dict configuration of a profile class."""
        cfg = get_config(profile) if profile else self.config
        ranges = PhantomRanges()
        return {
            'profile': cfg.PROFILE,
            'defaults_version': cfg.DEFAULTS_VERSION,
            'seed': cfg.SEED,
            'output_dir': cfg.OUTPUT_DIR,
            'data_dir': '',
            'crop_size': list(cfg.CROP_SIZE),
            'phantom_dims': list(cfg.PHANTOM_DIMS),
            'phantom_spacing': list(cfg.PHANTOM_SPACING),
            'dataset': {'labeled': cfg.DATASET_LABELED, 'unlabeled': cfg.DATASET_UNLABELED,
                        'test': cfg.DATASET_TEST},
            'phantom': {
                'tibia_radius': list(ranges.tibia_radius),
                'fibula_radius': list(ranges.fibula_radius),
                'fracture_gap': list(ranges.fracture_gap),
                'boundary_clearance': ranges.boundary_clearance,
                'plane_span': ranges.plane_span,
                'fragment_rotation_deg': ranges.fragment_rotation_deg,
                'fragment_translation_mm': ranges.fragment_translation_mm,
                'pose_rotation_deg': ranges.pose_rotation_deg,
                'pose_tilt_deg': ranges.pose_tilt_deg,
                'pose_translation_mm': list(ranges.pose_translation_mm),
            },
            'icp': {
                'max_iterations': cfg.ICP_MAX_ITERATIONS,
                'convergence_epsilon': cfg.ICP_CONVERGENCE_EPSILON,
                'allow_scale': cfg.ICP_ALLOW_SCALE,
                'max_correspondence_distance': cfg.ICP_MAX_CORRESPONDENCE_DISTANCE,
            },
            'train': {
                'learning_rate': cfg.TRAIN_LEARNING_RATE,
                'momentum': cfg.TRAIN_MOMENTUM,
                'batch_size': cfg.TRAIN_BATCH_SIZE,
                'epochs': cfg.TRAIN_EPOCHS,
                'mmd_weight': cfg.TRAIN_MMD_WEIGHT,
                'confidence_threshold': cfg.TRAIN_CONFIDENCE_THRESHOLD,
                'buffer_capacity': cfg.TRAIN_BUFFER_CAPACITY,
                'mmd_bandwidth': None,
                'weighting': cfg.TRAIN_WEIGHTING,
                'mode': 'semi',
                'augment': cfg.TRAIN_AUGMENT,
                'rwn_width': cfg.TRAIN_RWN_WIDTH,
                'se_reduction': cfg.TRAIN_SE_REDUCTION,
                'labeled_fraction': cfg.TRAIN_LABELED_FRACTION,
                'validation_fraction': cfg.TRAIN_VALIDATION_FRACTION,
                'seed': cfg.SEED,
            },
        }

    def build_config(self, overrides=None):
        """Validate overrides merged onto the selected profile's defaults."""
        overrides = dict(overrides or {})
        try:
            base = self.profile_defaults(overrides.get('profile'))
        except ValueError as e:
            raise StageError('config', str(e)) from e
        if 'seed' in overrides and 'seed' not in overrides.get('train', {}):
            overrides.setdefault('train', {})['seed'] = overrides['seed']
        merged = _merge(base, overrides)
        try:
            data = self.schema.load(merged)
        except ValidationError as e:
            raise StageError('config', f"invalid config: {e.messages}") from e
        if data['defaults_version'] != self.config.DEFAULTS_VERSION:
            raise StageError('config', f"unsupported defaults_version {data['defaults_version']!r}")
        try:
            return PipelineConfig(
                profile=data['profile'],
                defaults_version=data['defaults_version'],
                seed=data['seed'],
                output_dir=data['output_dir'],
                data_dir=data['data_dir'],
                crop_size=tuple(data['crop_size']),
                phantom_dims=tuple(data['phantom_dims']),
                phantom_spacing=tuple(data['phantom_spacing']),
                dataset=DatasetConfig(**data['dataset']),
                phantom=PhantomRanges(**{k: tuple(v) if isinstance(v, list) else v
                                         for k, v in data['phantom'].items()}),
                icp=IcpConfig(**data['icp']),
                train=TrainConfig(**data['train']),
            )
        except WeberlineError as e:
            if isinstance(e, StageError):
                raise
            raise StageError('config', str(e)) from e

    def load_config(self, path):
        """Read a JSON config file; absent keys come from its profile."""
        if not os.path.isfile(path):
            raise StageError('config', f"config file not found: {path}")
        try:
            with open(path) as handle:
                overrides = json.load(handle)
        except json.JSONDecodeError as e:
            raise StageError('config', f"config {path} is not valid JSON: {str(e)}") from e
        if not isinstance(overrides, dict):
            raise StageError('config', f"config {path} must hold a JSON object")
        return self.build_config(overrides)

    def dump_config(self, pipeline_config):
        """Effective configuration as a JSON-ready dict."""
        data = {
            'profile': pipeline_config.profile,
            'defaults_version': pipeline_config.defaults_version,
            'seed': pipeline_config.seed,
            'output_dir': pipeline_config.output_dir,
            'data_dir': pipeline_config.data_dir,
            'crop_size': list(pipeline_config.crop_size),
            'phantom_dims': list(pipeline_config.phantom_dims),
            'phantom_spacing': list(pipeline_config.phantom_spacing),
            'dataset': pipeline_config.dataset.to_dict(),
            'phantom': pipeline_config.phantom.to_dict(),
            'icp': pipeline_config.icp.to_dict(),
            'train': pipeline_config.train.to_dict(),
        }
        return self.schema.dump(data)

    def config_json(self, pipeline_config):
        return json.dumps(self.dump_config(pipeline_config), indent=2, sort_keys=True) + '\n'

    # ------------------------------------------------------------------ stages

    def base_params(self, pipeline_config):
        return PhantomParams(dims=pipeline_config.phantom_dims, spacing=pipeline_config.phantom_spacing)

    def stage_phantom(self, pipeline_config, out_dir):
        if pipeline_config.data_dir:
            if not os.path.isdir(pipeline_config.data_dir):
                raise StageError('phantom', f"data directory not found: {pipeline_config.data_dir}")
            return pipeline_config.data_dir
        data_dir = os.path.join(out_dir, 'phantoms')
        dataset = self.phantom_service.make_dataset(
            pipeline_config.dataset.labeled, pipeline_config.dataset.unlabeled, pipeline_config.dataset.test,
            ranges=pipeline_config.phantom, seed=pipeline_config.seed, base=self.base_params(pipeline_config))
        self.phantom_service.write_dataset(dataset, data_dir)
        return data_dir

    def stage_register(self, rows, icp_config, out_dir):
        """Register every case; writes transforms and registration_metrics.csv."""
        registered, scores, case_ids = [], [], []
        for row in rows:
            fractured = self.volume_service.load_volume(row['path'])
            healthy = self.volume_service.load_volume(row['healthy_path'])
            result = self.registration_service.register_pair(fractured, healthy, icp_config)
            case_id = os.path.basename(row['path']).replace('_fractured.rvol', '')
            self.registration_service.save_transform(result, os.path.join(out_dir, 'transforms', f'{case_id}.json'))
            scores.append(self.metrics_service.structure_scores(
                result.transformed, healthy, self.registration_service.extract_surface_points))
            registered.append((row, result.transformed))
            case_ids.append(case_id)
        with open(os.path.join(out_dir, 'registration_metrics.csv'), 'w', newline='') as handle:
            handle.write(self.metrics_service.structures_csv(scores, case_ids))
        mean_dice = float(np.mean([s[-1].dice for s in scores])) if scores else float('nan')
        self.logger.info(f"Registered {len(rows)} cases, mean Dice {mean_dice:.4f}")
        return registered, scores

    def stage_crop(self, registered, crop_size, out_dir):
        """Crop the syndesmosis region and turn it into a classifier image."""
        images = {}
        for row, transformed in registered:
            box = BBox.from_string(row['crop_box'], transformed.dims)
            cropped = self.registration_service.crop_syndesmosis(transformed, box)
            case_id = os.path.basename(row['path']).replace('_fractured.rvol', '')
            self.volume_service.save_volume(cropped, os.path.join(out_dir, 'crops', f'{case_id}.rvol'))
            image = self.volume_service.resize_slice(
                self.volume_service.project_labels(cropped), crop_size[0], crop_size[1], mode='nearest')
            images.setdefault(row['split'], []).append((row, image))
        return images

    def split_labeled(self, images, labels, train_config, seed):
        """Stratified hold-out of validation cases, then of the labeled fraction.

        Returns (labeled, demoted_images, demoted_labels, validation) where the
        demoted cases join the unlabeled pool with hidden labels.
        """
        rng = np.random.default_rng(seed)
        keep, demote, validation = [], [], []
        for k in range(NUM_CLASSES):
            members = rng.permutation(np.flatnonzero(labels == k))
            n_val = int(round(train_config.validation_fraction * members.size))
            n_val = min(n_val, max(members.size - 1, 0))
            validation.extend(members[:n_val].tolist())
            rest = members[n_val:]
            n_keep = max(1, int(round(train_config.labeled_fraction * rest.size))) if rest.size else 0
            keep.extend(rest[:n_keep].tolist())
            demote.extend(rest[n_keep:].tolist())
        keep, demote, validation = sorted(keep), sorted(demote), sorted(validation)
        labeled = LabeledSet(images[keep], labels[keep])
        val_set = LabeledSet(images[validation], labels[validation]) if validation else None
        return labeled, images[demote], labels[demote], val_set

    def assemble_sets(self, images_by_split, pipeline_config, hidden_labels=None):
        """Training, validation and test sets from cropped images.

        `hidden_labels` maps case paths to oracle labels of unlabeled cases;
        they only feed the pseudo-label accuracy column of the epoch log.
        """
        hidden_labels = hidden_labels or {}

        def stack(split, label_of):
            entries = images_by_split.get(split, [])
            h, w = pipeline_config.crop_size
            images = np.stack([image for _, image in entries]) if entries else np.zeros((0, h, w))
            labels = np.asarray([WeberLabel(label_of(row)).index if label_of(row) else -1
                                 for row, _ in entries], dtype=np.int64)
            return images, labels

        labeled_images, labeled_labels = stack('labeled', lambda row: row.get('label'))
        unlabeled_images, hidden = stack('unlabeled', lambda row: hidden_labels.get(row['path']))
        test_images, test_labels = stack('test', lambda row: row.get('label'))
        labeled, demoted_images, demoted_labels, validation = self.split_labeled(
            labeled_images, labeled_labels, pipeline_config.train, pipeline_config.seed)
        unlabeled = UnlabeledSet(np.concatenate([demoted_images, unlabeled_images]),
                                 np.concatenate([demoted_labels, hidden]))
        if np.any(unlabeled.hidden_labels < 0):
            unlabeled = UnlabeledSet(unlabeled.images)
        test = LabeledSet(test_images, test_labels)
        return labeled, unlabeled, validation, test

    def prepare(self, data_dir, pipeline_config, out_dir, splits=None):
        """Register and crop the cases of a dataset directory into training sets."""
        stage = 'register'
        try:
            rows = self.phantom_service.read_manifest(data_dir)
            if splits is not None:
                rows = [row for row in rows if row['split'] in splits]
            registered, scores = self.stage_register(rows, pipeline_config.icp, out_dir)
            stage = 'crop'
            images = self.stage_crop(registered, pipeline_config.crop_size, out_dir)
            sets = self.assemble_sets(images, pipeline_config, self.phantom_service.read_oracle(data_dir))
        except StageError:
            raise
        except (WeberlineError, OSError) as e:
            self.logger.error(f"Pipeline failed in stage {stage}: {str(e)}")
            raise StageError(stage, str(e)) from e
        test_scores = [s for (row, _), s in zip(registered, scores) if row['split'] == 'test']
        return sets, self.mean_structures(test_scores)

    def run_pipeline(self, config_or_path, output_dir=None):
        """Run every stage; artifacts land under one timestamp-free directory.

        Returns the path of the metrics CSV.
        """
        pipeline_config = (self.load_config(config_or_path) if isinstance(config_or_path, str)
                           else config_or_path)
        out_dir = output_dir or pipeline_config.output_dir
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, 'config.json'), 'w') as handle:
            handle.write(self.config_json(pipeline_config))

        try:
            data_dir = self.stage_phantom(pipeline_config, out_dir)
        except StageError:
            raise
        except (WeberlineError, OSError) as e:
            raise StageError('phantom', str(e)) from e
        (labeled, unlabeled, validation, test), structures = self.prepare(data_dir, pipeline_config, out_dir)

        stage = 'train'
        try:
            trainer = SemiSupervisedTrainer(pipeline_config.train, crop_size=pipeline_config.crop_size,
                                            config=self.config)
            trainer.fit(labeled, unlabeled, validation, log_path=os.path.join(out_dir, 'train_log.csv'))
            trainer.state.save(os.path.join(out_dir, 'checkpoint.tnck'))
            stage = 'evaluate'
            report = trainer.evaluate(test.images, test.labels, structures=structures)
            metrics_path = self.metrics_service.write_report(report, os.path.join(out_dir, 'report'))
        except (WeberlineError, OSError) as e:
            self.logger.error(f"Pipeline failed in stage {stage}: {str(e)}")
            raise StageError(stage, str(e)) from e
        self.logger.info(f"Pipeline finished: overall accuracy {report.overall_accuracy:.4f}")
        return metrics_path

    @staticmethod
    def mean_structures(case_scores):
        """Average each structure's Dice and HD95 across cases."""
        if not case_scores:
            return []
        out = []
        for index, first in enumerate(case_scores[0]):
            dices = [scores[index].dice for scores in case_scores]
            hds = [scores[index].hd95 for scores in case_scores if scores[index].hd95 is not None]
            out.append(StructureScore(name=first.name, dice=float(np.mean(dices)),
                                      hd95=float(np.mean(hds)) if hds else None))
        return out
