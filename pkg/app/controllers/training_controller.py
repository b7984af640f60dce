import os

import click

from app.controllers.base_controller import BaseController
from app.errors import StageError
from app.services.pipeline_service import PipelineService
from app.services.ssl_service import SemiSupervisedTrainer


class TrainingController(BaseController):
    """Semi-supervised classifier training."""

    def __init__(self, group, config=None):
        super().__init__(group, config)
        self.pipeline_service = PipelineService(self.config)

    def _register_commands(self):
        self.add_command('train', self.train, [
            click.Option(['--data', 'data_dir'], required=True, type=click.Path(file_okay=False),
                         help='Dataset directory with manifest.csv'),
            click.Option(['--labeled-frac'], type=click.FloatRange(min=0, max=1, min_open=True),
                         default=self.config.TRAIN_LABELED_FRACTION,
                         help='Fraction of labeled cases whose labels are kept (0.05, 0.2, 0.5, 0.7)'),
            click.Option(['--epochs'], type=click.IntRange(min=0), default=self.config.TRAIN_EPOCHS),
            click.Option(['--seed'], type=click.IntRange(min=0), default=self.config.SEED),
            click.Option(['--out', 'out_dir'], required=True, type=click.Path(file_okay=False),
                         help='Checkpoint directory'),
            click.Option(['--mode'], type=click.Choice(['semi', 'supervised']), default='semi'),
            click.Option(['--weighting'], type=click.Choice(['logit', 'loss']),
                         default=self.config.TRAIN_WEIGHTING),
            click.Option(['--lambda', 'mmd_weight'], type=click.FloatRange(min=0),
                         default=self.config.TRAIN_MMD_WEIGHT),
        ])

    def train(self, data_dir, labeled_frac, epochs, seed, out_dir, mode, weighting, mmd_weight):
        """Register, crop and train on a phantom dataset; writes checkpoint.tnck and train_log.csv."""
        if not os.path.isdir(data_dir):
            raise StageError('train', f"data directory not found: {data_dir}")
        pipeline_config = self.pipeline_service.build_config({
            'seed': seed,
            'data_dir': data_dir,
            'train': {'labeled_fraction': labeled_frac, 'epochs': epochs, 'seed': seed, 'mode': mode,
                      'weighting': weighting, 'mmd_weight': mmd_weight},
        })
        (labeled, unlabeled, validation, _), _ = self.pipeline_service.prepare(
            data_dir, pipeline_config, out_dir, splits=('labeled', 'unlabeled'))
        trainer = SemiSupervisedTrainer(pipeline_config.train, crop_size=pipeline_config.crop_size,
                                        config=self.config)
        history = self.run_stage('train', trainer.fit, labeled, unlabeled, validation,
                                 log_path=os.path.join(out_dir, 'train_log.csv'))
        checkpoint = os.path.join(out_dir, 'checkpoint.tnck')
        self.run_stage('train', trainer.state.save, checkpoint)
        last = history.epochs[-1].loss_total if history.epochs else float('nan')
        return self.success_response(
            f"Trained {len(history.epochs)} epochs on {len(labeled)} labeled / {len(unlabeled)} unlabeled "
            f"crops (final loss {last:.4f}); checkpoint at {checkpoint}")
