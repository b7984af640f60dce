import os

import click

from app.controllers.base_controller import BaseController
from app.errors import StageError
from app.services.metrics_service import MetricsService
from app.services.pipeline_service import PipelineService
from app.services.ssl_service import SemiSupervisedTrainer
from app.tensornet import TrainState


class EvaluationController(BaseController):
    """Test-set evaluation and report rendering."""

    def __init__(self, group, config=None):
        super().__init__(group, config)
        self.pipeline_service = PipelineService(self.config)
        self.metrics_service = MetricsService(self.config)

    def _register_commands(self):
        self.add_command('evaluate', self.evaluate, [
            click.Option(['--ckpt'], required=True, type=click.Path(dir_okay=False),
                         help='Checkpoint written by train'),
            click.Option(['--data', 'data_dir'], required=True, type=click.Path(file_okay=False)),
            click.Option(['--out', 'out_dir'], default=None, type=click.Path(file_okay=False),
                         help='Report directory (defaults to <ckpt dir>/report)'),
        ])
        self.add_command('report', self.report, [
            click.Option(['--dir', 'report_dir'], required=True, type=click.Path(file_okay=False),
                         help='Directory written by evaluate or run'),
        ])

    def evaluate(self, ckpt, data_dir, out_dir):
        """Classify the test split and write the metrics report; prints the metrics CSV."""
        if not os.path.isdir(data_dir):
            raise StageError('evaluate', f"data directory not found: {data_dir}")
        state = self.run_stage('evaluate', TrainState.load, ckpt)
        out_dir = out_dir or os.path.join(os.path.dirname(os.path.abspath(ckpt)), 'report')
        pipeline_config = self.pipeline_service.build_config({
            'data_dir': data_dir,
            'crop_size': state.meta.get('crop_size', list(self.config.CROP_SIZE)),
            'train': {'rwn_width': state.meta['rwn_width'], 'se_reduction': state.meta['se_reduction']},
        })
        (_, _, _, test), structures = self.pipeline_service.prepare(
            data_dir, pipeline_config, out_dir, splits=('test',))
        trainer = SemiSupervisedTrainer(pipeline_config.train, crop_size=pipeline_config.crop_size,
                                        config=self.config, state=state)
        report = self.run_stage('evaluate', trainer.evaluate, test.images, test.labels, structures)
        self.run_stage('evaluate', self.metrics_service.write_report, report, out_dir)
        return self.success_response(self.metrics_service.report_csv(report).rstrip('\n'))

    def report(self, report_dir):
        """Print the text report and confusion matrices of an evaluation directory."""
        path = os.path.join(report_dir, 'report.txt')
        if not os.path.isfile(path):
            raise StageError('report', f"no report found: {path}")
        with open(path) as handle:
            return self.success_response(handle.read().rstrip('\n'))
