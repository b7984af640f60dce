import click

from app.controllers.base_controller import BaseController
from app.models.phantom import PhantomParams
from app.services.phantom_service import PhantomService


class PhantomController(BaseController):
    """Synthetic dataset generation."""

    def __init__(self, group, config=None):
        super().__init__(group, config)
        self.phantom_service = PhantomService(self.config)

    def _register_commands(self):
        self.add_command('phantom', self.phantom, [
            click.Option(['--out', 'out_dir'], required=True, type=click.Path(file_okay=False),
                         help='Output directory for RVOL files and manifest.csv'),
            click.Option(['--labeled'], type=click.IntRange(min=0), default=self.config.DATASET_LABELED),
            click.Option(['--unlabeled'], type=click.IntRange(min=0), default=self.config.DATASET_UNLABELED),
            click.Option(['--test'], type=click.IntRange(min=0), default=self.config.DATASET_TEST),
            click.Option(['--seed'], type=click.IntRange(min=0), default=self.config.SEED),
        ])

    def phantom(self, out_dir, labeled, unlabeled, test, seed):
        """Generate paired healthy/fractured phantoms with Weber labels."""
        base = PhantomParams(dims=self.config.PHANTOM_DIMS, spacing=self.config.PHANTOM_SPACING)
        dataset = self.run_stage('phantom', self.phantom_service.make_dataset,
                                 labeled, unlabeled, test, seed=seed, base=base)
        manifest = self.run_stage('phantom', self.phantom_service.write_dataset, dataset, out_dir)
        return self.success_response(f"Wrote {len(dataset.cases)} cases; manifest at {manifest}")
