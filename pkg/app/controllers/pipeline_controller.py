import click

from app.controllers.base_controller import BaseController
from app.services.pipeline_service import PipelineService


class PipelineController(BaseController):
    """End-to-end runs and effective-config dumps."""

    def __init__(self, group, config=None):
        super().__init__(group, config)
        self.pipeline_service = PipelineService(self.config)

    def _register_commands(self):
        self.add_command('run', self.run, [
            click.Option(['--config', 'config_path'], default=None, type=click.Path(dir_okay=False),
                         help='JSON config; absent keys come from the profile'),
            click.Option(['--out', 'out_dir'], default=None, type=click.Path(file_okay=False)),
        ])
        self.add_command('config', self.show_config, [
            click.Option(['--config', 'config_path'], default=None, type=click.Path(dir_okay=False)),
            click.Option(['--profile'], default=None, type=click.Choice(['desk', 'paper', 'testing'])),
        ])

    def _load(self, config_path, profile=None):
        if config_path:
            return self.pipeline_service.load_config(config_path)
        return self.pipeline_service.build_config({'profile': profile} if profile else {})

    def run(self, config_path, out_dir):
        """Run phantom -> register -> crop -> train -> evaluate."""
        pipeline_config = self._load(config_path)
        metrics_path = self.pipeline_service.run_pipeline(pipeline_config, out_dir)
        return self.success_response(f"Report written to {metrics_path}")

    def show_config(self, config_path, profile):
        """Print the effective configuration as JSON."""
        pipeline_config = self._load(config_path, profile)
        click.echo(self.pipeline_service.config_json(pipeline_config), nl=False)
        return 0
