import logging
import os
import sys

import click
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Application:
    """Main Application class following OOP paradigm."""

    def __init__(self, config_name=None):
        """Initialize the application."""
        self.cli = None
        self.config_name = config_name or os.environ.get('WEBERLINE_PROFILE', 'default')
        self.config = None
        self.error_handlers = {}

    def create_app(self):
        """Application factory pattern."""
        self.cli = click.Group(name='weberline',
                               help='Ankle fracture registration and semi-supervised Weber classification.')

        # Configure app
        self._configure_app()

        # Configure logging
        self._configure_logging()

        # Register command controllers
        self._register_controllers()

        # Register error handlers
        self._register_error_handlers()

        return self.cli

    def _configure_app(self):
        """Select the configuration profile."""
        from config import get_config
        self.config = get_config(self.config_name)

    def _configure_logging(self):
        """Configure the root logger once from LOG_LEVEL."""
        logging.basicConfig(
            level=getattr(logging, str(self.config.LOG_LEVEL).upper(), logging.INFO),
            format='%(asctime)s %(levelname)s %(name)s: %(message)s',
            stream=sys.stderr,
        )

    def _register_controllers(self):
        """Register application commands."""
        from app.controllers.evaluation_controller import EvaluationController
        from app.controllers.phantom_controller import PhantomController
        from app.controllers.pipeline_controller import PipelineController
        from app.controllers.registration_controller import RegistrationController
        from app.controllers.training_controller import TrainingController

        PhantomController(self.cli, self.config)
        RegistrationController(self.cli, self.config)
        TrainingController(self.cli, self.config)
        EvaluationController(self.cli, self.config)
        PipelineController(self.cli, self.config)

    def _register_error_handlers(self):
        """Register global error handlers."""
        from app.errors import StageError, WeberlineError
        from app.middleware.error_handler import ErrorHandler
        error_handler = ErrorHandler()

        self.error_handlers[click.UsageError] = error_handler.handle_usage_error
        self.error_handlers[click.ClickException] = error_handler.handle_click_error
        self.error_handlers[click.Abort] = error_handler.handle_abort
        self.error_handlers[StageError] = error_handler.handle_stage_error
        self.error_handlers[WeberlineError] = error_handler.handle_domain_error
        self.error_handlers[Exception] = error_handler.handle_internal_error

    def handle_error(self, error):
        """Dispatch to the handler of the most specific registered class."""
        for cls in type(error).__mro__:
            if cls in self.error_handlers:
                return self.error_handlers[cls](error)
        raise error

    def run(self, argv=None):
        """Run one command and return its exit code."""
        if self.cli is None:
            self.create_app()
        try:
            result = self.cli.main(args=argv, prog_name='weberline', standalone_mode=False)
        except Exception as e:
            return self.handle_error(e)
        return result if isinstance(result, int) else 0
