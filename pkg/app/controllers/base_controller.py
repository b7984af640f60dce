import logging

import click

from app.errors import StageError, WeberlineError
from config import get_config


class BaseController:
    """Base controller class with common functionality."""

    def __init__(self, group, config=None):
        self.group = group
        self.config = config or get_config()
        self.logger = logging.getLogger(self.__class__.__name__)
        self._register_commands()

    def _register_commands(self):
        """Register commands - to be implemented by subclasses."""
        pass

    def add_command(self, name, callback, params, help=None):
        """Expose a bound method as a subcommand of the application group."""
        self.group.add_command(click.Command(name, callback=callback, params=params,
                                             help=help or callback.__doc__))

    def success_response(self, message):
        """Print a result for the user; returns exit code 0."""
        click.echo(message)
        return 0

    def run_stage(self, stage, func, *args, **kwargs):
        """Call a service and tag domain failures with the stage name."""
        try:
            return func(*args, **kwargs)
        except StageError:
            raise
        except (WeberlineError, OSError) as e:
            self.logger.error(f"Error in {stage}: {str(e)}")
            raise StageError(stage, str(e)) from e
