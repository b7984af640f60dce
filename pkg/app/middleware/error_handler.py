import logging

import click

EXIT_SUCCESS = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class ErrorHandler:
    """Global error handler class; turns exceptions into exit codes."""

    def __init__(self):
        self.logger = logging.getLogger(self.__class__.__name__)

    def handle_usage_error(self, error):
        """Handle unknown flags, missing options and bad option values."""
        self.logger.warning(f"Usage error: {str(error)}")
        error.show()
        return EXIT_USAGE

    def handle_click_error(self, error):
        """Handle other command-line failures such as unreadable files."""
        self.logger.warning(f"Command error: {str(error)}")
        error.show()
        return error.exit_code

    def handle_stage_error(self, error):
        """Handle a failure tagged with the stage it happened in."""
        self.logger.error(f"Stage {error.stage} failed: {error.message}")
        click.echo(str(error), err=True)
        return EXIT_FAILURE

    def handle_domain_error(self, error):
        """Handle an untagged domain error."""
        self.logger.error(f"{error.__class__.__name__}: {str(error)}")
        click.echo(f"[error] {str(error)}", err=True)
        return EXIT_FAILURE

    def handle_abort(self, error):
        click.echo('Aborted!', err=True)
        return EXIT_FAILURE

    def handle_internal_error(self, error):
        """Handle anything unexpected."""
        self.logger.exception(f"Internal error: {str(error)}")
        click.echo(f"[internal] {error.__class__.__name__}: {str(error)}", err=True)
        return EXIT_FAILURE
