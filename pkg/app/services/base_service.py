import logging

from config import get_config


class BaseService:
    """Base service class with common methods."""

    def __init__(self, config=None):
        self.config = config or get_config()
        self.logger = logging.getLogger(self.__class__.__name__)
