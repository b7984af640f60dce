import dataclasses


class BaseModel:
    """Base model class with common methods."""

    def to_dict(self):
        """Convert model to dictionary."""
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def update(self, **kwargs):
        """Return a copy with the given attributes replaced."""
        return dataclasses.replace(self, **kwargs)
