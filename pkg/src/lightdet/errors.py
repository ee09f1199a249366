class ValidationError(Exception):
    """User-facing input problem: bad config, bad file, bad shapes."""


class CheckpointError(ValidationError):
    """Checkpoint file rejected: wrong magic, version, layout, or tensor set."""
