import structlog


def get_logger(name: str | None = None):
    """Return a structlog logger; configuration happens once in main.py."""
    if name is None:
        return structlog.get_logger()
    return structlog.get_logger(name)
