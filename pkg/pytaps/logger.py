import logging

FORMAT = "%(asctime)s - %(levelname)s - [%(module)s:%(lineno)d] - %(funcName)s - %(message)s"


def build_logger(name: str = "pytaps", level: int = logging.INFO) -> logging.Logger:
    """Package logger with a single stream handler.

    Args:
        name: Logger name.
        level: Initial level.

    Returns:
        logging.Logger:
        Configured logger, reused if it was already built.
    """
    logger = logging.getLogger(name)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(FORMAT))
        logger.addHandler(handler)
        logger.propagate = False
    logger.setLevel(level)
    return logger


LOGGER = build_logger()


def set_verbose(verbose: bool) -> None:
    """Switches the package logger between INFO and DEBUG."""
    LOGGER.setLevel(logging.DEBUG if verbose else logging.INFO)
