from . import report, traces  # noqa: F401
