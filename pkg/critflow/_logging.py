import logging

_logger = logging.getLogger('critflow')
_logger.addHandler(logging.NullHandler())

_trace_enabled = False

__all__ = ['enable_trace', 'warning', 'info', 'debug', 'trace']


def enable_trace(traceable, handler=None, level=logging.DEBUG):
    """
    Turn on/off the traceability.

    Parameters
    ----------
    traceable: bool
        If set to True, per-iteration traces of the Newton and root solves
        are emitted.
    handler: logging.Handler
        Handler attached to the package logger when tracing is enabled.
    level: int
        Level set on the package logger when tracing is enabled.
    """
    global _trace_enabled
    _trace_enabled = traceable
    if traceable:
        _logger.addHandler(handler or logging.StreamHandler())
        _logger.setLevel(level)


def warning(msg, *args):
    _logger.warning(msg, *args)


def info(msg, *args):
    _logger.info(msg, *args)


def debug(msg, *args):
    _logger.debug(msg, *args)


def trace(msg, *args):
    if _trace_enabled:
        _logger.debug(msg, *args)
