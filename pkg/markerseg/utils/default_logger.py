import sys

from loguru import logger

from markerseg.settings.config import settings

# {extra} field can be used to pass extra parameters to the logger using .bind()
FORMAT = '{time:MMMM D, YYYY > HH:mm:ss!UTC} | {level} | {message} | {extra}'

LEVELS = ('TRACE', 'DEBUG', 'INFO', 'SUCCESS', 'WARNING', 'ERROR', 'CRITICAL')


def level_filter(level_name):
    """
    Builds a filter that only lets records of exactly one level through.

    Args:
        level_name (str): The loguru level name, e.g. 'INFO'.

    Returns:
        Callable[[dict], bool]: Filter usable as the `filter` argument of `logger.add`.
    """
    def _filter(record):
        return record['level'].name == level_name
    return _filter


def add_console_sinks(level='INFO', serialize=False):
    """
    Adds stdout (from `level`) and stderr (errors only) sinks.

    Args:
        level (str): Minimum level for stdout.
        serialize (bool): Emit JSON records instead of formatted lines.
    """
    logger.add(sys.stdout, format=FORMAT, level=level, serialize=serialize)
    logger.add(sys.stderr, format=FORMAT, level='ERROR', serialize=serialize)


logger.remove()

if settings.logs.write_to_files:
    for level_name in LEVELS:
        logger.add(
            f'logs/{level_name.lower()}.log', level=level_name, format=FORMAT, filter=level_filter(level_name),
            rotation='6 hours', compression='tar.xz', retention='2 days',
        )
