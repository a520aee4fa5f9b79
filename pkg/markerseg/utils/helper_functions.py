import threading
import time
from functools import wraps

import psutil

from markerseg.settings.config import settings
from markerseg.utils.default_logger import logger
from markerseg.utils.models.data_models import GridRow

# setup logging
logger = logger.bind(module='HelperFunctions')


def capture_cell_failure(fn):
    """
    A decorator for grid-cell runners: any exception raised by the cell is logged and
    turned into a failed GridRow so the rest of the grid keeps running.

    The wrapped function must take the cell (with `name` and `axes`) as its first argument.

    Args:
        fn (function): The cell runner to be wrapped.

    Returns:
        function: The wrapped function.
    """
    @wraps(fn)
    def wrapper(cell, *args, **kwargs):
        try:
            return fn(cell, *args, **kwargs)
        except Exception as e:
            logger.opt(exception=settings.logs.trace_enabled).error(
                'Grid cell {} failed: {}', cell.name, e,
            )
            return GridRow(cell=cell.name, axes=cell.axes, status='failed', error=str(e))
    return wrapper


class PeakMemoryMonitor:
    """
    Samples the resident set size of this process on a background thread and keeps
    the maximum. Usable as a context manager around a unit of work.
    """

    def __init__(self, interval_s: float = 0.5):
        self._interval_s = interval_s
        self._process = psutil.Process()
        self._stop = threading.Event()
        self._thread = None
        self.peak_bytes = 0
        self.started_at = 0.0
        self.elapsed_s = 0.0

    def _sample(self):
        self.peak_bytes = max(self.peak_bytes, self._process.memory_info().rss)

    def _run(self):
        while not self._stop.wait(self._interval_s):
            self._sample()

    def __enter__(self):
        self.started_at = time.perf_counter()
        self._sample()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, exc_type, exc, tb):
        self._stop.set()
        self._thread.join()
        self._sample()
        self.elapsed_s = time.perf_counter() - self.started_at
        return False

    @property
    def peak_mb(self) -> float:
        return self.peak_bytes / (1024 * 1024)
