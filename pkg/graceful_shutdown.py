"""
Graceful shutdown handling for long training runs

SIGINT/SIGTERM set a flag; the trainer checks it between iterations, stops
at the boundary and still writes its checkpoint.
"""
import signal
import logging
import threading
from contextlib import contextmanager

logger = logging.getLogger(__name__)

class GracefulShutdownManager:
    """Turns termination signals into a stop request honoured between iterations"""

    def __init__(self):
        self._is_shutting_down = False
        self._shutdown_lock = threading.RLock()
        self._active_runs = 0
        self._run_lock = threading.RLock()
        self._installed = False

    def install(self):
        """Register signal handlers; only possible from the main thread"""
        if self._installed:
            return
        if threading.current_thread() is not threading.main_thread():
            logger.warning("Signal handlers can only be installed from the main thread")
            return
        signal.signal(signal.SIGTERM, self._signal_handler)
        signal.signal(signal.SIGINT, self._signal_handler)
        self._installed = True
        logger.debug("Graceful shutdown handlers installed")

    def _signal_handler(self, signum, frame):
        """Handle shutdown signals"""
        signal_name = signal.Signals(signum).name
        logger.warning(f"Received {signal_name}, stopping after the current iteration")
        self.shutdown()

    @contextmanager
    def run_context(self):
        """Context manager to track active training runs"""
        if self._is_shutting_down:
            raise RuntimeError("Shutdown requested, refusing to start a new run")

        with self._run_lock:
            self._active_runs += 1

        try:
            yield self
        finally:
            with self._run_lock:
                self._active_runs -= 1

    def is_shutting_down(self) -> bool:
        """Check if a stop has been requested"""
        return self._is_shutting_down

    def get_active_runs(self) -> int:
        return self._active_runs

    def shutdown(self):
        """Request a stop; repeated requests are ignored"""
        with self._shutdown_lock:
            if self._is_shutting_down:
                logger.warning("Shutdown already in progress")
                return

            self._is_shutting_down = True


# Global shutdown manager instance
shutdown_manager = GracefulShutdownManager()
