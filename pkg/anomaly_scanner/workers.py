"""
Probe Worker Pool
=================

Bounded pool of threads pulling items from an ordered queue.
"""

import queue
import threading
from typing import Callable, Generic, List, Optional, Sequence, TypeVar

from loguru import logger

T = TypeVar('T')


class ProbeWorkerPool(Generic[T]):
    """
    Runs a handler over items with a fixed number of worker threads.

    Items are handed out in order. The first exception raised by a handler
    stops the pool; `run` re-raises it once every worker has exited.
    """

    def __init__(self, concurrency: int = 1, name: str = "probe"):
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self.concurrency = concurrency
        self.name = name

        self.running = False
        self.processed = 0
        self._queue: "queue.Queue[T]" = queue.Queue()
        self._stop_event = threading.Event()
        self._failure: Optional[BaseException] = None
        self._lock = threading.Lock()

    def run(self, items: Sequence[T], handler: Callable[[T], None]):
        """Process all items; blocks until done, stopped or failed."""
        for item in items:
            self._queue.put(item)

        self.running = True
        self._stop_event.clear()
        threads: List[threading.Thread] = [
            threading.Thread(target=self._work_loop, args=(handler,), name=f"{self.name}-{i}", daemon=True)
            for i in range(min(self.concurrency, max(1, len(items))))
        ]
        logger.info(f"Starting {len(threads)} {self.name} workers for {len(items):,} items")

        for thread in threads:
            thread.start()

        try:
            for thread in threads:
                while thread.is_alive():
                    thread.join(timeout=0.5)
        except KeyboardInterrupt:
            logger.warning(f"Interrupted; stopping {self.name} workers")
            self.stop()
            for thread in threads:
                thread.join()
            raise
        finally:
            self.running = False
            self._drain()

        if self._failure is not None:
            raise self._failure

    def stop(self):
        self._stop_event.set()

    def _drain(self):
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                return

    @property
    def stopped(self) -> bool:
        return self._stop_event.is_set()

    def _work_loop(self, handler: Callable[[T], None]):
        while not self._stop_event.is_set():
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                return

            try:
                handler(item)
                with self._lock:
                    self.processed += 1
            except Exception as e:
                logger.error(f"{threading.current_thread().name} failed on {item!r}: {e}")
                with self._lock:
                    if self._failure is None:
                        self._failure = e
                self.stop()
                return
