"""
Background preparation of training-step inputs.
"""

import logging
import threading
from collections.abc import Callable, Iterable, Iterator
from queue import Empty, Full, Queue
from typing import Generic, TypeVar

logger = logging.getLogger(__name__)

J = TypeVar("J")
T = TypeVar("T")

_DONE = object()


class _Failure:
    def __init__(self, error: BaseException) -> None:
        self.error = error


class PrefetchLoader(Generic[J, T]):
    """
    Thread-backed loader that prepares items ahead of the consumer.

    Features:
    - Bounded queue, so the producer blocks once ``depth`` items are waiting
    - Items arrive in job order (a single producer keeps runs deterministic)
    - Producer errors are re-raised in the consuming thread
    - Graceful shutdown that unblocks and joins the producer

    ``depth=0`` prepares every item synchronously in the consumer.
    """

    def __init__(
        self,
        jobs: Iterable[J],
        prepare: Callable[[J], T],
        depth: int = 2,
    ) -> None:
        """
        Initialize the loader.

        Args:
            jobs: Job descriptors, consumed in order
            prepare: Function turning one job into a ready item
            depth: Maximum number of prepared items waiting in the queue
        """
        if depth < 0:
            raise ValueError(f"depth must be non-negative, got {depth}")
        self._jobs = jobs
        self._prepare = prepare
        self._depth = depth
        self._queue: Queue[object] = Queue(maxsize=max(depth, 1))
        self._lock = threading.RLock()
        self._stop_event = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        """Start the background producer thread."""
        if self._depth == 0:
            return
        with self._lock:
            if self._thread is None or not self._thread.is_alive():
                self._stop_event.clear()
                self._thread = threading.Thread(target=self._produce, name="MPAMatchPrefetch", daemon=True)
                self._thread.start()

    def stop(self) -> None:
        """Stop the producer, discard waiting items and join the thread."""
        with self._lock:
            self._stop_event.set()
        self._drain()
        if self._thread and self._thread.is_alive():
            self._thread.join(timeout=30.0)
            if self._thread.is_alive():
                logger.warning("Prefetch thread did not stop within 30 s")
        self._drain()

    def _drain(self) -> None:
        while True:
            try:
                self._queue.get_nowait()
            except Empty:
                return

    def _put(self, item: object) -> bool:
        """Block until the item is queued; False if the loader was stopped meanwhile."""
        while not self._stop_event.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for job in self._jobs:
                if self._stop_event.is_set():
                    return
                if not self._put(self._prepare(job)):
                    return
        except BaseException as e:  # noqa: BLE001
            self._put(_Failure(e))
            return
        self._put(_DONE)

    def __iter__(self) -> Iterator[T]:
        if self._depth == 0:
            for job in self._jobs:
                yield self._prepare(job)
            return

        self.start()
        try:
            while True:
                item = self._queue.get()
                if item is _DONE:
                    return
                if isinstance(item, _Failure):
                    raise item.error
                yield item  # type: ignore[misc]
        finally:
            self.stop()

    def __enter__(self) -> "PrefetchLoader[J, T]":
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop()
