import queue
import threading
from typing import Iterable, Iterator, Optional

from utils.logger import logger

_DONE = object()


class _Failure:
    def __init__(self, error: BaseException):
        self.error = error


class BatchPrefetcher:
    """
    Prepares batches ahead of the optimizer in a background thread.

    A single producer fills a bounded queue in the order its iterable yields,
    so consumption order (and therefore every result) is the same as iterating
    the producer directly. depth=0 disables the thread.
    """

    def __init__(self, producer: Iterable, depth: int = 2, name: str = "batches"):
        self.producer = producer
        self.depth = depth
        self.name = name
        self._queue: Optional[queue.Queue] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _run(self) -> None:
        try:
            for item in self.producer:
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
            self._queue.put(_DONE)
        except BaseException as e:
            logger.error(f"Batch producer '{self.name}' failed: {e}")
            self._queue.put(_Failure(e))

    def __iter__(self) -> Iterator:
        if self.depth == 0:
            yield from self.producer
            return
        self._queue = queue.Queue(maxsize=self.depth)
        self._thread = threading.Thread(target=self._run, name=f"prefetch-{self.name}", daemon=True)
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is _DONE:
                    return
                if isinstance(item, _Failure):
                    raise item.error
                yield item
        finally:
            self.close()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None and self._thread.is_alive():
            # unblock a producer waiting on a full queue
            while self._queue is not None and not self._queue.empty():
                try:
                    self._queue.get_nowait()
                except queue.Empty:
                    break
            self._thread.join(timeout=5)
        self._thread = None

    def __enter__(self) -> "BatchPrefetcher":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
