# ===== IMPORTS =====
# === Standard library ===
import logging
import threading
from typing import Callable, List, Optional

# === Local ===
from coldrank.exceptions import ModelNotReadyError


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== CLASSES =====
class SnapshotBus:
    """One writer publishes immutable model snapshots, any number of readers take the latest.

    Readers never lock: `current()` returns whatever reference was last
    swapped in, and versions only move forward.
    """

    def __init__(self, initial=None):
        self._snapshot = None
        self._publish_lock = threading.Lock()
        self._published = threading.Condition(self._publish_lock)
        self._subscribers: List[Callable] = []
        self.n_publishes = 0
        if initial is not None:
            self.publish(initial)

    @property
    def version(self) -> Optional[int]:
        snapshot = self._snapshot
        return None if snapshot is None else snapshot.version

    def current(self):
        snapshot = self._snapshot
        if snapshot is None:
            raise ModelNotReadyError('No model snapshot has been published yet')
        return snapshot

    def subscribe(self, callback: Callable):
        self._subscribers.append(callback)

    def publish(self, snapshot):
        with self._published:
            if self._snapshot is not None and snapshot.version <= self._snapshot.version:
                raise ValueError(
                    f'Snapshot version {snapshot.version} does not advance {self._snapshot.version}')
            self._snapshot = snapshot
            self.n_publishes += 1
            self._published.notify_all()
        logger.info('Published model version %d', snapshot.version)
        for callback in self._subscribers:
            callback(snapshot)

    def wait_for_version(self, version, timeout=None):
        with self._published:
            reached = self._published.wait_for(
                lambda: self._snapshot is not None and self._snapshot.version >= version, timeout)
        if not reached:
            raise ModelNotReadyError(f'Version {version} was not published within {timeout} s')
        return self._snapshot
