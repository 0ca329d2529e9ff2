"""Temporary table store of the fog node.

Tables move Retained -> Uploaded -> Evicted and never back.  A table can be
leveraged (read out for upload) once while Retained; Uploaded tables are
evicted once ``retention_ttl`` seconds have passed since their upload.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

from fogstream.fog.rules import sort_window
from fogstream.model import CanonicalTuple

DEFAULT_RETENTION = 24 * 3600


class TableState(str, enum.Enum):
    RETAINED = "Retained"
    UPLOADED = "Uploaded"
    EVICTED = "Evicted"


class StateError(Exception):
    pass


class UnknownWindow(StateError, KeyError):
    pass


class EvictBeforeUpload(StateError):
    pass


@dataclass
class Table:
    window_id: int
    tuples: list[CanonicalTuple]
    state: TableState = TableState.RETAINED
    leveraged: bool = False
    uploaded_at: Optional[float] = None
    size: int = field(init=False)

    def __post_init__(self) -> None:
        self.size = len(self.tuples)


class StreamDatabase:
    def __init__(self, retention_ttl: float = DEFAULT_RETENTION, period: int = 300):
        if retention_ttl < 0:
            raise ValueError("retention_ttl must be non-negative")
        self.retention_ttl = retention_ttl
        self.period = period
        self.tables: dict[int, Table] = {}
        self._evicted: set[int] = set()
        # Highest window id that has left the Retained state.
        self.watermark: Optional[int] = None

    def window_of(self, ts: int) -> int:
        return ts - ts % self.period

    def state(self, window_id: int) -> TableState:
        if window_id in self._evicted:
            return TableState.EVICTED
        try:
            return self.tables[window_id].state
        except KeyError:
            raise UnknownWindow(window_id) from None

    def _get(self, window_id: int) -> Table:
        try:
            return self.tables[window_id]
        except KeyError:
            if window_id in self._evicted:
                raise StateError(f"window {window_id} was evicted") from None
            raise UnknownWindow(window_id) from None

    def store_table(self, window_id: int, ts: Iterable[CanonicalTuple]) -> Table:
        if window_id in self.tables or window_id in self._evicted:
            raise StateError(f"window {window_id} already has a table")
        table = Table(window_id, sort_window(ts))
        self.tables[window_id] = table
        return table

    def leverage(self, window_id: int) -> list[CanonicalTuple]:
        """The table's sorted tuples, handed out once per upload cycle."""
        table = self._get(window_id)
        if table.state is not TableState.RETAINED or table.leveraged:
            raise StateError(f"window {window_id} was already leveraged")
        table.leveraged = True
        return list(table.tuples)

    def mark_uploaded(self, window_id: int, now: float) -> None:
        table = self._get(window_id)
        if table.state is not TableState.RETAINED or not table.leveraged:
            raise StateError(f"window {window_id} must be leveraged before upload")
        table.state = TableState.UPLOADED
        table.uploaded_at = now
        if self.watermark is None or window_id > self.watermark:
            self.watermark = window_id

    def evict(self, window_id: int) -> None:
        table = self._get(window_id)
        if table.state is TableState.RETAINED:
            raise EvictBeforeUpload(f"window {window_id} has not been uploaded")
        del self.tables[window_id]
        self._evicted.add(window_id)

    def evict_expired(self, now: float) -> list[int]:
        gone = [
            w
            for w, t in self.tables.items()
            if t.state is TableState.UPLOADED
            and t.uploaded_at is not None
            and now - t.uploaded_at >= self.retention_ttl
        ]
        for w in gone:
            self.evict(w)
        return gone

    def is_late(self, ts: int) -> bool:
        """True when ``ts`` belongs to a window that has already been shipped."""
        return self.watermark is not None and self.window_of(ts) <= self.watermark

    @property
    def retained(self) -> list[int]:
        return [w for w, t in self.tables.items() if t.state is TableState.RETAINED]


def handle_late(t: CanonicalTuple, db: StreamDatabase) -> CanonicalTuple:
    """Flag a tuple whose window was already uploaded or evicted.

    The caller keeps it in the currently open table, so it rides along with
    the next upload instead of being dropped.
    """
    if db.is_late(t.key.timestamp):
        return t._replace(late=True)
    return t
