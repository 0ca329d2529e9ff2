"""Fog tier: cleaning rules, the temporary stream database and the node loop."""

from fogstream.fog.database import (
    EvictBeforeUpload,
    StateError,
    StreamDatabase,
    Table,
    TableState,
    UnknownWindow,
    handle_late,
)
from fogstream.fog.node import (
    AdminAck,
    AdminCommand,
    FogConfig,
    FogNode,
    PipelineInvariantError,
    Task,
    TaskStatus,
    UnknownCommand,
    acquire,
    status_by_task,
)
from fogstream.fog.rules import (
    CleanResult,
    DedupIndex,
    IdCounter,
    TripIndex,
    assign_ids,
    clean,
    is_sorted,
    scan_gaps,
    sort_window,
)

__all__ = [
    "AdminAck",
    "AdminCommand",
    "CleanResult",
    "DedupIndex",
    "EvictBeforeUpload",
    "FogConfig",
    "FogNode",
    "IdCounter",
    "PipelineInvariantError",
    "StateError",
    "StreamDatabase",
    "Table",
    "TableState",
    "Task",
    "TaskStatus",
    "TripIndex",
    "UnknownCommand",
    "UnknownWindow",
    "acquire",
    "assign_ids",
    "clean",
    "handle_late",
    "is_sorted",
    "scan_gaps",
    "sort_window",
    "status_by_task",
]
