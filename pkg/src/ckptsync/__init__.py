"""Checkpoint-based high availability toolkit.

A managed heap tracks dirty and live pages; a checkpoint engine turns them
into incremental image files; services replicate those files and drive
primary/backup failover. See README.md for the tour.
"""

from .heap import HeapConfig, ManagedHeap, ObjectRef

__all__ = ["HeapConfig", "ManagedHeap", "ObjectRef"]
__version__ = "0.1.0"
