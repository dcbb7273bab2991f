#!/usr/bin/env python3
"""Regenerate the golden checkpoint vectors under tests/golden/.

The byte-for-byte output is deterministic: a fixed op sequence on a fixed
heap geometry. Run from the repository root after any intentional format
change, and commit the results.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ckptsync.engine import CheckpointEngine, DescriptorTable
from ckptsync.heap import HeapConfig, ManagedHeap
from ckptsync.imgfmt import write_checkpoint

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    heap = ManagedHeap(HeapConfig(page_size=4096, initial_pages=8, max_pages=32))
    a = heap.alloc(100)
    b = heap.alloc(5000)
    heap.write(a, 0, b"golden-alpha")
    heap.write(b, 4000, b"golden-beta")
    table = DescriptorTable()
    table.register_listener(1, 9001)
    table.register_pipe(2, buffer_provider=lambda: b"queued")
    table.register_file(3, "/tmp/golden.dat")
    engine = CheckpointEngine(
        heap, descriptors=table, control_provider=lambda: b"golden-control"
    )
    core1, mem1, _ = engine.checkpoint_once()
    write_checkpoint(OUT, core1, mem1)
    heap.write(b, 0, b"second-epoch")
    heap.free(a)
    core2, mem2, _ = engine.checkpoint_once()
    write_checkpoint(OUT, core2, mem2)
    for name in ("ckpt-1.core", "ckpt-1.mem", "ckpt-2.core", "ckpt-2.mem"):
        print(f"{name}: {len((OUT / name).read_bytes())} bytes")


if __name__ == "__main__":
    main()
