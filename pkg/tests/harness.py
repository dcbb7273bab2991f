"""In-process single-node rig for crash-point and recovery protocol tests.

Runs the real heap / table / engine / store / restore code but drives
operations sequentially and models the crash as simply not uploading (or
not acknowledging) a suffix of the work. Uploads complete in sequence
order, exactly like the manager's replication queue, so a crash always
leaves a prefix of the chain in storage.
"""

from __future__ import annotations

from ckptsync.engine import CheckpointEngine
from ckptsync.heap import HeapConfig, ManagedHeap
from ckptsync.imgfmt import write_checkpoint
from ckptsync.kvapp import KvStore
from ckptsync.restore import compact, load_chain, restore
from ckptsync.storesvc import LocalDirStore


class SimNode:
    def __init__(self, data_dir, page_size=512, pages=32, max_pages=1024):
        self.heap = ManagedHeap(
            HeapConfig(page_size=page_size, initial_pages=pages, max_pages=max_pages)
        )
        self.kv = KvStore(self.heap, initial_slots=16)
        self.engine = CheckpointEngine(
            self.heap, control_provider=self.kv.root_record, record_hashes=True
        )
        self.store = LocalDirStore(data_dir)
        self.pending = []  # finished checkpoints not yet uploaded, in seq order
        self.boundaries = []  # (seq, live_hash, state dict) per checkpoint

    def state(self) -> dict:
        return dict(self.kv.items())

    def checkpoint(self):
        core, mem, _ = self.engine.checkpoint_once()
        self.boundaries.append(
            (core.seq, self.engine.stats[-1].live_hash, self.state())
        )
        self.pending.append((core, mem))
        return core

    def upload(self, count: int | None = None):
        """Upload the oldest `count` pending checkpoints (all when None)."""
        n = len(self.pending) if count is None else min(count, len(self.pending))
        for core, mem in self.pending[:n]:
            write_checkpoint(self.store, core, mem)
        del self.pending[:n]

    def checkpoint_and_upload(self):
        core = self.checkpoint()
        self.upload()
        return core


def recover_state(data_dir):
    """Restore from whatever reached storage; (state dict, live hash, seq)."""
    chain = load_chain(LocalDirStore(data_dir))
    if not chain:
        return {}, None, 0
    ctx = restore(compact(chain), reopen_descriptors=False)
    revived = KvStore.from_root(ctx.heap, ctx.control_record)
    return dict(revived.items()), ctx.heap.live_hash(), ctx.seq


def random_mutation(rng, keyspace=24, max_value=64):
    key = f"k{rng.randrange(keyspace)}".encode()
    if rng.random() < 0.75:
        return ("put", key, rng.randbytes(rng.randrange(1, max_value)))
    return ("delete", key, None)


def apply_mutation(kv, op):
    kind, key, value = op
    if kind == "put":
        kv.put(key, value)
    else:
        kv.delete(key)


def apply_to_dict(state, op):
    kind, key, value = op
    if kind == "put":
        state[key] = value
    else:
        state.pop(key, None)


def run_sync_trial(rng, data_dir):
    """One synchronous-mode run with a random crash point.

    Returns (acked count, applied state snapshots, restored state). Every
    acknowledged mutation was stored before its ack, so the restored state
    must equal some applied prefix at or past the acked count.
    """
    node = SimNode(data_dir)
    states = [node.state()]
    acked = 0
    nops = rng.randrange(1, 18)
    crash_stage = rng.choice(["between", "after_apply", "after_store"])
    for i in range(nops):
        op = random_mutation(rng)
        apply_mutation(node.kv, op)
        states.append(node.state())
        last = i == nops - 1
        if last and crash_stage == "after_apply":
            break  # crashed before the expose checkpoint: op applied, never acked
        node.checkpoint_and_upload()
        if last and crash_stage == "after_store":
            break  # stored but the ack never left: still only "possibly applied"
        acked += 1
    restored, _, _ = recover_state(data_dir)
    return acked, states, restored


def run_async_trial(rng, data_dir, ckpt_every=None):
    """One asynchronous-mode run: crash loses a random suffix of uploads.

    Returns (recorded boundaries, restored state, restored hash).
    """
    node = SimNode(data_dir)
    k = ckpt_every or rng.randrange(1, 6)
    nops = rng.randrange(k, 10 * k)
    for i in range(nops):
        apply_mutation(node.kv, random_mutation(rng))
        if (i + 1) % k == 0:
            node.checkpoint()
            if rng.random() < 0.6:
                node.upload(rng.randrange(0, len(node.pending) + 1))
    # crash: in-flight uploads die with the process
    restored, live_hash, seq = recover_state(data_dir)
    return node.boundaries, restored, live_hash, seq
