"""Primary and backup managers.

The primary manager drives the checkpoint cadence, replicates finished
images to the blob store in the background (async mode) or inline at
expose points (sync mode), and heartbeats the configuration service. The
backup manager polls the configuration service; when named in a failover
decision it fetches the chain, compacts, restores, reports in, and then
runs as a primary with the sequence continuing where the chain ended.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field

from .confsvc import ConfClient
from .engine import CheckpointEngine, CheckpointStats, DescriptorTable
from .errors import (
    DuplicateNode,
    ManagerFatal,
    NotFound,
    ReplicationFailed,
    StorageError,
    WireError,
)
from .heap import ManagedHeap
from .imgfmt import write_checkpoint
from .restore import compact, load_chain, restore
from .storesvc import StoreClient, parse_blob_name

log = logging.getLogger("ckptsync.managers")

MODE_ASYNC = "async"
MODE_SYNC = "sync"

STATS_HEADER = (
    "# record\tseq\tkind\tinitial\tpass1\tpass2\tpages\tcore_bytes\tmem_bytes"
    "\tpause_ms\tlive_hash"
)


@dataclass
class ManagerConfig:
    node_id: str
    role: str = "primary"
    listen: tuple[str, int] = ("127.0.0.1", 0)
    store_addr: tuple[str, int] | None = None
    confsvc_addr: tuple[str, int] | None = None
    checkpoint_interval: float = 0.2
    mode: str = MODE_ASYNC
    heartbeat_interval: float = 0.1
    poll_interval: float = 0.05
    advertise_host: str = "127.0.0.1"
    stats_path: str | None = None
    record_hashes: bool = False
    upload_queue: int = 4
    retry_attempts: int = 3
    retry_base_delay: float = 0.05

    def __post_init__(self):
        if self.checkpoint_interval <= 0:
            raise ValueError("checkpoint interval must be positive")
        if self.mode not in (MODE_ASYNC, MODE_SYNC):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class ManagedApp:
    """The application surface a manager drives."""

    heap: ManagedHeap
    descriptors: DescriptorTable
    control_provider: object  # callable -> bytes
    server: object  # start/stop/set_primary/port/address, assignable .exposer


class _StatsWriter:
    def __init__(self, path: str | None):
        self._lock = threading.Lock()
        self._fh = None
        if path:
            self._fh = open(path, "a", buffering=1)
            self._fh.write(STATS_HEADER + "\n")

    def checkpoint(self, s: CheckpointStats):
        if not self._fh:
            return
        with self._lock:
            self._fh.write(
                f"ckpt\t{s.seq}\t{s.kind}\t{s.initial}\t{s.pass1}\t{s.pass2}"
                f"\t{s.pages_dumped}\t{s.core_bytes}\t{s.mem_bytes}"
                f"\t{s.pause_s * 1000:.3f}\t{s.live_hash or '-'}\n"
            )

    def line(self, text: str):
        if not self._fh:
            return
        with self._lock:
            self._fh.write(text + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


class PrimaryManager:
    """Runs one node in the primary role."""

    def __init__(
        self,
        cfg: ManagerConfig,
        app: ManagedApp,
        *,
        start_seq: int = 0,
        register: bool = True,
        stats: _StatsWriter | None = None,
    ):
        self.cfg = cfg
        self.app = app
        self._stats = stats or _StatsWriter(cfg.stats_path)
        self.engine = CheckpointEngine(
            app.heap,
            app.descriptors,
            app.control_provider,
            start_seq=start_seq,
            record_hashes=cfg.record_hashes,
            on_stats=self._stats.checkpoint,
        )
        self._register = register
        self._store = StoreClient(cfg.store_addr) if cfg.store_addr else None
        self._conf = ConfClient(cfg.confsvc_addr) if cfg.confsvc_addr else None
        self._queue: queue.Queue = queue.Queue(maxsize=cfg.upload_queue)
        self._latest_replicated = start_seq
        self._fatal = threading.Event()
        self._stop = threading.Event()
        self._deposed = threading.Event()
        self._threads: list[threading.Thread] = []
        self._periodic = None
        self._expose_lock = threading.Lock()

    # -- lifecycle -------------------------------------------------------

    def start(self):
        addr = f"{self.cfg.advertise_host}:{self.app.server.port}"
        if self._register and self._conf:
            self._register_with_retry(addr)
        self.app.server.set_primary(True)
        self.app.server.start()
        if self._conf:
            self._spawn(self._heartbeat_loop, "heartbeats")
        if self.cfg.mode == MODE_SYNC:
            self.app.server.exposer = self.sync_expose
        else:
            self._spawn(self._upload_loop, "uploader")
            self._periodic = self.engine.run_periodic(
                self.cfg.checkpoint_interval, self._enqueue
            )
        log.info("primary %s serving on %s (%s mode)", self.cfg.node_id, addr, self.cfg.mode)

    def wait(self):
        """Block until a fatal error or stop(); raises on fatal."""
        while not self._stop.wait(0.2):
            if self._fatal.is_set():
                raise ManagerFatal("primary manager hit a fatal error; see logs")

    def stop(self):
        self._stop.set()
        if self._periodic:
            self._periodic.stop()
            self._periodic = None
        self.app.server.stop()
        for t in self._threads:
            t.join(timeout=2)
        if self._store:
            self._store.close()
        if self._conf:
            self._conf.close()
        self._stats.close()

    def _spawn(self, fn, name):
        t = threading.Thread(target=fn, name=name, daemon=True)
        t.start()
        self._threads.append(t)

    def _register_with_retry(self, addr: str):
        deadline = time.monotonic() + 10.0
        while True:
            try:
                self._conf.register(self.cfg.node_id, "primary", addr)
                return
            except DuplicateNode:
                raise
            except WireError:
                if time.monotonic() > deadline:
                    raise ManagerFatal("configuration service unreachable")
                time.sleep(0.1)

    # -- replication -------------------------------------------------------

    def _enqueue(self, core, mem, selection):
        # blocks when the queue is full: cadence slows, mutators never wait
        self._queue.put((core, mem))

    def _upload_loop(self):
        while not self._stop.is_set():
            try:
                core, mem = self._queue.get(timeout=0.1)
            except queue.Empty:
                continue
            if not self._replicate(core, mem):
                log.error("replication of seq %d failed beyond retry budget", core.seq)
                self._fatal.set()
                if self._periodic:
                    self._periodic.stop()
                    self._periodic = None
                return

    def _replicate(self, core, mem) -> bool:
        delay = self.cfg.retry_base_delay
        for attempt in range(self.cfg.retry_attempts):
            try:
                write_checkpoint(self._store, core, mem)
                self._latest_replicated = core.seq
                return True
            except (StorageError, OSError) as exc:
                log.warning("upload of seq %d attempt %d failed: %s", core.seq, attempt + 1, exc)
                time.sleep(delay)
                delay *= 2
        return False

    def sync_expose(self):
        """Checkpoint at a client-visible state boundary and wait for storage.

        No-op outside sync mode. Raises ReplicationFailed when storage does
        not acknowledge; the caller must not send its success reply.
        """
        if self.cfg.mode != MODE_SYNC:
            return
        with self._expose_lock:
            core, mem, _ = self.engine.checkpoint_once()
            if not self._replicate(core, mem):
                raise ReplicationFailed(f"checkpoint {core.seq} not acknowledged by storage")

    # -- heartbeats ----------------------------------------------------------

    def _heartbeat_loop(self):
        hb_seq = 0
        while not self._stop.wait(self.cfg.heartbeat_interval):
            hb_seq += 1
            try:
                still_primary, view = self._conf.heartbeat(
                    self.cfg.node_id, hb_seq, self._latest_replicated
                )
            except WireError as exc:
                log.warning("heartbeat failed: %s", exc)
                continue
            if not still_primary and not self._deposed.is_set():
                self._deposed.set()
                log.warning("deposed at view %d; refusing new writes", view)
                self.app.server.set_primary(False, view)
                if self._periodic:
                    self._periodic.stop()
                    self._periodic = None
            elif still_primary:
                self.app.server.set_primary(True, view)


class BackupManager:
    """Polls the configuration service and takes over when chosen."""

    def __init__(self, cfg: ManagerConfig, app_factory):
        """`app_factory(resume_ctx) -> ManagedApp` builds the restored application."""
        self.cfg = cfg
        self.app_factory = app_factory
        self._conf = ConfClient(cfg.confsvc_addr)
        self._store = StoreClient(cfg.store_addr)
        self._stats = _StatsWriter(cfg.stats_path)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.promoted: PrimaryManager | None = None

    def start(self):
        deadline = time.monotonic() + 10.0
        while True:
            try:
                self._conf.register(self.cfg.node_id, "backup", f"{self.cfg.advertise_host}:0")
                break
            except WireError:
                if time.monotonic() > deadline:
                    raise ManagerFatal("configuration service unreachable")
                time.sleep(0.1)
        self._spawn(self._heartbeat_loop, "hb-backup")
        self._spawn(self._poll_loop, "poller")
        log.info("backup %s standing by", self.cfg.node_id)

    def wait(self):
        while not self._stop.wait(0.2):
            if self.promoted is not None:
                self.promoted.wait()
                return

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
        if self.promoted:
            self.promoted.stop()
        self._conf.close()
        self._store.close()
        self._stats.close()

    def _spawn(self, fn, name):
        t = threading.Thread(target=fn, name=name, daemon=True)
        t.start()
        self._threads.append(t)

    def _heartbeat_loop(self):
        hb_seq = 0
        while not self._stop.wait(self.cfg.heartbeat_interval):
            if self.promoted is not None:
                return  # the promoted manager heartbeats from here on
            hb_seq += 1
            try:
                self._conf.heartbeat(self.cfg.node_id, hb_seq, 0)
            except WireError:
                continue

    def _poll_loop(self):
        while not self._stop.wait(self.cfg.poll_interval):
            if self.promoted is not None:
                return
            try:
                healthy, snap = self._conf.who_is_primary()
            except WireError:
                continue
            if not healthy and snap.chosen_id == self.cfg.node_id:
                try:
                    self._recover()
                except Exception:
                    log.exception("recovery failed; will keep polling")
            elif healthy and snap.compact_pending:
                try:
                    self._compact_storage()
                    self._conf.trigger_compact(done=True)
                except Exception:
                    log.exception("storage compaction failed")

    # -- promotion ------------------------------------------------------------

    def _recover(self):
        log.warning("chosen for promotion; fetching checkpoint chain")
        t0 = time.perf_counter()
        chain = load_chain(self._store)
        t_fetch = time.perf_counter()
        if not chain:
            log.error("no checkpoints in storage; cannot restore")
            raise ManagerFatal("empty checkpoint chain")
        merged = compact(chain)
        t_merge = time.perf_counter()
        built: list[ManagedApp] = []

        def resume(ctx):
            built.append(self.app_factory(ctx))

        restore(merged, app_resume=resume)
        app = built[0]
        t_restore = time.perf_counter()
        app.server.set_primary(True)
        app.server.start()
        addr = f"{self.cfg.advertise_host}:{app.server.port}"
        snap = self._conf.complete_failover(self.cfg.node_id, addr)
        app.server.set_primary(True, snap.view_number)
        t_redirect = time.perf_counter()
        self._stats.line(
            "recover"
            f"\tfetch_ms={1000 * (t_fetch - t0):.1f}"
            f"\tmerge_ms={1000 * (t_merge - t_fetch):.1f}"
            f"\trestore_ms={1000 * (t_restore - t_merge):.1f}"
            f"\tredirect_ms={1000 * (t_redirect - t_restore):.1f}"
            f"\ttotal_ms={1000 * (t_redirect - t0):.1f}"
            f"\trestored_seq={merged.core.seq}"
            f"\trestored_hash={app.heap.live_hash()}"
        )
        promoted_cfg = self.cfg
        self.promoted = PrimaryManager(
            promoted_cfg,
            app,
            start_seq=merged.core.seq,
            register=False,  # complete_failover already flipped the view
            stats=self._stats,
        )
        self.promoted.start()
        log.warning(
            "promotion complete at view %d; serving on %s, next seq %d",
            snap.view_number, addr, merged.core.seq + 1,
        )

    def _compact_storage(self):
        chain = load_chain(self._store)
        if len(chain) <= 1:
            return
        merged = compact(chain)
        write_checkpoint(self._store, merged.core, merged.mem, prefix="compact")
        for name in self._store.list(""):
            parsed = parse_blob_name(name)
            stale_ckpt = parsed.prefix == "ckpt" and parsed.seq <= merged.core.seq
            stale_compact = parsed.prefix == "compact" and parsed.seq < merged.core.seq
            if stale_ckpt or stale_compact:
                try:
                    self._store.delete(name)
                except NotFound:
                    pass
        log.info("compacted chain through seq %d", merged.core.seq)


def run_primary(cfg: ManagerConfig, app: ManagedApp):
    """Run the primary role until killed; raises ManagerFatal on unrecoverable errors."""
    mgr = PrimaryManager(cfg, app)
    mgr.start()
    try:
        mgr.wait()
    finally:
        mgr.stop()


def run_backup(cfg: ManagerConfig, app_factory):
    """Run the backup role; on promotion, continues as primary until killed."""
    mgr = BackupManager(cfg, app_factory)
    mgr.start()
    try:
        mgr.wait()
    finally:
        mgr.stop()
