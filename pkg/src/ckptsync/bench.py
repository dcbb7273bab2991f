"""Workload generator, metrics collection, and experiment drivers.

Three built-in workload shapes drive the key/value server with uniform
random key selection from concurrent worker threads:

    A: 50% updates / 50% gets
    B:  5% updates / 95% gets
    C: 60% updates / 15% gets / 25% deletes (churn-heavy; deletes make
       whole pages die so the second selection pass has work to do)

Experiments come in three flavors: plain workload runs against a server,
an overhead comparison across checkpointing modes on fresh in-process
rigs, and a full-cluster failover run with subprocess nodes and an abrupt
primary kill. Reports print as plain-text tables and can be written as
tab-separated record files (one row per checkpoint or run).
"""

from __future__ import annotations

import logging
import math
import os
import random
import shutil
import signal
import statistics
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .engine import CheckpointEngine, CheckpointStats, DescriptorTable
from .errors import CkptError, ReplicationFailed
from .heap import HeapConfig, ManagedHeap
from .imgfmt import write_checkpoint
from .kvapp import LISTENER_DESCRIPTOR_ID, KvClient, KvServer, KvStore
from .storesvc import LocalDirStore

log = logging.getLogger("ckptsync.bench")

MIXES = {
    "A": (50, 50, 0),
    "B": (5, 95, 0),
    "C": (60, 15, 25),
}

DEFAULT_HEAP_PAGES = 24576  # ~96 MiB of managed pages at the default page size


class BenchAbort(CkptError):
    pass


@dataclass
class WorkloadSpec:
    name: str = "A"
    op_count: int = 100_000
    key_count: int = 1000
    value_size: int = 1000
    mix: tuple[int, int, int] | None = None  # (update %, get %, delete %)
    worker_threads: int = 20
    seed: int = 42

    def __post_init__(self):
        if self.mix is None:
            self.mix = MIXES[self.name]
        if sum(self.mix) != 100:
            raise ValueError(f"mix {self.mix} does not sum to 100")


@dataclass
class RunReport:
    spec: WorkloadSpec
    throughput: float = 0.0
    completed: int = 0
    errors: int = 0
    wall_s: float = 0.0
    p50_ms: float = 0.0
    p99_ms: float = 0.0
    checkpoints: list[CheckpointStats] = field(default_factory=list)
    failover_ms: float | None = None

    def table(self) -> str:
        lines = [
            f"workload {self.spec.name}: {self.completed} ops in {self.wall_s:.2f}s "
            f"-> {self.throughput:.0f} ops/s (errors {self.errors})",
            f"latency p50 {self.p50_ms:.3f} ms  p99 {self.p99_ms:.3f} ms",
        ]
        if self.checkpoints:
            pauses = [c.pause_s * 1000 for c in self.checkpoints]
            sizes = [c.core_bytes + c.mem_bytes for c in self.checkpoints]
            lines.append(
                f"checkpoints {len(self.checkpoints)}: mean pause {statistics.mean(pauses):.2f} ms, "
                f"mean size {statistics.mean(sizes) / 1024:.1f} KiB"
            )
            lines.append("seq\tkind\tinitial\tpass1\tpass2\tbytes\tpause_ms")
            for c in self.checkpoints:
                lines.append(
                    f"{c.seq}\t{c.kind}\t{c.initial}\t{c.pass1}\t{c.pass2}"
                    f"\t{c.core_bytes + c.mem_bytes}\t{c.pause_s * 1000:.2f}"
                )
        if self.failover_ms is not None:
            lines.append(f"failover recovery: {self.failover_ms:.0f} ms")
        return "\n".join(lines)

    def write_records(self, path):
        with open(path, "w") as fh:
            fh.write("# record\tname\tvalue_or_seq\tfields...\n")
            fh.write(
                f"run\t{self.spec.name}\tthroughput={self.throughput:.1f}"
                f"\tcompleted={self.completed}\terrors={self.errors}"
                f"\tp50_ms={self.p50_ms:.3f}\tp99_ms={self.p99_ms:.3f}\n"
            )
            for c in self.checkpoints:
                fh.write(
                    f"ckpt\t{c.seq}\t{c.kind}\tinitial={c.initial}\tpass1={c.pass1}"
                    f"\tpass2={c.pass2}\tbytes={c.core_bytes + c.mem_bytes}"
                    f"\tpause_ms={c.pause_s * 1000:.3f}\n"
                )
            if self.failover_ms is not None:
                fh.write(f"failover\t-\trecovery_ms={self.failover_ms:.1f}\n")


def _key(i: int) -> bytes:
    return b"key-%08d" % i


def _value(rng: random.Random, size: int) -> bytes:
    return rng.randbytes(size)


def load_keys(addr, key_count, value_size, seed=0, client=None) -> dict[bytes, bytes]:
    """Sequentially load the key space; returns the client-side shadow map."""
    own = client is None
    c = client or KvClient(direct_addr=addr)
    rng = random.Random(seed)
    shadow = {}
    for i in range(key_count):
        key, value = _key(i), _value(rng, value_size)
        status = c.put(key, value)
        if status != 0:
            raise BenchAbort(f"load of {key!r} failed with status {status}")
        shadow[key] = value
    if own:
        c.close()
    return shadow


def run_workload(spec: WorkloadSpec, addr, *, skip_load: bool = False) -> RunReport:
    """Drive a server with the spec's op mix; aborts when errors exceed 1%."""
    if not skip_load:
        load_keys(addr, spec.key_count, spec.value_size, seed=spec.seed)
    update_pct, get_pct, delete_pct = spec.mix
    per_worker = spec.op_count // spec.worker_threads
    results = []
    lock = threading.Lock()

    def worker(tid: int):
        rng = random.Random(spec.seed * 7919 + tid)
        client = KvClient(direct_addr=addr)
        lat = []
        done = errs = 0
        for _ in range(per_worker):
            key = _key(rng.randrange(spec.key_count))
            roll = rng.uniform(0, 100)
            t0 = time.perf_counter()
            try:
                if roll < update_pct:
                    status = client.put(key, _value(rng, spec.value_size))
                elif roll < update_pct + get_pct:
                    client.get(key)
                    status = 0
                else:
                    status = client.delete(key)
                if status not in (0, 1):
                    errs += 1
            except CkptError:
                errs += 1
            lat.append(time.perf_counter() - t0)
            done += 1
        client.close()
        with lock:
            results.append((done, errs, lat))

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(spec.worker_threads)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    completed = sum(r[0] for r in results)
    errors = sum(r[1] for r in results)
    latencies = sorted(x for r in results for x in r[2])
    if errors > 0.01 * completed:
        raise BenchAbort(f"error rate {errors}/{completed} exceeds 1%")
    report = RunReport(
        spec=spec,
        throughput=completed / wall if wall else 0.0,
        completed=completed,
        errors=errors,
        wall_s=wall,
        p50_ms=1000 * latencies[len(latencies) // 2] if latencies else 0.0,
        p99_ms=1000 * latencies[int(len(latencies) * 0.99)] if latencies else 0.0,
    )
    return report


class ServerRig:
    """In-process KV server plus an optional checkpoint pipeline.

    Modes: "off" (no checkpoints), "incremental" (periodic two-pass dumps),
    "full_dump" (periodic full dumps of all live pages), "sync" (a stored
    checkpoint per mutation before each reply).
    """

    def __init__(
        self,
        mode: str = "off",
        interval: float = 0.2,
        data_dir=None,
        heap_pages: int = DEFAULT_HEAP_PAGES,
        record_hashes: bool = False,
        store=None,
    ):
        self.mode = mode
        self.heap = ManagedHeap(
            HeapConfig(initial_pages=heap_pages, max_pages=max(heap_pages * 2, heap_pages + 64))
        )
        self.kv = KvStore(self.heap, initial_slots=2048)
        self.server = KvServer(self.kv, listen=("127.0.0.1", 0))
        self.descriptors = DescriptorTable()
        self.descriptors.register_listener(LISTENER_DESCRIPTOR_ID, self.server.port)
        self._own_dir = data_dir is None and mode != "off"
        if self._own_dir:
            data_dir = tempfile.mkdtemp(prefix="ckptsync-rig-")
        self.data_dir = data_dir
        self.store = store if store is not None else (
            LocalDirStore(data_dir) if mode != "off" else None
        )
        self.engine = None
        self._periodic = None
        self._upload_lock = threading.Lock()
        if mode != "off":
            self.engine = CheckpointEngine(
                self.heap,
                self.descriptors,
                self.kv.root_record,
                record_hashes=record_hashes,
                always_full=(mode == "full_dump"),
            )
        if mode == "sync":
            self.server.exposer = self._sync_expose

    @property
    def address(self):
        return self.server.address

    def start(self, interval: float = 0.2):
        self.server.start()
        if self.mode in ("incremental", "full_dump"):
            self._periodic = self.engine.run_periodic(interval, self._upload)

    def _upload(self, core, mem, selection):
        write_checkpoint(self.store, core, mem)

    def _sync_expose(self):
        with self._upload_lock:
            core, mem, _ = self.engine.checkpoint_once()
            try:
                write_checkpoint(self.store, core, mem)
            except OSError as exc:
                raise ReplicationFailed(str(exc)) from exc

    def stop(self):
        if self._periodic:
            self._periodic.stop()
            self._periodic = None
        self.server.stop()
        if self._own_dir:
            shutil.rmtree(self.data_dir, ignore_errors=True)

    @property
    def stats(self) -> list[CheckpointStats]:
        return self.engine.stats if self.engine else []


def _fresh_rig(mode: str, interval: float, heap_pages: int) -> ServerRig:
    rig = ServerRig(mode=mode, heap_pages=heap_pages)
    rig.start(interval)
    return rig


@dataclass
class OverheadReport:
    interval: float
    runs: dict[str, list[float]]  # mode -> throughput per run

    def mean(self, mode: str) -> float:
        return statistics.mean(self.runs[mode])

    def overhead_pct(self, mode: str) -> float:
        base = self.mean("off")
        return 100.0 * (base - self.mean(mode)) / base if base else 0.0

    def sign_wins(self, faster: str, slower: str) -> tuple[int, int, float]:
        """Paired per-round comparison; one-sided binomial p-value."""
        a, b = self.runs[faster], self.runs[slower]
        n = min(len(a), len(b))
        wins = sum(1 for i in range(n) if a[i] > b[i])
        p = sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n
        return wins, n, p

    def table(self) -> str:
        lines = [f"mode\truns\tmean ops/s\toverhead vs off"]
        for mode, tps in self.runs.items():
            lines.append(
                f"{mode}\t{len(tps)}\t{statistics.mean(tps):.0f}\t{self.overhead_pct(mode):.1f}%"
            )
        return "\n".join(lines)


def run_overhead_experiment(
    spec: WorkloadSpec,
    interval: float = 0.2,
    modes=("off", "incremental", "full_dump", "sync"),
    runs: int = 5,
    heap_pages: int = 4096,
    sync_op_count: int | None = None,
) -> OverheadReport:
    """Compare throughput across checkpointing modes, a fresh server per run.

    Rounds interleave the modes so machine drift hits them all equally;
    sign tests pair runs by round. Sync mode may use a smaller op count
    (throughput is a rate; its steady state does not need the full run).
    """
    out: dict[str, list[float]] = {m: [] for m in modes}
    for round_no in range(runs):
        for mode in modes:
            run_spec = WorkloadSpec(
                name=spec.name,
                op_count=(sync_op_count or spec.op_count) if mode == "sync" else spec.op_count,
                key_count=spec.key_count,
                value_size=spec.value_size,
                mix=spec.mix,
                worker_threads=spec.worker_threads,
                seed=spec.seed + round_no,
            )
            rig = _fresh_rig(mode, interval, heap_pages)
            try:
                report = run_workload(run_spec, rig.address)
                out[mode].append(report.throughput)
                log.info(
                    "round %d mode %-11s %.0f ops/s", round_no, mode, report.throughput
                )
            finally:
                rig.stop()
    return OverheadReport(interval=interval, runs=out)


# -- full-cluster failover experiment ------------------------------------


def _free_port() -> int:
    import socket as _socket

    s = _socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def _spawn(args, **kw):
    return subprocess.Popen(
        [sys.executable, "-m", "ckptsync.cli", *args],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.STDOUT,
        **kw,
    )


def _wait_tcp(port: int, timeout: float = 10.0):
    import socket as _socket

    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            _socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.05)
    raise BenchAbort(f"service on port {port} never came up")


@dataclass
class FailoverReport:
    recovery_ms: float
    detection_budget: tuple[float, float]
    keys_verified: int
    restored_hash: str | None
    hash_in_recorded_set: bool | None
    components_ms: dict[str, float]

    def table(self) -> str:
        lines = [
            f"recovery (kill -> all keys readable): {self.recovery_ms:.0f} ms",
            f"keys verified: {self.keys_verified}",
        ]
        if self.components_ms:
            parts = "  ".join(f"{k}={v:.0f}ms" for k, v in self.components_ms.items())
            lines.append(f"backup components: {parts}")
        if self.hash_in_recorded_set is not None:
            lines.append(
                "restored state hash in recorded checkpoint set: "
                + ("yes" if self.hash_in_recorded_set else "NO")
            )
        return "\n".join(lines)


def run_failover_experiment(
    workdir,
    mode: str = "async",
    key_count: int = 1000,
    value_size: int = 1000,
    heartbeat_ms: int = 100,
    miss_threshold: int = 3,
    interval_ms: int = 200,
    heap_pages: int = DEFAULT_HEAP_PAGES,
    settle_s: float = 0.6,
) -> FailoverReport:
    """Load the store, SIGKILL the primary, time recovery on the backup.

    Verifies every key against the client-side shadow map; in async mode
    additionally checks that the restored live-page hash is one the primary
    recorded at a checkpoint boundary.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    store_port, conf_port, kv_port, kv_port_b = (_free_port() for _ in range(4))
    primary_stats = workdir / "primary-stats.tsv"
    backup_stats = workdir / "backup-stats.tsv"
    procs = []
    try:
        procs.append(_spawn(["store", "--listen", f"127.0.0.1:{store_port}",
                             "--data-dir", str(workdir / "blobs")]))
        procs.append(_spawn(["confsvc", "--listen", f"127.0.0.1:{conf_port}",
                             "--heartbeat-interval-ms", str(heartbeat_ms),
                             "--miss-threshold", str(miss_threshold)]))
        _wait_tcp(store_port)
        _wait_tcp(conf_port)
        primary = _spawn([
            "primary", "--node-id", "P", "--listen", f"127.0.0.1:{kv_port}",
            "--store", f"127.0.0.1:{store_port}", "--confsvc", f"127.0.0.1:{conf_port}",
            "--interval-ms", str(interval_ms), "--mode", mode,
            "--heartbeat-interval-ms", str(heartbeat_ms),
            "--heap-pages", str(heap_pages),
            "--stats-file", str(primary_stats), "--record-hashes",
        ])
        procs.append(primary)
        backup = _spawn([
            "backup", "--node-id", "B", "--listen", f"127.0.0.1:{kv_port_b}",
            "--store", f"127.0.0.1:{store_port}", "--confsvc", f"127.0.0.1:{conf_port}",
            "--interval-ms", str(interval_ms), "--mode", mode,
            "--heartbeat-interval-ms", str(heartbeat_ms),
            "--heap-pages", str(heap_pages),
            "--stats-file", str(backup_stats),
        ])
        procs.append(backup)
        _wait_tcp(kv_port)

        shadow = load_keys(("127.0.0.1", kv_port), key_count, value_size, seed=7)
        time.sleep(settle_s)  # let a periodic checkpoint cover the whole load

        t_kill = time.monotonic()
        primary.send_signal(signal.SIGKILL)
        primary.wait()

        client = KvClient(confsvc_addr=("127.0.0.1", conf_port), deadline=30.0)
        verified = 0
        keys = sorted(shadow)
        # first successful full read of every key marks recovery
        while True:
            try:
                verified = 0
                for key in keys:
                    value = client.get(key)
                    if value is None:
                        raise BenchAbort(f"key {key!r} missing after failover")
                    if value != shadow[key]:
                        raise BenchAbort(f"key {key!r} diverged after failover")
                    verified += 1
                break
            except CkptError:
                if time.monotonic() - t_kill > 30:
                    raise BenchAbort("backup never served the full key set")
                time.sleep(0.05)
        recovery_ms = 1000 * (time.monotonic() - t_kill)
        client.close()

        restored_hash, components = _parse_backup_stats(backup_stats)
        hash_ok = None
        if mode == "async" and restored_hash:
            recorded = _parse_recorded_hashes(primary_stats)
            hash_ok = restored_hash in recorded
        return FailoverReport(
            recovery_ms=recovery_ms,
            detection_budget=(heartbeat_ms * miss_threshold / 1000,
                              heartbeat_ms * (miss_threshold + 1) / 1000),
            keys_verified=verified,
            restored_hash=restored_hash,
            hash_in_recorded_set=hash_ok,
            components_ms=components,
        )
    finally:
        for p in procs:
            if p.poll() is None:
                p.send_signal(signal.SIGKILL)
        for p in procs:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass


def _parse_backup_stats(path) -> tuple[str | None, dict[str, float]]:
    restored_hash, components = None, {}
    try:
        for line in Path(path).read_text().splitlines():
            if line.startswith("recover"):
                for part in line.split("\t")[1:]:
                    key, _, value = part.partition("=")
                    if key == "restored_hash":
                        restored_hash = value
                    elif key.endswith("_ms"):
                        components[key[:-3]] = float(value)
    except FileNotFoundError:
        pass
    return restored_hash, components


def _parse_recorded_hashes(path) -> set[str]:
    out = set()
    try:
        for line in Path(path).read_text().splitlines():
            if line.startswith("ckpt\t"):
                parts = line.split("\t")
                if parts[-1] not in ("-", ""):
                    out.add(parts[-1])
    except FileNotFoundError:
        pass
    return out
