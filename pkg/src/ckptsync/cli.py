"""Operator CLI: one binary, one subcommand per role or tool.

Subcommands: store, confsvc, primary, backup, kv-client, bench, merge,
inspect, restore-dryrun, kill-primary. Every flag can be overridden by an
environment variable named CKPTSYNC_<FLAG> (dashes become underscores,
e.g. CKPTSYNC_DATA_DIR). Exit codes: 0 success, 1 usage error, 2 runtime
error.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import socket
import sys
from pathlib import Path

from .errors import CkptError

log = logging.getLogger("ckptsync.cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _env_default(flag: str, default=None):
    return os.environ.get("CKPTSYNC_" + flag.upper().replace("-", "_"), default)


def _addr(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {value!r}")
    return host, int(port)


def _add(parser, flag, **kw):
    """add_argument with the CKPTSYNC_* environment override applied."""
    env = _env_default(flag.lstrip("-"))
    if env is not None:
        kw["default"] = kw.get("type", str)(env) if kw.get("type") else env
        kw.pop("required", None)
    parser.add_argument(flag, **kw)


def build_parser() -> _Parser:
    parser = _Parser(prog="ckptsync", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("store", parents=[], help="run the checkpoint blob store")
    _add(p, "--listen", type=_addr, default=("127.0.0.1", 7070))
    _add(p, "--data-dir", required=True)

    p = sub.add_parser("confsvc", help="run the configuration service")
    _add(p, "--listen", type=_addr, default=("127.0.0.1", 7080))
    _add(p, "--heartbeat-interval-ms", type=int, default=100)
    _add(p, "--miss-threshold", type=int, default=3)

    for role in ("primary", "backup"):
        p = sub.add_parser(role, help=f"run a key/value node in the {role} role")
        _add(p, "--node-id", required=True)
        _add(p, "--listen", type=_addr, default=("127.0.0.1", 0))
        _add(p, "--store", type=_addr, required=True)
        _add(p, "--confsvc", type=_addr, required=True)
        _add(p, "--interval-ms", type=int, default=200)
        _add(p, "--mode", choices=("async", "sync"), default="async")
        _add(p, "--heartbeat-interval-ms", type=int, default=100)
        _add(p, "--heap-pages", type=int, default=24576)
        _add(p, "--page-size", type=int, default=4096)
        _add(p, "--stats-file", default=None)
        _add(p, "--pidfile", default=None)
        _add(p, "--dedup", action="store_true", default=False)
        p.add_argument("--record-hashes", action="store_true", default=False)

    p = sub.add_parser("kv-client", help="one-shot key/value operation")
    _add(p, "--confsvc", type=_addr, default=None)
    _add(p, "--addr", type=_addr, default=None)
    p.add_argument("op", choices=("get", "put", "delete"))
    p.add_argument("key")
    p.add_argument("value", nargs="?", default=None)

    p = sub.add_parser("bench", help="workload, overhead, and failover experiments")
    p.add_argument("experiment", choices=("workload", "overhead", "failover"))
    _add(p, "--workload", default="A")
    _add(p, "--ops", type=int, default=100_000)
    _add(p, "--keys", type=int, default=1000)
    _add(p, "--value-size", type=int, default=1000)
    _add(p, "--threads", type=int, default=20)
    _add(p, "--seed", type=int, default=42)
    _add(p, "--addr", type=_addr, default=None)
    _add(p, "--interval-ms", type=int, default=200)
    _add(p, "--runs", type=int, default=5)
    _add(p, "--mode", choices=("async", "sync"), default="async")
    _add(p, "--heap-pages", type=int, default=24576)
    _add(p, "--data-dir", default=None)
    _add(p, "--report", default=None, help="write a tab-separated record file")

    p = sub.add_parser("merge", help="fold stored checkpoints into one full checkpoint")
    _add(p, "--data-dir", default=None)
    _add(p, "--store", type=_addr, default=None)
    p.add_argument("names", nargs="*", help="blob names like ckpt-1 (default: whole chain)")

    p = sub.add_parser("inspect", help="print a core image's metadata")
    _add(p, "--data-dir", default=None)
    p.add_argument("target", help="path to a .core file, or a blob name with --data-dir")

    p = sub.add_parser("restore-dryrun", help="restore into a throwaway heap, print its hash")
    _add(p, "--data-dir", default=None)
    _add(p, "--store", type=_addr, default=None)

    p = sub.add_parser("kill-primary", help="SIGKILL a primary by pidfile or pid")
    _add(p, "--pidfile", default=None)
    _add(p, "--pid", type=int, default=None)

    return parser


# -- role runners --------------------------------------------------------


def _run_store(args) -> int:
    from .storesvc import BlobStoreServer

    server = BlobStoreServer(args.listen, args.data_dir)
    log.info("blob store on %s, data in %s", server.address, args.data_dir)
    server.serve_forever()
    return 0


def _run_confsvc(args) -> int:
    from .confsvc import ConfService

    service = ConfService(
        args.listen,
        heartbeat_interval=args.heartbeat_interval_ms / 1000,
        miss_threshold=args.miss_threshold,
    )
    log.info("configuration service on %s", service.address)
    service.serve_forever()
    return 0


def _manager_config(args):
    from .managers import ManagerConfig

    return ManagerConfig(
        node_id=args.node_id,
        role=args.command,
        listen=args.listen,
        store_addr=args.store,
        confsvc_addr=args.confsvc,
        checkpoint_interval=args.interval_ms / 1000,
        mode=args.mode,
        heartbeat_interval=args.heartbeat_interval_ms / 1000,
        stats_path=args.stats_file,
        record_hashes=args.record_hashes,
    )


def _write_pidfile(args):
    if args.pidfile:
        Path(args.pidfile).write_text(str(os.getpid()))


def _build_kv_app(args):
    from .engine import DescriptorTable
    from .heap import HeapConfig, ManagedHeap
    from .kvapp import LISTENER_DESCRIPTOR_ID, KvServer, KvStore
    from .managers import ManagedApp

    heap = ManagedHeap(
        HeapConfig(
            page_size=args.page_size,
            initial_pages=args.heap_pages,
            max_pages=args.heap_pages * 2,
        )
    )
    kv = KvStore(heap, initial_slots=2048)
    server = KvServer(kv, listen=args.listen, dedup=args.dedup)
    descriptors = DescriptorTable()
    descriptors.register_listener(LISTENER_DESCRIPTOR_ID, server.port)
    return ManagedApp(
        heap=heap, descriptors=descriptors, control_provider=kv.root_record, server=server
    )


def _kv_app_factory(args):
    from .engine import DescriptorTable
    from .kvapp import LISTENER_DESCRIPTOR_ID, KvServer, KvStore
    from .managers import ManagedApp

    def factory(ctx):
        kv = KvStore.from_root(ctx.heap, ctx.control_record)
        listener = ctx.descriptors.get(LISTENER_DESCRIPTOR_ID)
        if isinstance(listener, socket.socket):
            server = KvServer(kv, sock=listener, dedup=args.dedup)
        else:
            server = KvServer(kv, listen=args.listen, dedup=args.dedup)
        descriptors = DescriptorTable()
        descriptors.register_listener(LISTENER_DESCRIPTOR_ID, server.port)
        return ManagedApp(
            heap=ctx.heap,
            descriptors=descriptors,
            control_provider=kv.root_record,
            server=server,
        )

    return factory


def _run_primary(args) -> int:
    from .managers import run_primary

    _write_pidfile(args)
    run_primary(_manager_config(args), _build_kv_app(args))
    return 0


def _run_backup(args) -> int:
    from .managers import run_backup

    _write_pidfile(args)
    run_backup(_manager_config(args), _kv_app_factory(args))
    return 0


def _run_kv_client(args) -> int:
    from .kvapp import KvClient

    if args.confsvc is None and args.addr is None:
        raise CkptError("kv-client needs --confsvc or --addr")
    client = KvClient(confsvc_addr=args.confsvc, direct_addr=args.addr)
    try:
        key = args.key.encode()
        if args.op == "get":
            value = client.get(key)
            if value is None:
                print("(absent)")
                return 0
            sys.stdout.buffer.write(value + b"\n")
        elif args.op == "put":
            if args.value is None:
                raise CkptError("put needs a value")
            status = client.put(key, args.value.encode())
            print(f"status {status}")
        else:
            status = client.delete(key)
            print(f"status {status}")
        return 0
    finally:
        client.close()


# -- tools ----------------------------------------------------------------


def _open_store(args):
    from .storesvc import LocalDirStore, StoreClient

    if getattr(args, "data_dir", None):
        return LocalDirStore(args.data_dir)
    if getattr(args, "store", None):
        return StoreClient(args.store)
    raise CkptError("need --data-dir or --store")


def _run_merge(args) -> int:
    from .imgfmt import Checkpoint, decode_core, write_checkpoint
    from .restore import compact, load_chain

    store = _open_store(args)
    if args.names:
        chain = []
        for name in args.names:
            core = decode_core(store.get(f"{name}.core"))
            mem = store.get(f"{name}.mem")
            chain.append(Checkpoint(core, mem))
    else:
        chain = load_chain(store)
    if not chain:
        raise CkptError("nothing to merge")
    merged = compact(chain)
    cname, mname = write_checkpoint(store, merged.core, merged.mem, prefix="compact")
    print(f"merged {len(chain)} checkpoints -> {cname} ({merged.core.kind}, seq {merged.core.seq})")
    return 0


def _run_inspect(args) -> int:
    from .imgfmt import decode_core

    target = args.target
    if args.data_dir and not os.path.sep in target:
        name = target if target.endswith(".core") else target + ".core"
        core_path = Path(args.data_dir) / name
    else:
        core_path = Path(target)
    data = core_path.read_bytes()
    mem_path = core_path.with_suffix(".mem")
    mem = mem_path.read_bytes() if mem_path.exists() else None
    core = decode_core(data, mem=None)
    crc_state = "unverified"
    if mem is not None:
        from .errors import CrcMismatch

        try:
            decode_core(data, mem)
            crc_state = "ok"
        except CrcMismatch:
            crc_state = "MISMATCH"
    print(f"name: {core_path.name}")
    print(f"seq: {core.seq}")
    print(f"kind: {core.kind}")
    print(f"parent: {core.parent_seq}")
    print(f"page_size: {core.page_size}")
    print(f"heap_pages: {core.heap_pages}")
    print(f"pages: {len(core.page_table)}")
    print(f"descriptors: {len(core.descriptors)}")
    for d in core.descriptors:
        detail = f"port={d.port}" if d.port is not None else (
            f"path={d.path}" if d.path is not None else f"buffered={len(d.buffered)}B"
        )
        print(f"  - id={d.descriptor_id} kind={d.kind} {detail}")
    print(f"control: {len(core.control_record)} bytes")
    print(f"crc: {crc_state} (0x{core.crc:08X})")
    return 0


def _run_restore_dryrun(args) -> int:
    from .restore import compact, load_chain, restore

    store = _open_store(args)
    chain = load_chain(store)
    if not chain:
        raise CkptError("no restorable chain in storage")
    merged = compact(chain)
    ctx = restore(merged, reopen_descriptors=False)
    print(f"restored seq {ctx.seq}: {ctx.heap.page_count} pages mapped, "
          f"{len(ctx.heap.live_pages())} live")
    print(f"live-page hash: {ctx.heap.live_hash()}")
    return 0


def _run_kill_primary(args) -> int:
    pid = args.pid
    if pid is None and args.pidfile:
        pid = int(Path(args.pidfile).read_text().strip())
    if pid is None:
        raise CkptError("need --pid or --pidfile")
    os.kill(pid, signal.SIGKILL)
    print(f"killed {pid}")
    return 0


def _run_bench(args) -> int:
    from . import bench

    spec = bench.WorkloadSpec(
        name=args.workload,
        op_count=args.ops,
        key_count=args.keys,
        value_size=args.value_size,
        worker_threads=args.threads,
        seed=args.seed,
    )
    if args.experiment == "workload":
        if args.addr is not None:
            report = bench.run_workload(spec, args.addr)
        else:
            rig = bench.ServerRig(
                mode=args.mode if args.mode != "async" else "incremental",
                heap_pages=args.heap_pages,
                data_dir=args.data_dir,
            )
            rig.start(args.interval_ms / 1000)
            try:
                report = bench.run_workload(spec, rig.address)
                report.checkpoints = list(rig.stats)
            finally:
                rig.stop()
        print(report.table())
        if args.report:
            report.write_records(args.report)
    elif args.experiment == "overhead":
        report = bench.run_overhead_experiment(
            spec,
            interval=args.interval_ms / 1000,
            runs=args.runs,
            heap_pages=args.heap_pages,
        )
        print(report.table())
    else:
        if not args.data_dir:
            raise CkptError("failover experiment needs --data-dir")
        report = bench.run_failover_experiment(
            args.data_dir,
            mode=args.mode,
            key_count=args.keys,
            value_size=args.value_size,
            interval_ms=args.interval_ms,
            heap_pages=args.heap_pages,
        )
        print(report.table())
    return 0


_RUNNERS = {
    "store": _run_store,
    "confsvc": _run_confsvc,
    "primary": _run_primary,
    "backup": _run_backup,
    "kv-client": _run_kv_client,
    "bench": _run_bench,
    "merge": _run_merge,
    "inspect": _run_inspect,
    "restore-dryrun": _run_restore_dryrun,
    "kill-primary": _run_kill_primary,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("CKPTSYNC_LOG", "INFO"),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return _RUNNERS[args.command](args)
    except KeyboardInterrupt:
        return 0
    except (CkptError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
