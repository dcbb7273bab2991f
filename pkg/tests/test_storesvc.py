import threading

import pytest

from ckptsync.errors import NameInvalid, NotFound
from ckptsync.storesvc import (
    BlobStoreServer,
    LocalDirStore,
    StoreClient,
    parse_blob_name,
)


class TestBlobName:
    def test_parse(self):
        p = parse_blob_name("ckpt-42.core")
        assert (p.prefix, p.seq, p.suffix) == ("ckpt", 42, "core")
        p = parse_blob_name("compact-7.mem")
        assert (p.prefix, p.seq, p.suffix) == ("compact", 7, "mem")

    @pytest.mark.parametrize(
        "bad",
        ["ckpt-42", "ckpt-x.core", "../ckpt-1.core", "snap-1.core", "ckpt-1.core/x", ""],
    )
    def test_rejects(self, bad):
        with pytest.raises(NameInvalid):
            parse_blob_name(bad)


class TestLocalDirStore:
    def test_put_get_roundtrip(self, tmp_path):
        s = LocalDirStore(tmp_path)
        s.put("ckpt-1.core", b"payload")
        assert s.get("ckpt-1.core") == b"payload"

    def test_list_sorted_by_seq(self, tmp_path):
        s = LocalDirStore(tmp_path)
        for seq in (3, 1, 2):
            s.put(f"ckpt-{seq}.core", b"x")
            s.put(f"ckpt-{seq}.mem", b"y")
        assert s.list("ckpt-") == [
            "ckpt-1.core", "ckpt-1.mem",
            "ckpt-2.core", "ckpt-2.mem",
            "ckpt-3.core", "ckpt-3.mem",
        ]
        # numeric, not lexicographic
        s.put("ckpt-10.core", b"z")
        assert s.list("ckpt-")[-1] == "ckpt-10.core"

    def test_get_absent_is_error(self, tmp_path):
        with pytest.raises(NotFound):
            LocalDirStore(tmp_path).get("ckpt-9.core")

    def test_delete(self, tmp_path):
        s = LocalDirStore(tmp_path)
        s.put("ckpt-1.mem", b"x")
        s.delete("ckpt-1.mem")
        with pytest.raises(NotFound):
            s.get("ckpt-1.mem")
        with pytest.raises(NotFound):
            s.delete("ckpt-1.mem")

    def test_durability_across_reopen(self, tmp_path):
        LocalDirStore(tmp_path).put("ckpt-5.core", b"persist")
        assert LocalDirStore(tmp_path).get("ckpt-5.core") == b"persist"

    def test_invalid_names_rejected(self, tmp_path):
        s = LocalDirStore(tmp_path)
        with pytest.raises(NameInvalid):
            s.put("../evil.core", b"x")


class TestStoreService:
    @pytest.fixture
    def server(self, tmp_path):
        srv = BlobStoreServer(("127.0.0.1", 0), tmp_path / "data")
        srv.serve_background()
        yield srv
        srv.shutdown()
        srv.server_close()

    def test_wire_roundtrip(self, server):
        c = StoreClient(server.address)
        c.put("ckpt-1.core", b"alpha" * 1000)
        assert c.get("ckpt-1.core") == b"alpha" * 1000
        assert c.list("ckpt-") == ["ckpt-1.core"]
        c.delete("ckpt-1.core")
        assert c.list("ckpt-") == []
        c.close()

    def test_not_found_over_wire(self, server):
        c = StoreClient(server.address)
        with pytest.raises(NotFound):
            c.get("ckpt-404.mem")
        c.close()

    def test_name_invalid_over_wire(self, server):
        c = StoreClient(server.address)
        with pytest.raises(NameInvalid):
            c.put("bogus name", b"x")
        c.close()

    def test_read_your_writes_single_connection(self, server):
        c = StoreClient(server.address)
        for i in range(1, 30):
            c.put("ckpt-1.core", bytes([i]) * 64)
            assert c.get("ckpt-1.core") == bytes([i]) * 64
        c.close()

    def test_concurrent_same_name_last_writer_wins(self, server):
        a = b"A" * 4096
        b = b"B" * 4096
        done = threading.Barrier(3)

        def writer(payload):
            c = StoreClient(server.address)
            done.wait()
            for _ in range(40):
                c.put("ckpt-2.mem", payload)
            c.close()

        t1 = threading.Thread(target=writer, args=(a,))
        t2 = threading.Thread(target=writer, args=(b,))
        t1.start(); t2.start()
        done.wait()
        t1.join(); t2.join()
        reader = StoreClient(server.address)
        result = reader.get("ckpt-2.mem")
        assert result in (a, b)  # intact payload, never interleaved
        reader.close()

    def test_empty_list_prefix_filters(self, server):
        c = StoreClient(server.address)
        c.put("ckpt-1.core", b"x")
        c.put("compact-1.core", b"y")
        assert c.list("compact-") == ["compact-1.core"]
        assert c.list("") == ["ckpt-1.core", "compact-1.core"]
        c.close()
