import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckptsync import imgfmt
from ckptsync.errors import (
    BadMagic,
    CrcMismatch,
    StorageError,
    Truncated,
    UnsupportedVersion,
)
from ckptsync.imgfmt import (
    CoreImage,
    DescriptorRecord,
    PageTableEntry,
    decode_core,
    encode_core,
    read_checkpoint,
    seal,
    write_checkpoint,
)


def make_checkpoint(seq=1, kind="full", pages=(), descriptors=(), control=b"", page_size=4096):
    table = [PageTableEntry(idx, rank * page_size) for rank, idx in enumerate(sorted(pages))]
    mem = b"".join(bytes([idx % 251]) * page_size for idx in sorted(pages))
    core = CoreImage(
        seq=seq,
        parent_seq=0 if kind == "full" else seq - 1,
        kind=kind,
        page_size=page_size,
        heap_pages=max(pages, default=0) + 8,
        page_table=table,
        descriptors=list(descriptors),
        control_record=control,
    )
    seal(core, mem)
    return core, mem


def test_empty_checkpoint_has_fixed_size():
    core, mem = make_checkpoint()
    data = encode_core(core)
    assert len(data) == imgfmt.EMPTY_CORE_SIZE == 53
    assert decode_core(data, mem) == core


def test_flipped_crc_detected():
    core, mem = make_checkpoint(pages=[1, 5])
    data = bytearray(encode_core(core))
    data[-1] ^= 0xFF
    with pytest.raises(CrcMismatch):
        decode_core(bytes(data), mem)


def test_bad_magic():
    core, mem = make_checkpoint()
    data = bytearray(encode_core(core))
    data[0] ^= 0x20
    # magic reported only when the crc cannot vouch for the bytes
    with pytest.raises(BadMagic):
        decode_core(bytes(data), mem=None)
    with pytest.raises(CrcMismatch):
        decode_core(bytes(data), mem)


def test_unsupported_version():
    core, mem = make_checkpoint()
    data = bytearray(encode_core(core))
    data[4] = 9
    with pytest.raises(UnsupportedVersion):
        decode_core(bytes(data), mem=None)


def test_truncated():
    core, mem = make_checkpoint(pages=[3])
    data = encode_core(core)
    with pytest.raises(Truncated):
        decode_core(data[:40])
    with pytest.raises(Truncated):
        decode_core(data[:-10] + data[-4:])


def test_descriptor_invariants():
    with pytest.raises(ValueError):
        DescriptorRecord(1, "tcp_listener", port=80, buffered=b"x")
    with pytest.raises(ValueError):
        DescriptorRecord(1, "regular_file")
    with pytest.raises(ValueError):
        DescriptorRecord(1, "floppy")


def test_descriptor_roundtrip():
    descs = [
        DescriptorRecord(1, "tcp_listener", port=9001),
        DescriptorRecord(2, "regular_file", path="/tmp/data.txt"),
        DescriptorRecord(3, "pipe", buffered=b"pending"),
        DescriptorRecord(4, "stream", buffered=b"\x00\xffstream"),
    ]
    core, mem = make_checkpoint(pages=[0, 2, 9], descriptors=descs, control=b"root")
    assert decode_core(encode_core(core), mem) == core


_descriptors = st.lists(
    st.one_of(
        st.builds(
            DescriptorRecord,
            descriptor_id=st.integers(0, 1000),
            kind=st.just("tcp_listener"),
            port=st.integers(1, 65535),
        ),
        st.builds(
            DescriptorRecord,
            descriptor_id=st.integers(0, 1000),
            kind=st.just("regular_file"),
            path=st.text(min_size=1, max_size=30).map(lambda s: "/" + s.replace("\x00", "_")),
        ),
        st.builds(
            DescriptorRecord,
            descriptor_id=st.integers(0, 1000),
            kind=st.sampled_from(["pipe", "stream"]),
            buffered=st.binary(max_size=64),
        ),
    ),
    max_size=6,
    unique_by=lambda d: d.descriptor_id,
)


@settings(max_examples=120, deadline=None)
@given(
    seq=st.integers(2, 2**40),
    kind=st.sampled_from(["full", "incremental"]),
    pages=st.sets(st.integers(0, 500), max_size=12),
    descriptors=_descriptors,
    control=st.binary(max_size=128),
)
def test_roundtrip_property(seq, kind, pages, descriptors, control):
    page_size = 256
    core, mem = make_checkpoint(
        seq=seq, kind=kind, pages=pages, descriptors=descriptors,
        control=control, page_size=page_size,
    )
    assert decode_core(encode_core(core), mem) == core


def test_single_bit_corruption_sample():
    core, mem = make_checkpoint(pages=[0, 1, 7], control=b"ctl", descriptors=[
        DescriptorRecord(1, "tcp_listener", port=1234),
    ])
    data = encode_core(core)
    rng = random.Random(11)
    for _ in range(300):
        if rng.random() < 0.5 and mem:
            buf = bytearray(mem)
            bit = rng.randrange(len(buf) * 8)
            buf[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(CrcMismatch):
                decode_core(data, bytes(buf))
        else:
            buf = bytearray(data)
            bit = rng.randrange(len(buf) * 8)
            buf[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(CrcMismatch):
                decode_core(bytes(buf), mem)


def test_write_read_uses_naming_rule(tmp_path):
    core, mem = make_checkpoint(seq=7, pages=[1])
    cname, mname = write_checkpoint(tmp_path, core, mem)
    assert cname == "ckpt-7.core" and mname == "ckpt-7.mem"
    assert (tmp_path / cname).exists() and (tmp_path / mname).exists()
    ck = read_checkpoint(tmp_path, 7)
    assert ck.core == core and ck.mem == mem


def test_read_missing_memory_image(tmp_path):
    core, mem = make_checkpoint(seq=3, pages=[1])
    write_checkpoint(tmp_path, core, mem)
    (tmp_path / "ckpt-3.mem").unlink()
    with pytest.raises(StorageError, match="memory image"):
        read_checkpoint(tmp_path, 3)


def test_seal_rejects_wrong_mem_length():
    core, mem = make_checkpoint(pages=[1])
    with pytest.raises(ValueError):
        seal(core, mem + b"x")


def test_validation_rules():
    core, mem = make_checkpoint(seq=5, kind="incremental", pages=[2])
    core.parent_seq = 7  # parent after the checkpoint itself
    with pytest.raises(ValueError):
        encode_core(core)
    core.parent_seq = 0  # incrementals always follow something
    with pytest.raises(ValueError):
        encode_core(core)
    core, mem = make_checkpoint(pages=[1, 2])
    core.page_table.reverse()
    with pytest.raises(ValueError):
        encode_core(core)
