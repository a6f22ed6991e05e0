import struct

import numpy as np
import pytest

from mmexperts.dataset import (MAGIC, DataFormatError, Dataset, DatasetWriter, load_dataset, read_header,
                               save_dataset)

SHAPES = ((3, 4, 5), (3, 4, 5), (3, 4, 5), (2, 3, 7))


def random_set(n, seed=0):
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0, 1, (n,) + s).astype(np.float32) for s in SHAPES]
    return Dataset(*xs, rng.uniform(-1, 1, n).astype(np.float32))


@pytest.mark.parametrize("mmap", [True, False])
def test_round_trip(tmp_path, mmap):
    data = random_set(10)
    save_dataset(tmp_path / "d.mmed", data)
    back = load_dataset(tmp_path / "d.mmed", mmap=mmap)
    assert len(back) == 10 and back.shapes == SHAPES
    for a, b in zip((data.x1, data.x2, data.x3, data.x4, data.y), (back.x1, back.x2, back.x3, back.x4, back.y)):
        np.testing.assert_array_equal(a, b)


def test_header_fields(tmp_path):
    save_dataset(tmp_path / "d.mmed", random_set(3))
    count, shapes, offset = read_header(tmp_path / "d.mmed")
    assert count == 3 and shapes == SHAPES
    assert offset == 4 + 4 + 8 + 4 * (1 + 4 * 3)


def test_batch_keeps_requested_order(tmp_path):
    data = random_set(6, seed=2)
    save_dataset(tmp_path / "d.mmed", data)
    back = load_dataset(tmp_path / "d.mmed")
    idx = np.array([4, 0, 4, 2])
    *xs, y = back.batch(idx)
    np.testing.assert_array_equal(xs[3], data.x4[idx])
    np.testing.assert_array_equal(y, data.y[idx])


def test_bad_magic(tmp_path):
    p = tmp_path / "x.mmed"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(DataFormatError, match="magic"):
        load_dataset(p)


def test_bad_version(tmp_path):
    p = tmp_path / "x.mmed"
    p.write_bytes(MAGIC + struct.pack("<IQ", 99, 0) + bytes(20))
    with pytest.raises(DataFormatError, match="version"):
        load_dataset(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "d.mmed"
    save_dataset(p, random_set(4))
    raw = p.read_bytes()
    p.write_bytes(raw[:-9])
    with pytest.raises(DataFormatError, match="expected"):
        load_dataset(p)
    p.write_bytes(raw[:20])
    with pytest.raises(DataFormatError, match="truncated"):
        load_dataset(p)


def test_empty_dataset(tmp_path):
    p = tmp_path / "e.mmed"
    save_dataset(p, random_set(0))
    back = load_dataset(p)
    assert len(back) == 0 and back.shapes == SHAPES


def test_writer_count_enforced(tmp_path):
    w = DatasetWriter(tmp_path / "w.mmed", 2, SHAPES)
    w.write(*(np.zeros(s, np.float32) for s in SHAPES), 0.0)
    with pytest.raises(DataFormatError, match="1 of 2"):
        w.close()
