import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styledistill.cache import (
    HEADER_SIZE,
    INDEX_ENTRY,
    BadMagicError,
    BadVersionError,
    CacheEntry,
    CacheKey,
    EntryNotFoundError,
    TruncatedError,
    format_index,
    iter_group,
    open_cache,
    read_group,
    write_cache,
)


def entry(layer, t, head, n_tokens, dim, seed=0):
    rng = np.random.default_rng(seed + layer * 1000 + t * 10 + head)
    return CacheEntry(
        CacheKey(layer, t, head),
        rng.standard_normal((n_tokens, dim)).astype(np.float32),
        rng.standard_normal((n_tokens, dim)).astype(np.float32),
    )


class TestWrite:
    def test_layout_arithmetic(self, tmp_path):
        path = tmp_path / "one.skvc"
        write_cache([entry(0, 0, 0, 2, 2)], path)
        expected = HEADER_SIZE + INDEX_ENTRY.size + 2 * (2 * 2 * 4)
        assert path.stat().st_size == expected

    def test_empty_sequence(self, tmp_path):
        path = tmp_path / "empty.skvc"
        write_cache([], path)
        reader = open_cache(path)
        assert reader.keys() == []

    def test_unsorted_rejected(self, tmp_path):
        es = [entry(1, 0, 0, 2, 2), entry(0, 0, 0, 2, 2)]
        with pytest.raises(ValueError, match="sorted"):
            write_cache(es, tmp_path / "x.skvc")

    def test_duplicate_rejected(self, tmp_path):
        es = [entry(0, 0, 0, 2, 2), entry(0, 0, 0, 2, 2)]
        with pytest.raises(ValueError, match="duplicate"):
            write_cache(es, tmp_path / "x.skvc")

    def test_mismatched_kv_shapes_rejected(self):
        with pytest.raises(ValueError, match="identical shapes"):
            CacheEntry(CacheKey(0, 0, 0), np.zeros((2, 3), np.float32), np.zeros((2, 4), np.float32))


class TestRead:
    def test_roundtrip_bitexact(self, tmp_path):
        es = [entry(l, t, h, 8, 4) for l in range(2) for t in range(3) for h in range(2)]
        path = tmp_path / "rt.skvc"
        write_cache(es, path, source_image_id=99)
        reader = open_cache(path)
        assert reader.source_image_id == 99
        for e in es:
            back = reader.read_entry(e.key)
            assert np.array_equal(back.K, e.K)
            assert np.array_equal(back.V, e.V)
            again = reader.read_entry(e.key)
            assert np.array_equal(again.K, back.K)

    def test_offsets_large_file(self, tmp_path):
        es = [entry(0, t, h, 3, 2, seed=t) for t in range(500) for h in range(2)]
        path = tmp_path / "big.skvc"
        write_cache(es, path)
        reader = open_cache(path)
        last = es[-1]
        back = reader.read_entry(last.key)
        assert np.array_equal(back.K, last.K)
        assert np.array_equal(back.V, last.V)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "m.skvc"
        write_cache([entry(0, 0, 0, 2, 2)], path)
        with pytest.raises(EntryNotFoundError, match="entry not found"):
            open_cache(path).read_entry(CacheKey(1, 1, 1))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.skvc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            open_cache(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.skvc"
        write_cache([entry(0, 0, 0, 2, 2)], path)
        raw = bytearray(path.read_bytes())
        raw[4] = 42
        path.write_bytes(bytes(raw))
        with pytest.raises(BadVersionError):
            open_cache(path)

    def test_truncated_index(self, tmp_path):
        path = tmp_path / "t.skvc"
        write_cache([entry(0, 0, 0, 2, 2)], path)
        path.write_bytes(path.read_bytes()[: HEADER_SIZE + 4])
        with pytest.raises(TruncatedError):
            open_cache(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "p.skvc"
        write_cache([entry(0, 0, 0, 8, 8)], path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(TruncatedError):
            open_cache(path).read_entry(CacheKey(0, 0, 0))


class CountingFile:
    def __init__(self, f):
        self._f = f
        self.bytes_read = 0

    def read(self, n=-1):
        data = self._f.read(n)
        self.bytes_read += len(data)
        return data

    def seek(self, *args):
        return self._f.seek(*args)


def test_open_touches_only_header_and_index(tmp_path):
    es = [entry(0, t, 0, 2048, 16, seed=t) for t in range(50)]
    path = tmp_path / "sparse.skvc"
    write_cache(es, path)
    assert path.stat().st_size > 10_000_000
    with open(path, "rb") as f:
        counting = CountingFile(f)
        open_cache(counting)
        budget = HEADER_SIZE + 50 * INDEX_ENTRY.size
        assert counting.bytes_read <= budget


class TestIterGroup:
    def test_concatenation_count(self, tmp_path):
        key = CacheKey(0, 0, 0)
        pa, pb = tmp_path / "a.skvc", tmp_path / "b.skvc"
        write_cache([entry(0, 0, 0, 3, 4, seed=1)], pa)
        write_cache([entry(0, 0, 0, 5, 4, seed=2)], pb)
        readers = [open_cache(pa), open_cache(pb)]
        K, V = read_group(readers, key)
        assert K.shape == (8, 4)
        assert np.array_equal(K[:3], readers[0].read_entry(key).K)
        assert np.array_equal(K[3:], readers[1].read_entry(key).K)

    def test_single_reader_equals_read_entry(self, tmp_path):
        path = tmp_path / "a.skvc"
        e = entry(0, 0, 0, 4, 4)
        write_cache([e], path)
        reader = open_cache(path)
        K, V = read_group([reader], e.key)
        assert np.array_equal(K, e.K)
        assert np.array_equal(V, e.V)

    def test_dim_mismatch(self, tmp_path):
        pa, pb = tmp_path / "a.skvc", tmp_path / "b.skvc"
        write_cache([entry(0, 0, 0, 3, 4)], pa)
        write_cache([entry(0, 0, 0, 3, 8)], pb)
        with pytest.raises(ValueError, match="dim mismatch"):
            list(iter_group([open_cache(pa), open_cache(pb)], CacheKey(0, 0, 0)))

    def test_streaming_chunks(self, tmp_path):
        pa, pb = tmp_path / "a.skvc", tmp_path / "b.skvc"
        write_cache([entry(0, 0, 0, 3, 4, seed=1)], pa)
        write_cache([entry(0, 0, 0, 5, 4, seed=2)], pb)
        chunks = list(iter_group([open_cache(pa), open_cache(pb)], CacheKey(0, 0, 0)))
        assert [k.shape[0] for k, _ in chunks] == [3, 5]


def test_format_index(tmp_path):
    path = tmp_path / "i.skvc"
    write_cache([entry(0, 0, 0, 2, 2), entry(0, 1, 0, 2, 2)], path)
    text = format_index(open_cache(path))
    lines = text.splitlines()
    assert len(lines) == 2
    first_offset = HEADER_SIZE + 2 * INDEX_ENTRY.size
    assert lines[0] == f"0,0,0,2,2,{first_offset}"


@settings(max_examples=25, deadline=None)
@given(
    n_entries=st.integers(1, 6),
    n_tokens=st.integers(1, 12),
    dim=st.integers(1, 9),
    seed=st.integers(0, 2**30),
)
def test_roundtrip_property(tmp_path_factory, n_entries, n_tokens, dim, seed):
    tmp = tmp_path_factory.mktemp("prop")
    es = [entry(0, t, 0, n_tokens, dim, seed=seed) for t in range(n_entries)]
    path = tmp / "p.skvc"
    write_cache(es, path)
    reader = open_cache(path)
    assert reader.keys() == [e.key for e in es]
    for e in es:
        back = reader.read_entry(e.key)
        assert back.K.tobytes() == e.K.tobytes()
        assert back.V.tobytes() == e.V.tobytes()
