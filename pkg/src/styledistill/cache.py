"""Bit-exact binary container for inversion K/V features ("SKVC").

Layout, all little-endian:

    magic "SKVC" | format_version u32 | source_image_id u64 | entry_count u32
    index: entry_count x (layer u16, timestep u16, head u16,
                          n_tokens u32, dim u32, byte_offset u64)
    payload: per entry, contiguous f32: K (n_tokens x dim) then V

Entries are sorted by (layer, timestep, head). Opening a file loads only
header and index; payload reads are positioned (os.pread), so one reader can
be shared across threads.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

MAGIC = b"SKVC"
FORMAT_VERSION = 1
HEADER_SIZE = 4 + 4 + 8 + 4
INDEX_ENTRY = struct.Struct("<HHHIIQ")


class CacheError(Exception):
    pass


class BadMagicError(CacheError):
    pass


class BadVersionError(CacheError):
    pass


class TruncatedError(CacheError):
    pass


class EntryNotFoundError(CacheError):
    pass


class CacheKey(NamedTuple):
    layer: int
    timestep: int
    head: int


@dataclass
class CacheEntry:
    key: CacheKey
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.K = np.ascontiguousarray(self.K, dtype="<f4")
        self.V = np.ascontiguousarray(self.V, dtype="<f4")
        if self.K.ndim != 2 or self.K.shape != self.V.shape:
            raise ValueError("K and V must be 2-D with identical shapes")
        if self.K.shape[0] < 1:
            raise ValueError("entry must contain at least one token")

    @property
    def n_tokens(self) -> int:
        return self.K.shape[0]

    @property
    def dim(self) -> int:
        return self.K.shape[1]


def write_cache(entries: Sequence[CacheEntry], path, source_image_id: int = 0) -> None:
    keys = [e.key for e in entries]
    for a, b in zip(keys, keys[1:]):
        if a == b:
            raise ValueError(f"duplicate cache key {tuple(a)}")
        if a > b:
            raise ValueError("entries must be sorted by (layer, timestep, head)")
    offset = HEADER_SIZE + INDEX_ENTRY.size * len(entries)
    index = []
    for e in entries:
        index.append(INDEX_ENTRY.pack(*e.key, e.n_tokens, e.dim, offset))
        offset += e.K.nbytes + e.V.nbytes
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQI", FORMAT_VERSION, source_image_id, len(entries)))
        f.writelines(index)
        for e in entries:
            f.write(e.K.tobytes())
            f.write(e.V.tobytes())
        f.flush()
        os.fsync(f.fileno())


class CacheReader:
    """Index-only view of a cache file; payload is read on demand.

    Accepts a path or an already-open binary file object (the latter is
    used by tests that meter how many bytes opening touches).
    """

    def __init__(self, source):
        self._lock = threading.Lock()
        if hasattr(source, "read"):
            self._file: BinaryIO | None = source
            self._fd = None
            self.path = getattr(source, "name", "<stream>")
        else:
            self.path = str(source)
            self._file = None
            self._fd = os.open(self.path, os.O_RDONLY)
        header = self._read_at(0, HEADER_SIZE)
        if len(header) < HEADER_SIZE:
            raise TruncatedError(f"{self.path}: file shorter than header")
        if header[:4] != MAGIC:
            raise BadMagicError(f"{self.path}: bad magic {header[:4]!r}")
        version, self.source_image_id, count = struct.unpack_from("<IQI", header, 4)
        if version != FORMAT_VERSION:
            raise BadVersionError(f"{self.path}: unsupported version {version}")
        raw = self._read_at(HEADER_SIZE, INDEX_ENTRY.size * count)
        if len(raw) < INDEX_ENTRY.size * count:
            raise TruncatedError(f"{self.path}: truncated index")
        self._index: dict[CacheKey, tuple[int, int, int]] = {}
        for i in range(count):
            layer, t, head, n_tokens, dim, off = INDEX_ENTRY.unpack_from(
                raw, i * INDEX_ENTRY.size
            )
            self._index[CacheKey(layer, t, head)] = (n_tokens, dim, off)

    def _read_at(self, offset: int, size: int) -> bytes:
        if self._fd is not None:
            return os.pread(self._fd, size, offset)
        with self._lock:
            self._file.seek(offset)
            return self._file.read(size)

    def keys(self) -> list[CacheKey]:
        return sorted(self._index)

    def __contains__(self, key) -> bool:
        return CacheKey(*key) in self._index

    def shape(self, key) -> tuple[int, int]:
        key = CacheKey(*key)
        if key not in self._index:
            raise EntryNotFoundError(f"entry not found: {tuple(key)}")
        n_tokens, dim, _ = self._index[key]
        return n_tokens, dim

    def read_entry(self, key) -> CacheEntry:
        key = CacheKey(*key)
        if key not in self._index:
            raise EntryNotFoundError(f"entry not found: {tuple(key)}")
        n_tokens, dim, off = self._index[key]
        nbytes = n_tokens * dim * 4
        raw = self._read_at(off, 2 * nbytes)
        if len(raw) < 2 * nbytes:
            raise TruncatedError(f"{self.path}: truncated payload at {tuple(key)}")
        K = np.frombuffer(raw, dtype="<f4", count=n_tokens * dim).reshape(n_tokens, dim)
        V = np.frombuffer(raw, dtype="<f4", count=n_tokens * dim, offset=nbytes).reshape(
            n_tokens, dim
        )
        return CacheEntry(key, K, V)

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_cache(path) -> CacheReader:
    return CacheReader(path)


def iter_group(readers: Sequence[CacheReader], key) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Stream (K, V) chunks for `key` from each reader in order.

    Reader order then token order; memory stays bounded by one reader's
    entry at a time. All readers must agree on dim.
    """
    key = CacheKey(*key)
    dims = [r.shape(key)[1] for r in readers]
    if len(set(dims)) > 1:
        raise ValueError(f"dim mismatch across readers at {tuple(key)}: {dims}")
    for r in readers:
        e = r.read_entry(key)
        yield e.K, e.V


def read_group(readers: Sequence[CacheReader], key) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate the streamed chunks into single (K, V) matrices."""
    ks, vs = [], []
    for K, V in iter_group(readers, key):
        ks.append(K)
        vs.append(V)
    return np.concatenate(ks, axis=0), np.concatenate(vs, axis=0)


def format_index(reader: CacheReader) -> str:
    lines = []
    for key in reader.keys():
        n_tokens, dim, off = reader._index[key]
        lines.append(f"{key.layer},{key.timestep},{key.head},{n_tokens},{dim},{off}")
    return "\n".join(lines)
