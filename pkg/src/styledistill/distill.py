"""Distill attention features of n style images into a single-image-sized
representative set.

Clustering runs on the value vectors only; the paired key of each selected
value row is retrieved by index. Representatives are exact copies of input
rows, never synthesized centroids. Work is parallelized per cache key with
a per-key child seed, so the result is independent of worker scheduling.

Bank container ("SKVB"), little-endian:

    magic "SKVB" | version u32 | n_style_images u32 | seed u64 | k_scale f32
    entry_count u32
    index: entry_count x (layer u16, timestep u16, head u16,
                          k u32, dim u32, byte_offset u64)
    payload per entry: K* f32 (k x dim), V* f32 (k x dim),
                       sources: k x (reader_id u32, row_id u64)
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cache import INDEX_ENTRY, CacheKey, CacheReader, iter_group
from .kernels import nearest_rows

BANK_MAGIC = b"SKVB"
BANK_VERSION = 1
BANK_HEADER = struct.Struct("<4sIIQf I")
SOURCE_ENTRY = struct.Struct("<IQ")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iters: int


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    diff = points - points[chosen[0]]
    d2 = (diff * diff).sum(axis=1)
    picked = np.zeros(n, dtype=bool)
    picked[chosen[0]] = True
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # remaining candidates coincide with chosen centroids
            remaining = np.flatnonzero(~picked)
            idx = int(rng.choice(remaining))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen[i] = idx
        picked[idx] = True
        diff = points - points[idx]
        d2 = np.minimum(d2, (diff * diff).sum(axis=1))
    return chosen


def kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iters: int = 50,
    tol: float = 1e-4,
) -> KMeansResult:
    """Lloyd iterations with k-means++ initialization.

    Deterministic for fixed (points, k, seed). Empty clusters are re-seeded
    from the point currently farthest from its centroid.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds number of points ({n})")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = pts[_kmeanspp_init(pts, k, rng)].copy()
    n_iters = 0
    for _ in range(max_iters):
        n_iters += 1
        labels, dists = nearest_rows(pts, centroids)
        new_centroids = np.zeros_like(centroids)
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        np.add.at(new_centroids, labels, pts)
        non_empty = counts > 0
        new_centroids[non_empty] /= counts[non_empty, None]
        reseed_dists = dists.copy()
        for j in np.flatnonzero(~non_empty):
            far = int(np.argmax(reseed_dists))
            new_centroids[j] = pts[far]
            reseed_dists[far] = 0.0
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    labels, dists = nearest_rows(pts, centroids)
    return KMeansResult(centroids, labels, float(dists.sum()), n_iters)


def select_representatives(points_V, points_K, result: KMeansResult):
    """Per centroid, pick the member value-row nearest to it (ties -> lowest
    row index) and its paired key row. Returns (K_rows, V_rows, row_indices).

    A cluster left empty by the final assignment falls back to the globally
    nearest row, so the output always has exactly k rows.
    """
    V = np.asarray(points_V)
    K = np.asarray(points_K)
    if V.shape[0] != K.shape[0]:
        raise ValueError("points_K and points_V must be row-aligned")
    if result.assignments.shape[0] != V.shape[0]:
        raise ValueError("assignments do not match points")
    Vf = V.astype(np.float64, copy=False)
    k = result.centroids.shape[0]
    indices = np.empty(k, dtype=np.int64)
    for j in range(k):
        members = np.flatnonzero(result.assignments == j)
        if members.size == 0:
            members = np.arange(V.shape[0])
        diff = Vf[members] - result.centroids[j]
        indices[j] = members[int(np.argmin((diff * diff).sum(axis=1)))]
    return K[indices].copy(), V[indices].copy(), indices


@dataclass
class BankEntry:
    K: np.ndarray  # (k, dim) f32
    V: np.ndarray
    sources: np.ndarray  # (k, 2) int64: reader index, row index within reader

    @property
    def k(self) -> int:
        return self.K.shape[0]

    @property
    def dim(self) -> int:
        return self.K.shape[1]


@dataclass
class StyleBank:
    entries: dict[CacheKey, BankEntry]
    n_style_images: int
    seed: int
    k_scale: float

    def keys(self) -> list[CacheKey]:
        return sorted(self.entries)

    @property
    def steps(self) -> int:
        return max(key.timestep for key in self.entries) + 1

    def payload_bytes(self) -> int:
        return sum(e.K.nbytes + e.V.nbytes for e in self.entries.values())


def _child_seed(seed: int, key: CacheKey) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), key.layer, key.timestep, key.head])


def _distill_key(readers, key, k, seed, max_iters, tol) -> BankEntry:
    ks, vs, bounds = [], [], [0]
    for K, V in iter_group(readers, key):
        ks.append(K)
        vs.append(V)
        bounds.append(bounds[-1] + K.shape[0])
    K_all = np.concatenate(ks, axis=0)
    V_all = np.concatenate(vs, axis=0)
    k = min(k, V_all.shape[0])
    result = kmeans(V_all, k, seed=_child_seed(seed, key), max_iters=max_iters, tol=tol)
    K_sel, V_sel, rows = select_representatives(V_all, K_all, result)
    reader_ids = np.searchsorted(bounds, rows, side="right") - 1
    row_ids = rows - np.asarray(bounds)[reader_ids]
    sources = np.stack([reader_ids, row_ids], axis=1)
    # provenance order keeps banks reproducible and makes the saturated bank
    # coincide with the naive concatenation row order
    order = np.lexsort((sources[:, 1], sources[:, 0]))
    return BankEntry(K_sel[order], V_sel[order], sources[order])


def distill(
    caches: Sequence[CacheReader],
    k_policy: Callable[[CacheKey], int] | None = None,
    seed: int = 0,
    k_scale: float = 1.0,
    threads: int | None = None,
    max_iters: int = 50,
    tol: float = 1e-4,
) -> StyleBank:
    """Build a style bank from per-image caches, one k-means per cache key.

    Default k per key is the token count of the first cache at that key
    (single-image size), scaled by `k_scale`.
    """
    if not caches:
        raise ValueError("at least one cache required")
    key_set = set(caches[0].keys())
    for i, r in enumerate(caches[1:], start=1):
        missing = key_set.symmetric_difference(r.keys())
        if missing:
            raise ValueError(
                f"cache #{i} key set differs; mismatched keys: {sorted(missing)[:8]}"
            )
    keys = sorted(key_set)

    def k_for(key: CacheKey) -> int:
        if k_policy is not None:
            return int(k_policy(key))
        base = caches[0].shape(key)[0]
        return max(1, int(round(base * k_scale)))

    entries: dict[CacheKey, BankEntry] = {}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {
            key: pool.submit(_distill_key, caches, key, k_for(key), seed, max_iters, tol)
            for key in keys
        }
        for key in keys:
            entries[key] = futures[key].result()
    return StyleBank(entries, n_style_images=len(caches), seed=seed, k_scale=k_scale)


def write_bank(bank: StyleBank, path) -> None:
    keys = bank.keys()
    header = BANK_HEADER.pack(
        BANK_MAGIC, BANK_VERSION, bank.n_style_images, bank.seed, bank.k_scale, len(keys)
    )
    offset = len(header) + INDEX_ENTRY.size * len(keys)
    index = []
    payload = []
    for key in keys:
        e = bank.entries[key]
        index.append(INDEX_ENTRY.pack(*key, e.k, e.dim, offset))
        K = np.ascontiguousarray(e.K, dtype="<f4")
        V = np.ascontiguousarray(e.V, dtype="<f4")
        src = b"".join(
            SOURCE_ENTRY.pack(int(r), int(row)) for r, row in e.sources
        )
        payload.append(K.tobytes() + V.tobytes() + src)
        offset += len(payload[-1])
    with open(path, "wb") as f:
        f.write(header)
        f.writelines(index)
        f.writelines(payload)


def open_bank(path) -> StyleBank:
    data = Path(path).read_bytes()
    if len(data) < BANK_HEADER.size:
        raise ValueError(f"{path}: truncated bank header")
    magic, version, n_images, seed, k_scale, count = BANK_HEADER.unpack_from(data, 0)
    if magic != BANK_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != BANK_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    entries: dict[CacheKey, BankEntry] = {}
    pos = BANK_HEADER.size
    for _ in range(count):
        if pos + INDEX_ENTRY.size > len(data):
            raise ValueError(f"{path}: truncated bank index")
        layer, t, head, k, dim, off = INDEX_ENTRY.unpack_from(data, pos)
        pos += INDEX_ENTRY.size
        nbytes = k * dim * 4
        end = off + 2 * nbytes + k * SOURCE_ENTRY.size
        if end > len(data):
            raise ValueError(f"{path}: truncated bank payload")
        K = np.frombuffer(data, dtype="<f4", count=k * dim, offset=off).reshape(k, dim)
        V = np.frombuffer(data, dtype="<f4", count=k * dim, offset=off + nbytes).reshape(
            k, dim
        )
        sources = np.array(
            [
                SOURCE_ENTRY.unpack_from(data, off + 2 * nbytes + i * SOURCE_ENTRY.size)
                for i in range(k)
            ],
            dtype=np.int64,
        ).reshape(k, 2)
        entries[CacheKey(layer, t, head)] = BankEntry(K.copy(), V.copy(), sources)
    return StyleBank(entries, n_style_images=n_images, seed=seed, k_scale=k_scale)


def format_bank_index(bank: StyleBank) -> str:
    lines = []
    for key in bank.keys():
        e = bank.entries[key]
        lines.append(f"{key.layer},{key.timestep},{key.head},{e.k},{e.dim}")
    return "\n".join(lines)
