import itertools

import numpy as np
import pytest

from styledistill.cache import CacheEntry, CacheKey, open_cache, write_cache
from styledistill.distill import (
    KMeansResult,
    distill,
    format_bank_index,
    kmeans,
    open_bank,
    select_representatives,
    write_bank,
)


def brute_force_two_clusters(points):
    """Minimum-inertia 2-partition by exhaustive enumeration."""
    n = len(points)
    best = None
    for mask_bits in range(1, 2 ** (n - 1)):
        mask = np.array([(mask_bits >> i) & 1 for i in range(n)], dtype=bool)
        best_inertia = 0.0
        for side in (mask, ~mask):
            group = points[side]
            best_inertia += ((group - group.mean(axis=0)) ** 2).sum()
        if best is None or best_inertia < best[0]:
            best = (best_inertia, mask.copy())
    return best


class TestKMeans:
    def test_two_cluster_oracle(self):
        points = np.array([[0.0], [0.1], [10.0], [10.1]])
        oracle_inertia, oracle_mask = brute_force_two_clusters(points)
        result = kmeans(points, 2, seed=0)
        assert result.inertia == pytest.approx(oracle_inertia)
        split = result.assignments == result.assignments[0]
        assert np.array_equal(split, oracle_mask) or np.array_equal(split, ~oracle_mask)

    def test_saturation(self):
        rng = np.random.default_rng(0)
        points = rng.standard_normal((7, 3))
        result = kmeans(points, 7, seed=1)
        assert result.inertia == 0.0
        assert sorted(result.assignments) == list(range(7))

    def test_all_identical_points(self):
        points = np.ones((5, 2))
        result = kmeans(points, 2, seed=0)
        assert result.inertia == 0.0

    def test_errors(self):
        points = np.zeros((3, 2))
        with pytest.raises(ValueError, match="k="):
            kmeans(points, 4, seed=0)
        with pytest.raises(ValueError, match="k must be"):
            kmeans(points, 0, seed=0)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        points = rng.standard_normal((50, 4))
        a = kmeans(points, 5, seed=9)
        b = kmeans(points, 5, seed=9)
        assert np.array_equal(a.centroids, b.centroids)
        assert np.array_equal(a.assignments, b.assignments)

    def test_monotone_inertia(self):
        # fixed seed makes max_iters=i a prefix of the same trajectory
        rng = np.random.default_rng(3)
        points = rng.standard_normal((120, 5))
        inertias = [kmeans(points, 8, seed=4, max_iters=i, tol=0.0).inertia for i in range(1, 12)]
        assert all(b <= a + 1e-9 for a, b in zip(inertias, inertias[1:]))

    def test_points_assigned_to_nearest(self):
        rng = np.random.default_rng(5)
        points = rng.standard_normal((60, 3))
        result = kmeans(points, 6, seed=6)
        d = ((points[:, None, :] - result.centroids[None]) ** 2).sum(axis=2)
        assert np.array_equal(result.assignments, np.argmin(d, axis=1))


class TestSelectRepresentatives:
    def test_saturation_identity(self):
        rng = np.random.default_rng(1)
        V = rng.standard_normal((6, 2)).astype(np.float32)
        K = rng.standard_normal((6, 2)).astype(np.float32)
        result = kmeans(V, 6, seed=0)
        K_sel, V_sel, rows = select_representatives(V, K, result)
        assert sorted(rows) == list(range(6))
        assert np.array_equal(V_sel, V[rows])
        assert np.array_equal(K_sel, K[rows])

    def test_nearest_member_oracle(self):
        V = np.array([[0.0], [1.0], [9.0]], dtype=np.float32)
        K = np.array([[10.0], [11.0], [19.0]], dtype=np.float32)
        result = KMeansResult(
            centroids=np.array([[10.0 / 3.0]]),
            assignments=np.zeros(3, dtype=np.int64),
            inertia=0.0,
            n_iters=1,
        )
        K_sel, V_sel, rows = select_representatives(V, K, result)
        assert rows[0] == 1  # value 1 is nearest to 10/3
        assert V_sel[0, 0] == 1.0
        assert K_sel[0, 0] == 11.0  # paired key

    def test_tie_lowest_index(self):
        V = np.array([[0.0], [2.0]], dtype=np.float32)
        K = V.copy()
        result = KMeansResult(np.array([[1.0]]), np.zeros(2, dtype=np.int64), 0.0, 1)
        _, _, rows = select_representatives(V, K, result)
        assert rows[0] == 0

    def test_misaligned_shapes(self):
        result = KMeansResult(np.zeros((1, 1)), np.zeros(2, dtype=np.int64), 0.0, 1)
        with pytest.raises(ValueError, match="row-aligned"):
            select_representatives(np.zeros((2, 1)), np.zeros((3, 1)), result)


def make_cache(tmp_path, name, keys, n_tokens, dim, seed):
    rng = np.random.default_rng(seed)
    entries = [
        CacheEntry(
            key,
            rng.standard_normal((n_tokens, dim)).astype(np.float32),
            rng.standard_normal((n_tokens, dim)).astype(np.float32),
        )
        for key in sorted(keys)
    ]
    path = tmp_path / name
    write_cache(entries, path)
    return path


KEYS = [CacheKey(l, t, h) for l in range(2) for t in range(2) for h in range(2)]


class TestDistill:
    def test_single_image_bank_is_input_in_order(self, tmp_path):
        path = make_cache(tmp_path, "a.skvc", KEYS, 10, 4, seed=0)
        reader = open_cache(path)
        bank = distill([reader], seed=1)
        for key in KEYS:
            e = reader.read_entry(key)
            b = bank.entries[key]
            assert np.array_equal(b.K, e.K)
            assert np.array_equal(b.V, e.V)
            assert np.array_equal(b.sources[:, 0], np.zeros(10))
            assert np.array_equal(b.sources[:, 1], np.arange(10))

    def test_membership_and_pairing(self, tmp_path):
        paths = [make_cache(tmp_path, f"{i}.skvc", KEYS, 12, 4, seed=i) for i in range(3)]
        readers = [open_cache(p) for p in paths]
        bank = distill(readers, seed=7)
        for key in KEYS:
            b = bank.entries[key]
            for j in range(b.k):
                reader_id, row_id = b.sources[j]
                src = readers[reader_id].read_entry(key)
                assert np.array_equal(b.V[j], src.V[row_id])
                assert np.array_equal(b.K[j], src.K[row_id])

    def test_compression_factor(self, tmp_path):
        for n in (2, 3, 5):
            paths = [
                make_cache(tmp_path, f"c{n}_{i}.skvc", KEYS, 16, 4, seed=10 + i)
                for i in range(n)
            ]
            readers = [open_cache(p) for p in paths]
            bank = distill(readers, seed=3)
            single_payload = sum(
                2 * np.prod(readers[0].shape(k)) * 4 for k in readers[0].keys()
            )
            assert bank.payload_bytes() <= 1.05 * single_payload

    def test_thread_count_invariance(self, tmp_path):
        paths = [make_cache(tmp_path, f"t{i}.skvc", KEYS, 16, 4, seed=20 + i) for i in range(3)]
        readers = [open_cache(p) for p in paths]
        banks = [distill(readers, seed=5, threads=t) for t in (1, 4, 8)]
        for other in banks[1:]:
            for key in KEYS:
                assert np.array_equal(banks[0].entries[key].K, other.entries[key].K)
                assert np.array_equal(banks[0].entries[key].V, other.entries[key].V)
                assert np.array_equal(
                    banks[0].entries[key].sources, other.entries[key].sources
                )

    def test_saturated_bank_equals_concatenation(self, tmp_path):
        paths = [make_cache(tmp_path, f"s{i}.skvc", KEYS, 8, 4, seed=30 + i) for i in range(3)]
        readers = [open_cache(p) for p in paths]
        total = {k: sum(r.shape(k)[0] for r in readers) for k in KEYS}
        bank = distill(readers, k_policy=lambda key: total[key], seed=2)
        for key in KEYS:
            expected_K = np.concatenate([r.read_entry(key).K for r in readers])
            expected_V = np.concatenate([r.read_entry(key).V for r in readers])
            assert np.array_equal(bank.entries[key].K, expected_K)
            assert np.array_equal(bank.entries[key].V, expected_V)

    def test_inconsistent_key_sets(self, tmp_path):
        pa = make_cache(tmp_path, "ka.skvc", KEYS, 8, 4, seed=1)
        pb = make_cache(tmp_path, "kb.skvc", KEYS[:-1], 8, 4, seed=2)
        with pytest.raises(ValueError, match="key set"):
            distill([open_cache(pa), open_cache(pb)], seed=0)

    def test_k_scale(self, tmp_path):
        paths = [make_cache(tmp_path, f"ks{i}.skvc", KEYS, 16, 4, seed=40 + i) for i in range(2)]
        readers = [open_cache(p) for p in paths]
        bank = distill(readers, seed=0, k_scale=0.5)
        assert all(e.k == 8 for e in bank.entries.values())


class TestBankIO:
    def test_roundtrip_bitexact(self, tmp_path):
        paths = [make_cache(tmp_path, f"b{i}.skvc", KEYS, 10, 4, seed=50 + i) for i in range(2)]
        readers = [open_cache(p) for p in paths]
        bank = distill(readers, seed=8, k_scale=1.0)
        out = tmp_path / "bank.skvb"
        write_bank(bank, out)
        back = open_bank(out)
        assert back.n_style_images == 2
        assert back.seed == 8
        assert back.k_scale == pytest.approx(1.0)
        for key in KEYS:
            assert np.array_equal(back.entries[key].K, bank.entries[key].K)
            assert np.array_equal(back.entries[key].V, bank.entries[key].V)
            assert np.array_equal(back.entries[key].sources, bank.entries[key].sources)
        # second write is byte-identical
        out2 = tmp_path / "bank2.skvb"
        write_bank(back, out2)
        assert out.read_bytes() == out2.read_bytes()

    def test_truncated(self, tmp_path):
        paths = [make_cache(tmp_path, "tb.skvc", KEYS, 6, 4, seed=60)]
        bank = distill([open_cache(paths[0])], seed=0)
        out = tmp_path / "t.skvb"
        write_bank(bank, out)
        out.write_bytes(out.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            open_bank(out)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.skvb"
        p.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            open_bank(p)

    def test_inspect_lists_k(self, tmp_path):
        path = make_cache(tmp_path, "ib.skvc", KEYS, 6, 4, seed=70)
        bank = distill([open_cache(path)], seed=0)
        text = format_bank_index(bank)
        assert text.splitlines()[0] == "0,0,0,6,4"
        assert len(text.splitlines()) == len(KEYS)
