"""Conformance tests: everything the bridge emits must pass the engine's
own open/validate path, and extraction must be deterministic."""

import struct
import subprocess
import sys

import numpy as np
import pytest

from sdbridge.extract import ExtractionJob, extract_cache, extract_embeddings
from sdbridge.runtime import load_runtime


def engine_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "styledistill.cli", *args],
        capture_output=True,
        text=True,
    )


def write_ppm(path, img):
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.transpose(1, 2, 0).tobytes())


def fnv64_file(path):
    h = 0xCBF29CE484222325
    for b in path.read_bytes():
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@pytest.fixture(scope="module")
def images(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("imgs")
    rng = np.random.default_rng(3)
    paths = []
    for i in range(2):
        p = tmp / f"style{i}.ppm"
        write_ppm(p, rng.uniform(0, 1, (3, 16, 16)))
        paths.append(p)
    return paths


def job_for(images, out_dir, **kw):
    defaults = dict(model="toy-unet:7", steps=2, layers=[0], heads=[0])
    defaults.update(kw)
    return ExtractionJob(images=list(images), out_dir=out_dir, **defaults)


class TestCacheExtraction:
    def test_filtered_extraction_validates_in_engine(self, images, tmp_path):
        caches = extract_cache(job_for(images, tmp_path / "out"))
        assert len(caches) == 2
        for cache in caches:
            result = engine_cli("cache", "inspect", str(cache))
            assert result.returncode == 0, result.stderr
            lines = result.stdout.strip().splitlines()
            assert len(lines) == 2  # 1 layer x 2 steps x 1 head
            layer, timestep, head, n_tokens, dim, _ = lines[0].split(",")
            assert (layer, timestep, head) == ("0", "0", "0")
            assert int(n_tokens) == 8 * 8
            assert int(dim) == 16

    def test_distills_without_error(self, images, tmp_path):
        caches = extract_cache(job_for(images, tmp_path / "out"))
        bank = tmp_path / "bank.skvb"
        result = engine_cli(
            "distill", "--caches", *map(str, caches), "--out", str(bank), "--seed", "5"
        )
        assert result.returncode == 0, result.stderr
        inspect = engine_cli("cache", "inspect", str(bank))
        assert inspect.returncode == 0
        assert len(inspect.stdout.strip().splitlines()) == 2

    def test_deterministic_digests(self, images, tmp_path):
        a = extract_cache(job_for(images, tmp_path / "a"))
        b = extract_cache(job_for(images, tmp_path / "b"))
        assert [fnv64_file(p) for p in a] == [fnv64_file(p) for p in b]

    def test_source_id_recorded(self, images, tmp_path):
        caches = extract_cache(job_for(images, tmp_path / "out"))
        raw = caches[0].read_bytes()
        assert raw[:4] == b"SKVC"
        (source_id,) = struct.unpack_from("<Q", raw, 8)
        assert source_id == fnv64_file(images[0])

    def test_unfiltered_covers_all_sites(self, images, tmp_path):
        caches = extract_cache(
            job_for(images[:1], tmp_path / "full", layers=None, heads=None)
        )
        result = engine_cli("cache", "inspect", str(caches[0]))
        runtime = load_runtime("toy-unet:7")
        expected = runtime.n_layers * runtime.n_heads * 2
        assert len(result.stdout.strip().splitlines()) == expected

    def test_partial_files_removed_on_abort(self, images, tmp_path):
        out = tmp_path / "abort"
        bad = list(images) + [tmp_path / "missing.ppm"]
        with pytest.raises(FileNotFoundError):
            extract_cache(job_for(bad, out))
        assert not list(out.glob("*.skvc"))

    def test_empty_image_list(self, tmp_path):
        with pytest.raises(ValueError, match="at least one image"):
            ExtractionJob(model="toy-unet", images=[], out_dir=tmp_path)

    def test_unknown_model(self):
        with pytest.raises(ValueError, match="unknown model"):
            load_runtime("sd-v1-5")


class TestEmbeddings:
    def test_unit_norm_and_engine_readable(self, images, tmp_path):
        from styledistill.fileio import read_ten

        outs = extract_embeddings(images, tmp_path / "emb", seed=0)
        assert len(outs) == 2
        for p in outs:
            vec = read_ten(p)
            assert vec.ndim == 1
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-5)

    def test_deterministic(self, images, tmp_path):
        a = extract_embeddings(images, tmp_path / "e1", seed=4)
        b = extract_embeddings(images, tmp_path / "e2", seed=4)
        assert [fnv64_file(p) for p in a] == [fnv64_file(p) for p in b]

    def test_differ_across_images(self, images, tmp_path):
        from styledistill.fileio import read_ten

        outs = extract_embeddings(images, tmp_path / "emb2", seed=0)
        va, vb = read_ten(outs[0]), read_ten(outs[1])
        assert np.abs(va - vb).max() > 1e-6


def test_cli_end_to_end(images, tmp_path):
    result = subprocess.run(
        [
            sys.executable, "-m", "sdbridge.cli", "extract",
            "--model", "toy-unet:7", "--images", *map(str, images),
            "--steps", "2", "--out", str(tmp_path / "cli_out"),
            "--layers", "0", "--heads", "0",
        ],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0, result.stderr
    assert len(list((tmp_path / "cli_out").glob("*.skvc"))) == 2
    assert len(list((tmp_path / "cli_out").glob("*.ten"))) == 2


def test_cli_unknown_model(tmp_path, images):
    result = subprocess.run(
        [
            sys.executable, "-m", "sdbridge.cli", "extract",
            "--model", "nope", "--images", str(images[0]),
            "--out", str(tmp_path / "x"),
        ],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 1
    assert "error:" in result.stderr
