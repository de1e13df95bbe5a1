import numpy as np
import pytest

from styledistill.cache import CacheEntry, CacheKey, open_cache, write_cache
from styledistill.distill import distill
from styledistill.embedding import (
    average_embeddings,
    init_projection,
    mock_image_embed,
    project,
)
from styledistill.model import ConditionSet, RecordingHook, ToyModel, ddim_invert, encode_image
from styledistill.pipeline import StylizeConfig, generate_average_image

MODEL_SEED = 101
STEPS = 10


def invert_to_cache(model, img, path, steps=STEPS, prompt=""):
    hook = RecordingHook()
    ddim_invert(model, encode_image(img), ConditionSet(model.prompt_tokens(prompt)), steps, hook)
    entries = [CacheEntry(CacheKey(*k), K, V) for k, (K, V) in sorted(hook.records.items())]
    write_cache(entries, path)
    return path


@pytest.fixture(scope="session")
def model():
    return ToyModel(MODEL_SEED)


@pytest.fixture(scope="session")
def toy_world(model, tmp_path_factory):
    """Three 16x16 style images inverted to caches, plus phi, norm stats,
    a default bank and a content image."""
    tmp = tmp_path_factory.mktemp("toyworld")
    rng = np.random.default_rng(7)
    style_imgs = [rng.uniform(0.0, 1.0, (3, 16, 16)) for _ in range(3)]
    cache_paths = [
        invert_to_cache(model, img, tmp / f"style{i}.skvc")
        for i, img in enumerate(style_imgs)
    ]
    readers = [open_cache(p) for p in cache_paths]
    adapter = init_projection(0, token_dim=model.cond_dim)
    phi = average_embeddings(
        [project(adapter, mock_image_embed(im)) for im in style_imgs]
    )
    avg_latent, norm = generate_average_image(model, phi, STEPS, seed=3)
    bank = distill(readers, seed=5)
    content = rng.uniform(0.0, 1.0, (3, 16, 16))
    return {
        "tmp": tmp,
        "style_imgs": style_imgs,
        "cache_paths": cache_paths,
        "readers": readers,
        "adapter": adapter,
        "phi": phi,
        "avg_latent": avg_latent,
        "norm": norm,
        "bank": bank,
        "content": content,
        "cfg": StylizeConfig(steps=STEPS, seed=11),
    }
