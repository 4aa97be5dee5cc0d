import numpy as np
import pytest
from hypothesis import settings

from ldanon.embeddings import EmbeddingSet
from ldanon.identity_pool import build_pool
from ldanon.pipeline import PipelineConfig, toy_adapters

settings.register_profile("ldanon", deadline=None, max_examples=100)
settings.load_profile("ldanon")

SMALL_RES = 64


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_pool():
    r = np.random.default_rng(7)
    ids = tuple(f"synth{i:04d}" for i in range(300))
    return build_pool(EmbeddingSet(ids, r.standard_normal((300, 512)), "test"))


@pytest.fixture
def base_config():
    return PipelineConfig.for_variant("base", resolution=SMALL_RES)


@pytest.fixture
def light_config():
    return PipelineConfig.for_variant("light", resolution=SMALL_RES)


@pytest.fixture
def adapters(toy_pool):
    return toy_adapters(0, pool=toy_pool)
