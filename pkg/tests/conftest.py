import numpy as np
import pytest

from dataset import CorpusSpec, default_taxonomy, generate_synthetic_corpus, stratified_split
from network import build_graph, init_parameters

SMALL_HW = (32, 48)


@pytest.fixture
def taxonomy():
    return default_taxonomy()


@pytest.fixture
def small_manifest(taxonomy):
    """Ten procedural samples per class at 32x48."""
    return generate_synthetic_corpus(CorpusSpec.uniform(10, *SMALL_HW), seed=3, taxonomy=taxonomy)


@pytest.fixture
def small_split(small_manifest):
    return stratified_split(small_manifest, k=5, seed=7)


@pytest.fixture
def tiny_graph():
    return build_graph(width_mult=0.25, input_shape=(3, *SMALL_HW))


@pytest.fixture
def tiny_params(tiny_graph):
    return init_parameters(tiny_graph, seed=1)


@pytest.fixture
def trained_like_params(tiny_graph):
    """Parameters with non-trivial batch-norm statistics, as after training."""
    params = init_parameters(tiny_graph, seed=2)
    rng = np.random.default_rng(11)
    for name in params.names:
        t = params.tensors[name]
        if name.endswith(("gamma", "running_var")):
            params.tensors[name] = rng.uniform(0.5, 1.5, size=t.shape).astype(np.float32)
        elif name.endswith(("beta", "running_mean")):
            params.tensors[name] = rng.normal(0.0, 0.2, size=t.shape).astype(np.float32)
    return params


@pytest.fixture
def rgb_image():
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(40, 60, 3), dtype=np.uint8)
