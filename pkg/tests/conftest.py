import logging

import numpy as np
import pytest

from gqe.models.aggregator import AggregatorParams, EncoderConfig
from gqe.models.hierarchy import GQEModel
from gqe.models.store import SynthSpec
from gqe.services.aggregator_service import identity_params
from gqe.services.embed_store_service import build_store, generate_queries, generate_synthetic
from gqe.services.encoder_service import encoder_tensor_shapes

SHIPPED_SPEC = SynthSpec(clusters=16, points_per_cluster=100, dim=32, noise_sigma=0.2, seed=0)


@pytest.fixture(autouse=True)
def _package_logging():
    """Undo CLI logging setup so caplog keeps seeing package records."""
    yield
    logger = logging.getLogger("gqe")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def make_store():
    """Random unit-norm store, optionally labelled round-robin over ``labels`` classes."""

    def make(n, dim, seed=0, labels=None):
        rng = np.random.default_rng(seed)
        matrix = rng.standard_normal((n, dim))
        lab = None if labels is None else np.arange(n) % labels
        return build_store(matrix, lab)

    return make


@pytest.fixture
def make_clustered():
    """Small labelled clustered store."""

    def make(clusters=4, per_cluster=10, dim=8, sigma=0.3, seed=0):
        return generate_synthetic(SynthSpec(
            clusters=clusters, points_per_cluster=per_cluster, dim=dim, noise_sigma=sigma, seed=seed,
        ))

    return make


def random_params(dim, k, heads=2, layers=1, ff_dim=16, scale=0.3, seed=0, temperature=None):
    """Aggregator with weights far enough from zero to exercise every encoder path."""
    rng = np.random.default_rng(seed)
    config = EncoderConfig(dim=dim, heads=heads, layers=layers, ff_dim=ff_dim)
    weights = {}
    for name, shape in encoder_tensor_shapes(config):
        values = rng.normal(0.0, scale, size=shape)
        weights[name] = 1.0 + values if name.endswith(".gain") else values
    return AggregatorParams(
        config=config,
        k=k,
        positional=rng.normal(0.0, scale, size=(k + 1, dim)),
        encoder_weights=weights,
        temperature=temperature,
    )


@pytest.fixture
def make_model():
    def make(dim, k, levels, seed=0, **kwargs):
        return GQEModel(
            k=k,
            per_level_params=[random_params(dim, k, seed=seed * 100 + i, **kwargs) for i in range(levels)],
        )

    return make


@pytest.fixture
def identity_model():
    def make(dim, k, levels, temperature=None):
        return GQEModel(k=k, per_level_params=[identity_params(dim, k, temperature) for _ in range(levels)])

    return make


@pytest.fixture(scope="session")
def shipped_data():
    """The shipped desk-scale dataset: 16 clusters x 100 points in 32 dims, plus 5 queries per cluster."""
    return generate_synthetic(SHIPPED_SPEC), generate_queries(SHIPPED_SPEC, 5)
