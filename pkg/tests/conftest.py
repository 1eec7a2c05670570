import numpy as np
import pytest

from pcam.numerics import rng_from_seed
from pcam.synth import DomainSpec, generate_domain
from pcam.vit import ModelConfig, init_params


@pytest.fixture
def tiny_cfg():
    return ModelConfig(image_side=8, channels=1, patch_side=4, embed_dim=8,
                       n_heads=2, n_layers=2, n_classes=3)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, rng_from_seed(7))


@pytest.fixture
def tiny_domains():
    common = dict(n_classes=3, shapes=("square", "cross", "ring"), n_samples=6,
                  image_side=8, patch_side=4, noise_level=0.1)
    src = generate_domain(DomainSpec(domain="source", ratio_means=(0.4, 0.35, 0.45), seed=1, **common))
    tgt = generate_domain(DomainSpec(domain="target", ratio_means=(0.25, 0.3, 0.2), seed=2, **common))
    return src, tgt


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    denom = max(float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom
