"""Shared fixtures: thread pinning, hypothesis profile, tiny models and datasets."""

import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from cevae.data import PhantomConfig, generate_phantoms
from cevae.model import CevaeNet, ModelConfig, init_weights
from cevae.seeding import torch_generator

torch.set_num_threads(1)

settings.register_profile(
    "cevae",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("cevae")


MICRO_CFG = ModelConfig(resolution=16, channels=(4, 8), latent_dim=8)
SMALL_CFG = ModelConfig(resolution=32, channels=(4, 8), latent_dim=8)


def make_net(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> CevaeNet:
    net = CevaeNet(cfg)
    if dtype is not torch.float32:
        net = net.to(dtype)
    init_weights(net, torch_generator(seed, "test-init"))
    return net


@pytest.fixture(scope="session")
def micro_cfg() -> ModelConfig:
    """16x16 two-stage model config, the smallest legal geometry used in tests."""
    return MICRO_CFG


@pytest.fixture(scope="session")
def micro_net(micro_cfg) -> CevaeNet:
    net = make_net(micro_cfg, seed=0)
    net.eval()
    return net


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small phantom corpus shared by IO/scoring/eval tests (read-only)."""
    root = tmp_path_factory.mktemp("tiny_data")
    cfg = PhantomConfig(
        n_train_patients=3,
        n_val_patients=2,
        n_test_patients=3,
        slices_per_patient=4,
        anomaly_fraction=0.5,
        resolution=32,
        seed=7,
    )
    manifest = generate_phantoms(cfg, root)
    return cfg, manifest


@pytest.fixture(scope="session")
def tiny_phantom_cfg(tiny_dataset) -> PhantomConfig:
    return tiny_dataset[0]


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    return tiny_dataset[1]


def replace(obj, **kw):
    return dataclasses.replace(obj, **kw)


def rand_image(rng: np.random.Generator, res: int = 16) -> np.ndarray:
    return rng.standard_normal((res, res)).astype(np.float32)
