import os
from pathlib import Path

import numpy as np
import pytest

from planarm.model import desk_model
from planarm.sca import TrainConfig, generate_sca_dataset, load_sca_model, save_sca_model, train_sca

CACHE_DIR = Path(__file__).parent / ".cache"


def cache_path(name: str) -> Path:
    CACHE_DIR.mkdir(exist_ok=True)
    return CACHE_DIR / name


@pytest.fixture(scope="session")
def desk():
    return desk_model()


def _train_cached(name: str, count: int, epochs: int, desk):
    path = cache_path(name)
    if path.exists():
        return load_sca_model(path)
    dataset = generate_sca_dataset(desk, count, seed=1)
    model = train_sca(dataset, desk, TrainConfig(epochs=epochs, seed=0))
    save_sca_model(model, path)
    return model


@pytest.fixture(scope="session")
def sca_medium(desk):
    """Mid-quality score model for module tests (cached on disk)."""
    return _train_cached("sca_medium_v1.bin", 20_000, 10, desk)


@pytest.fixture(scope="session")
def sca_full(desk):
    """Full desk-scale score model used by the acceptance suite (cached)."""
    return _train_cached("sca_full_v1.bin", 100_000, 30, desk)


@pytest.fixture(scope="session")
def sdf_set(desk):
    """Fitted degree-12 link SDFs for the desk model (cached on disk)."""
    from planarm.sdf import fit_robot_sdfs, load_sdf_set, save_sdf_set

    path = cache_path("sdf_set_v1.bin")
    if path.exists():
        return load_sdf_set(path)
    sdfs = fit_robot_sdfs(desk, degree=12, seed=0, sample_count=30_000)
    save_sdf_set(sdfs, path)
    return sdfs
