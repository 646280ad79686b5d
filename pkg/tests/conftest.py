"""Shared fixtures: the shipped toy checkpoint and its canonical datasets."""

from pathlib import Path

import pytest

from vitpq import data, serialize
from vitpq.config import RunConfig

ASSETS = Path(__file__).resolve().parent.parent / "assets"


@pytest.fixture(scope="session")
def asset_config() -> RunConfig:
    return RunConfig.load(ASSETS / "asset-config.json")


@pytest.fixture(scope="session")
def toy_checkpoint(asset_config):
    """The shipped trained checkpoint (see scripts/make_assets.py)."""
    return serialize.load_vit_params(ASSETS / "toy-checkpoint")


@pytest.fixture(scope="session")
def toy_splits(asset_config):
    cfg = asset_config
    return data.default_splits(cfg.data_seed, cfg.train_per_class,
                               cfg.eval_per_class, cfg.calib_size)
