"""Shared fixtures: synthetic datasets are expensive enough (optical flow on
every frame pair) that the suite builds each one once per session."""

import numpy as np
import pytest

from astpn.datapipe import (
    by_identity,
    load_dataset,
    preprocess_dataset,
    synth_dataset,
)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Default synthetic dataset: 8 identities, 2 cameras, 16 frames of 24x16."""
    root = tmp_path_factory.mktemp("data") / "synth8"
    synth_dataset(root, n_ids=8, n_cams=2, frames_per_seq=16, size=(24, 16), seed=0)
    return root


@pytest.fixture(scope="session")
def synth_index(synth_root):
    return by_identity(preprocess_dataset(load_dataset(synth_root)))


@pytest.fixture(scope="session")
def sparse_root(tmp_path_factory):
    """Synthetic dataset where only 2 of 16 frames carry identity signal."""
    root = tmp_path_factory.mktemp("data") / "sparse8"
    synth_dataset(root, n_ids=8, n_cams=2, frames_per_seq=16, size=(16, 12),
                  seed=0, signal_frames=2)
    return root


@pytest.fixture(scope="session")
def sparse_index(sparse_root):
    return by_identity(preprocess_dataset(load_dataset(sparse_root)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
