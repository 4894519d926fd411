"""Shared fixtures: a small on-disk dataset with precomputed artifacts."""

import numpy as np
import pytest
import torch

from changecap.config import DataConfig, PipelineConfig, TrainConfig
from changecap.data import fit_artifacts, precompute_procedures
from changecap.synthdata import build_dataset

TINY_DATA = DataConfig(num_pairs=60, canvas=32, grid=4, seed=0)
TINY_PIPE = PipelineConfig(l=7, k=2, patch_size=8, K_cb=32,
                           codebook_max_patches=20000)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(stage=1, steps=8, epochs=2, batch_size=4, seed=0,
                lr_peak=1e-3, warmup_steps=4, enc_lr=1e-3, dec_lr=1e-3,
                k=2, l=7, K_cb=32, n_I=16, d=32, l_e=1, l_d=1, heads=4,
                max_text=12, max_frames=10, vocab_size=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    build_dataset(TINY_DATA, root)
    precompute_procedures(root, TINY_PIPE)
    fit_artifacts(root, TINY_PIPE, d=32)
    return root


@pytest.fixture(autouse=True)
def _stable_torch_seed():
    torch.manual_seed(1234)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)
