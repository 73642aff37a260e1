"""Shared fixtures: a small synthetic pack and a pretrained checkpoint.

Sizes here are chosen for unit-test speed, not decoding quality; the
acceptance suite builds its own benchmark-scale pack.
"""

import numpy as np
import pytest

from duala import data, train


def small_synth_config(**overrides):
    base = dict(
        k_source=2,
        d_range=(48, 64),
        trials_per_subject=120,
        class_count=5,
        true_latent_dim=8,
        tokens_per_stimulus=4,
        token_dim=16,
        retrieval_dim=16,
        seed=0,
    )
    base.update(overrides)
    return data.SynthConfig(**base)


def small_train_config(**overrides):
    base = dict(epochs=4, batch_size=10, latent_dim=32, lora_rank=4, seed=0)
    base.update(overrides)
    return train.TrainConfig(**base).validate()


@pytest.fixture(scope="session")
def small_pack():
    return data.generate_synthetic(small_synth_config())


@pytest.fixture(scope="session")
def pretrained(small_pack):
    """Pretrained checkpoint on subjects 0 and 1, reference stats included.

    Session-scoped: tests must treat its tensors as read-only (finetune
    copies internally).
    """
    ckpt = train.pretrain(small_pack, [0, 1], small_train_config())
    train.compute_reference(ckpt, small_pack)
    return ckpt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
