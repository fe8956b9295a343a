from dataclasses import replace

import pytest
import torch

from digest_seg.config import desk_preset
from digest_seg.data import PhantomSpec, generate_dataset, generate_phantom, nested_targets, preprocess
from digest_seg.network import NetworkConfig


@pytest.fixture
def phantom_case():
    return generate_phantom(PhantomSpec(seed=0))


@pytest.fixture
def tiny_net_cfg():
    """Small enough for a forward/backward pass in well under a second on CPU."""
    return NetworkConfig(base_width=4, depth=3, seed=0)


@pytest.fixture
def sample_batch():
    """One preprocessed phantom as a (1, 4, 32, 32, 32) image and (1, 3, 32, 32, 32) target."""
    volume, labels = generate_phantom(PhantomSpec(seed=1))
    volume, labels = preprocess(volume, labels, (32, 32, 32), train=False, seed=0)
    image = torch.from_numpy(volume.intensities).unsqueeze(0)
    target = torch.from_numpy(nested_targets(labels).stack()).unsqueeze(0)
    return image, target


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    generate_dataset(out, num_cases=6, seed=3)
    return out


@pytest.fixture
def tiny_experiment():
    """Desk preset shrunk to a few cases, a narrow network and one epoch."""
    exp = desk_preset(seed=0)
    exp.data = replace(exp.data, num_cases=6, split=(0.5, 0.17, 0.33))
    exp.network = replace(exp.network, base_width=4, depth=3)
    exp.train = replace(
        exp.train, epochs=1, cosine_decay_start_epoch=1, teacher_epochs=None, teacher_cosine_decay_start_epoch=None
    )
    exp.validate()
    return exp
