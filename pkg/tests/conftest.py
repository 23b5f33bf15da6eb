import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def two_step():
    from mcldm.schedules import Schedule

    return Schedule.from_betas([0.1, 0.2], kind="linear")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    from mcldm.data import generate_dataset

    return generate_dataset(120, seed=11)


@pytest.fixture(scope="session")
def tiny_codec(tiny_data):
    from mcldm.codec import VQCodec

    return VQCodec(hidden=16, n_codes=16, epochs=2, batch_size=32).fit(tiny_data.images)


@pytest.fixture(scope="session")
def make_ldm(tiny_codec):
    """Factory for small diffusion models sharing the session codec."""
    from mcldm.ldm import LatentDiffusion

    def make(mode="uncond", **kw):
        params = dict(codec=tiny_codec, mode=mode, timesteps=100, epochs=2, batch_size=32,
                      lr=1e-3, base_channels=16, sample_steps=5)
        params.update(kw)
        return LatentDiffusion(**params)

    return make


@pytest.fixture(scope="session")
def fitted_multi(make_ldm, tiny_data):
    return make_ldm("multi").fit(tiny_data.images, tiny_data.attrs, tiny_data.masks)
