import numpy as np
import pytest

from fvstack.descriptor_io import ChannelSpec, DescriptorSet


def make_set(n=20, dims=(("A", 4), ("B", 3)), seed=0, video_id="v0", labels=(1,)):
    rng = np.random.default_rng(seed)
    channels = tuple(ChannelSpec(name, d) for name, d in dims)
    return DescriptorSet(
        video_id=video_id,
        labels=frozenset(labels),
        channels=channels,
        coords=rng.random((n, 3)),
        values={c.name: rng.standard_normal((n, c.raw_dim)) for c in channels},
    )


@pytest.fixture
def small_set():
    return make_set()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
