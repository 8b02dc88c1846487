import numpy as np
import pytest
import torch

# fixed thread count keeps torch results reproducible run-to-run
torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, shape=(4, 5, 6), dtype_tag="f32"):
    from pseudovol import Volume3D

    if dtype_tag == "f32":
        data = rng.uniform(0, 100, size=shape).astype(np.float32)
    elif dtype_tag == "u8":
        data = rng.integers(0, 256, size=shape).astype(np.uint8)
    else:
        data = rng.integers(0, 65536, size=shape).astype(np.uint16)
    vs = tuple(rng.uniform(0.1, 3.0, size=3))
    return Volume3D(data, voxel_size=vs, dtype_tag=dtype_tag)
