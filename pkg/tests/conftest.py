import pytest
import torch

from siamrel.bench.synth import SequenceSpec, gen_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    return gen_dataset(SequenceSpec(n_frames=12, canvas=(160, 200)), 3, seed=5)
