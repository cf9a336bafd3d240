import numpy as np
import pytest
import torch

from xwd.ingestion import PhantomSpec, SamplingPlan, generate_phantoms, preprocess_volume, split_patients
from xwd.model import EncoderConfig
from xwd.partitions import ROLES
from xwd.training import TrainConfig
from xwd.windowing import WindowNormalizer, default_window_set, window_volume

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_encoder():
    return EncoderConfig(feature_dim=16, stage_channels=(8, 16), input_shape=(1, 4, 16, 16), se_reduction=4, blocks_per_stage=(1, 1), stem_channels=8)


@pytest.fixture(scope="session")
def quick_train():
    return TrainConfig(epochs=3, batch_size=4, seed=0)


def make_partitions(n=24, seed=0, hw=16, slices=4, windows=None):
    spec = PhantomSpec(n_patients=n, rng_seed=seed, shape=(slices + 2, hw, hw), lesion_radius=3.0)
    vols = generate_phantoms(spec)
    plan = SamplingPlan("diffuse", slices, 0.0, 0.1)
    ws = windows or default_window_set("diffuse")
    stacks = {v.patient_id: window_volume(preprocess_volume(v, plan, (hw, hw)), ws) for v in vols}
    split = split_patients(vols, (0.5, 0.25, 0.25), seed)
    parts = {role: cls.from_stacks([stacks[p] for p in getattr(split, role)]) for role, cls in ROLES.items()}
    norm = WindowNormalizer(ws).fit(parts["train"])
    return {role: norm.transform(p) for role, p in parts.items()}


@pytest.fixture(scope="session")
def small_parts():
    return make_partitions()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
