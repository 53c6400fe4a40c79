import numpy as np
import pytest

from pathrobust.data import generate_synthetic, split
from pathrobust.models import SmallCNN
from pathrobust.training import TrainConfig, train_standard

QUICK_SEED = 777


@pytest.fixture(scope="session")
def quick_data():
    """Small synthetic set shared by attack/metric tests: 200 train / 40 test."""
    ds = generate_synthetic(240, seed=QUICK_SEED)
    return split(ds, 200 / 240, seed=QUICK_SEED)


@pytest.fixture(scope="session")
def quick_model(quick_data):
    train_ds, _ = quick_data
    model = SmallCNN.init(classes=2, seed=QUICK_SEED)
    train_standard(model, train_ds, TrainConfig(total_passes=400, batch_size=25, lr=0.08, seed=QUICK_SEED))
    return model
