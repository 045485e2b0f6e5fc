import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from partlens import scenes


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small 2-category dataset shared by unit tests that need real data."""
    out = tmp_path_factory.mktemp("tiny") / "dataset"
    manifest = scenes.generate_dataset(
        out, seed=13, num_scenes=60, num_categories=2, parts_per_category=3
    )
    return out / "manifest.json", manifest


@pytest.fixture(scope="session")
def tiny_performer(tmp_path_factory, tiny_dataset):
    """A briefly trained performer checkpoint over the tiny dataset."""
    from partlens.performer import train_performer

    manifest_path, _ = tiny_dataset
    out = tmp_path_factory.mktemp("tiny_perf") / "performer"
    ckpt, metrics = train_performer(
        manifest_path, out, seed=13, epochs=4, batch_size=16, lr=0.08
    )
    return ckpt, metrics


def rng(seed):
    return np.random.default_rng(seed)
