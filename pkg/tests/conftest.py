import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from safekd.model import ClassifierModel, ModelConfig, clone_for_student  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_student(seed=0, embed_dim=4, hidden=5, num_classes=3, vocab=32):
    cfg = ModelConfig(vocab_size=vocab, embed_dim=embed_dim, backbone_hidden=hidden,
                      num_classes=num_classes, seed=seed)
    teacher = ClassifierModel.initialize(cfg)
    teacher.freeze_all()
    return teacher, clone_for_student(teacher, "random", seed=seed + 1)


@pytest.fixture
def pair():
    return small_student()
