from __future__ import annotations

import numpy as np
import pytest

from smkd.data import AugmentParams, LabeledDataset, generate_synthetic
from smkd.head import HeadConfig
from smkd.trainer import TrainConfig
from smkd.vit import VitConfig

TINY_VIT = VitConfig(image_size=16, patch_size=4, embed_dim=16, depth=1, num_heads=2, mlp_ratio=2.0)
TINY_HEAD = HeadConfig(in_dim=16, hidden_dim=32, bottleneck_dim=16, out_dim=32)


def tiny_config(**kw) -> TrainConfig:
    base = dict(
        epochs=1,
        batch_size=8,
        warmup_epochs=0,
        vit=TINY_VIT,
        head=TINY_HEAD,
        augment=AugmentParams(output_size=16),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_data() -> LabeledDataset:
    """Eight 16px images, two from each of four classes."""
    ds = generate_synthetic(n_classes=8, per_class=2, image_size=16, seed=3)
    keep = np.isin(ds.labels, [0, 1, 2, 3])
    return LabeledDataset(ds.images[keep], ds.labels[keep], "base", ds.class_names)
