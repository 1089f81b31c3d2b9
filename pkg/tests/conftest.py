import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crossshape import tensorgrad as tg
from crossshape.backbone import TrunkConfig
from crossshape.compatibility import CompatConfig
from crossshape.config import RunConfig
from crossshape.geometry import LabeledPointCloud, ShapeSpec, generate_shape, subsample_points
from crossshape.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_model_config(num_classes: int = 3, edge_k: int = 3) -> ModelConfig:
    """Model small enough for exhaustive finite differences."""
    return ModelConfig(
        num_classes=num_classes,
        trunk=TrunkConfig(widths=(8, 8, 16, 32), edge_k=edge_k, groups=4),
        head_widths=(16, 16, 8, 8),
        dropout=0.5,
        compat=CompatConfig(trunk=TrunkConfig(widths=(8, 8, 8, 8), edge_k=edge_k, groups=4), embed=8),
    )


def tiny_shape(family: str, seed: int, n_points: int = 8, num_classes: int = 3) -> LabeledPointCloud:
    """A generated shape cut down to ``n_points`` with labels folded into ``num_classes``."""
    cloud, _ = subsample_points(generate_shape(ShapeSpec(family, 64, seed)), n_points, seed)
    return LabeledPointCloud(cloud.positions, cloud.labels % num_classes, num_classes, f"{family}{seed}")


def toy_run_config(**train) -> RunConfig:
    cfg = RunConfig()
    cfg.data.n_train, cfg.data.n_val, cfg.data.n_test = 6, 3, 3
    cfg.data.n_points = cfg.data.test_points = 64
    cfg.model = ModelConfig(
        num_classes=4,
        trunk=TrunkConfig(widths=(16, 16, 32, 32), edge_k=8),
        head_widths=(64, 32, 32, 16),
        compat=CompatConfig(trunk=TrunkConfig(widths=(16, 16, 16, 16), edge_k=8), embed=32),
    )
    cfg.train.patience = 2
    cfg.train.max_epochs = 3
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def node(tape: tg.Tape, value, name=None, grad=False):
    return tape.leaf(np.asarray(value), name=name, requires_grad=grad)
