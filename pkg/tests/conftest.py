import numpy as np
import pytest

from fmtforge.model import FmtConfig


def toy_config(**overrides) -> FmtConfig:
    """Small model used for architecture and gradient tests."""
    base = dict(
        d=16,
        heads=2,
        image_hw=16,
        patch=8,
        t_img=2,
        t_ft=4,
        ft_raw_len=16,
        cross_layers=1,
        ffn_mult=2,
        action_dim=3,
        horizon=4,
        exec_horizon=2,
        head_layers=1,
        step_embed_dim=16,
    )
    base.update(overrides)
    return FmtConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
