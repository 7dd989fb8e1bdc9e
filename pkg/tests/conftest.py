import numpy as np
import pytest

from idspn.encoders import EncoderParams


def identity_encoder(d: int, pool: str = "sum", shift: float = 100.0) -> EncoderParams:
    """Encoder computing pool(Y) exactly: identity affine stack kept in the
    ReLU-active region by a bias shift (valid for entries > -shift)."""
    return EncoderParams(
        w1=np.eye(d),
        b1=shift * np.ones(d),
        w2=np.eye(d),
        b2=-shift * np.ones(d),
        pool=pool,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
