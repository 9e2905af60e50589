import numpy as np
import pytest

from csicomp.errors import ConfigError
from csicomp.nn import BatchNorm2d, Conv2d, Dense, LeakyReLU, Tanh, gradient_check


def test_dense(rng):
    assert gradient_check(Dense(6, 4, rng=rng), rng.standard_normal((3, 6))) < 1e-3


@pytest.mark.parametrize("c,f,k,shape", [
    (2, 3, 3, (1, 2, 5, 5)),
    (2, 3, 5, (2, 2, 6, 6)),
    (3, 2, 1, (2, 3, 4, 4)),
    (2, 17, 3, (1, 2, 5, 5)),   # patch-matrix route
])
def test_conv_small(rng, c, f, k, shape):
    assert gradient_check(Conv2d(c, f, k, rng=rng), rng.standard_normal(shape)) < 1e-3


def test_conv_wide_kernel(rng):
    # 16 filters of 16x7x7 over an 8x8 image, random coordinate subset
    layer = Conv2d(16, 16, 7, rng=rng)
    err = gradient_check(layer, rng.standard_normal((1, 16, 8, 8)), max_coords=300, rng=rng)
    assert err < 1e-3


def test_batchnorm(rng):
    assert gradient_check(BatchNorm2d(3), rng.standard_normal((2, 3, 4, 4))) < 1e-3


def test_leaky_relu_away_from_kink(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.where(np.abs(x) < 0.1, x + 0.25, x)
    assert gradient_check(LeakyReLU(0.3), x) < 1e-4


def test_tanh(rng):
    assert gradient_check(Tanh(), rng.standard_normal((2, 3, 4, 4))) < 1e-4


def test_step_range_enforced(rng):
    with pytest.raises(ConfigError):
        gradient_check(Dense(2, 2, rng=rng), rng.standard_normal((1, 2)), step=0.5)
    with pytest.raises(ConfigError):
        gradient_check(Dense(2, 2, rng=rng), rng.standard_normal((1, 2)), step=1e-5)
