"""Backend cross-checks: compiled and NumPy convolution kernels must agree."""

import numpy as np
import pytest

from biqa import kernels
from biqa.kernels import _conv_numpy

_ext = pytest.importorskip("biqa.kernels._conv_ext", reason="compiled kernels unavailable")


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
@pytest.mark.parametrize("shape,cout", [((2, 5, 4, 3), 6), ((1, 1, 1, 2), 3), ((3, 8, 8, 4), 4)])
def test_backends_agree(dtype, tol, shape, cout):
    rng = np.random.default_rng(42)
    x = rng.standard_normal(shape).astype(dtype)
    k = rng.standard_normal((3, 3, shape[3], cout)).astype(dtype)
    b = rng.standard_normal(cout).astype(dtype)
    f_ext = _ext.conv2d_forward(x, k, b)
    f_np = _conv_numpy.conv2d_forward(x, k, b)
    assert f_ext.dtype == f_np.dtype == dtype
    np.testing.assert_allclose(f_ext, f_np, atol=tol)

    g = np.ascontiguousarray(rng.standard_normal(f_ext.shape).astype(dtype))
    for a, c in zip(_ext.conv2d_backward(x, k, g), _conv_numpy.conv2d_backward(x, k, g)):
        np.testing.assert_allclose(a, c, atol=tol * 10)


def test_selected_backend_exposed():
    assert kernels.BACKEND in ("cython", "numpy")
    assert callable(kernels.conv2d_forward)
