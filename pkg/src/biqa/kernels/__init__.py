"""Hot convolution kernels with an import-time backend choice.

Two interchangeable implementations exist: compiled Cython loop nests and a
NumPy version built from nine shifted matmuls. The NumPy one rides whatever
BLAS numpy links against and is the faster choice on typical installs (see
benchmarks/bench_conv.py for measurements), so it is the default. Set
BIQA_KERNELS=cython to select the compiled core instead; it wins at very
small channel counts and on BLAS-less environments. BIQA_KERNELS=numpy
forces the default explicitly.
"""

import os

from biqa.kernels import _conv_numpy

_choice = os.environ.get("BIQA_KERNELS", "numpy")
if _choice == "cython":
    from biqa.kernels import _conv_ext as _impl
    BACKEND = "cython"
elif _choice == "numpy":
    _impl = _conv_numpy
    BACKEND = "numpy"
else:
    raise ImportError(f"BIQA_KERNELS must be 'numpy' or 'cython', not {_choice!r}")

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward

__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward"]
