"""Desk-scale masked-image-modeling pre-training.

Block-wise masking on raw images, low-resolution inputs, HOG or pixel
reconstruction targets, truncated encoders, configurable decoders,
progressive-resolution scheduling, and a cost/throughput bench, all on a
small numpy autodiff core with numba-accelerated image kernels.
"""

__version__ = "0.1.0"

from .config import RunConfig, preset  # noqa: F401
from .tensor import Tensor  # noqa: F401
