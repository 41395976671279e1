"""Deformable convolution and deformable RoI pooling on NumPy, with analytic gradients."""

from .bilinear_sampler import Point2, SampleGrad, kernel_g, sample, sample_with_grad
from .conv_ops import (
    ConvSpec,
    conv2d,
    conv2d_backward,
    deform_conv2d,
    deform_conv2d_backward,
    grid_of,
    offset_branch_forward,
)
from .pool_ops import (
    BinOffsets,
    Roi,
    bin_span,
    deform_ps_roi_pool,
    deform_ps_roi_pool_backward,
    deform_roi_pool,
    deform_roi_pool_backward,
    ps_roi_pool,
    roi_offset_branch,
    roi_pool,
)
from .tensor_core import fill_random, load_tensor, read_tensor, save_tensor, write_tensor, zeros

__version__ = "0.1.0"
