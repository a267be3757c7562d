"""Sparse 3D tensor engine with reverse-mode gradients and the S3Net segmentation network."""

from .autodiff import Parameter, Tape, Var, adam_step, exp_lr
from .coords import CoordinateMap, KernelMap, KernelOffsets, build_kernel_map, build_kernel_offsets, quantize_points, stride_coordinates
from .modules import NetworkConfig, S3Net
from .sparse_ops import SparseTensor

__version__ = "0.1.0"
