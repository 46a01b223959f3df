"""Desk-scale workbench for low-precision training and inference numerics.

Modules: :mod:`numerics` (formats, rounding, Philox), :mod:`blockquant`
(micro-block quantization, RHT), :mod:`qtrain` (fake-quantized linear
steps), :mod:`moe` (routing and cost model), :mod:`autoquant` (exact
mixed-precision assignment), :mod:`ssmsim` (recurrent cache quantization),
:mod:`specdec` (speculative decoding accounting), :mod:`merge` (checkpoint
averaging) and :mod:`cli`.
"""

from .blockquant import BlockQuantizer, RandomHadamardTransform
from .tensorio import read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = ["BlockQuantizer", "RandomHadamardTransform", "read_tensor", "write_tensor", "__version__"]
