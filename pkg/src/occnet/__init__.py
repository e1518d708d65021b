"""Recurrent convolutional networks for occluded object recognition.

Scene generation (occluded stereo digit scenes), six architecture
presets (B, B-F, B-K, BT, BL, BLT) trained by backpropagation through
time, and the paired-classifier evaluation statistics (McNemar tests
with Benjamini-Hochberg FDR control, softmax time-course analysis).
"""

from .backend import backend_info
from .network import ModelSpec, PRESET_NAMES, count_params, forward_unrolled, init_params, preset

__version__ = "0.1.0"

__all__ = [
    "ModelSpec",
    "PRESET_NAMES",
    "backend_info",
    "count_params",
    "forward_unrolled",
    "init_params",
    "preset",
    "__version__",
]
