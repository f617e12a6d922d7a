"""Backend selection for the hot kernels.

The compiled Cython module is used when it was built; otherwise, or when the
environment variable ``PSYCAL_PURE_PYTHON`` is set to a non-empty value, the
pure-Python versions are used. ``BACKEND`` names the active one.
"""
import os

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

if not os.environ.get("PSYCAL_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if _active is compiled_backend else "python"

tonal_peaks = _active.tonal_peaks
spread_thresholds = _active.spread_thresholds
huffman_pack = _active.huffman_pack
huffman_unpack = _active.huffman_unpack
greedy_allocate = _active.greedy_allocate

__all__ = [
    "BACKEND",
    "compiled_backend",
    "python_backend",
    "tonal_peaks",
    "spread_thresholds",
    "huffman_pack",
    "huffman_unpack",
    "greedy_allocate",
]
