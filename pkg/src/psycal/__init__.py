"""Psychoacoustic calibration of loss functions for neural audio coding.

Masking analysis, the four perceptual loss terms with analytic gradients,
soft-to-hard quantization with rate control, and a small residual linear
codec used to exercise them.
"""
from .audio import AudioClip, Frame, frame_signal, overlap_add, read_wav, write_wav
from .codec import (ResidualStack, cmrl_decode, cmrl_encode, greedy_nmr_allocate,
                    optimize_reconstruction, train_stack)
from .kernels import BACKEND
from .loss import LossConfig, grad_total_loss, total_loss
from .pam import analyze_frame, analyze_frames
from .quantizer import Codebook, RateController, soft_assign

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "Frame", "frame_signal", "overlap_add", "read_wav", "write_wav",
    "ResidualStack", "cmrl_encode", "cmrl_decode", "greedy_nmr_allocate",
    "optimize_reconstruction", "train_stack", "BACKEND", "LossConfig", "total_loss",
    "grad_total_loss", "analyze_frame", "analyze_frames", "Codebook", "RateController",
    "soft_assign", "__version__",
]
