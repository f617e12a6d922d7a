import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

SR = 44100
T = 512


def tone_mix(rng, n=T, sr=SR, tones=(3, 8), amp=(0.02, 0.3), freq=(100.0, 8000.0)):
    """A frame of a few random sinusoids, the test material used throughout."""
    t = np.arange(n)
    x = np.zeros(n)
    for _ in range(rng.integers(*tones)):
        x += rng.uniform(*amp) * np.sin(2 * np.pi * rng.uniform(*freq) * t / sr + rng.uniform(0, 2 * np.pi))
    return x


def on_bin_sine(k, amp=1.0, n=T, phase=0.0):
    return amp * np.cos(2 * np.pi * k * np.arange(n) / n + phase)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient(s, recons, targets, cfg, pam, h=1e-5):
    """Central finite differences of the single-frame blended loss, one
    coordinate at a time, evaluated as a single batch of perturbed frames."""
    from psycal.loss import frame_losses
    from psycal.pam import PamBatch

    n_mod, n = recons.shape
    m = n_mod * n
    eye = np.eye(m).reshape(m, n_mod, n).transpose(1, 0, 2) * h
    base = np.broadcast_to(recons[:, None, :], (n_mod, m, n))
    tiled_s = np.broadcast_to(s, (m, n))
    tiled_t = np.broadcast_to(targets[:, None, :], (n_mod, m, n))
    tiled_pam = None
    if pam is not None:
        tiled_pam = PamBatch(np.repeat(pam.weights, m, 0), np.repeat(pam.mask_db, m, 0),
                             np.repeat(pam.psd_db, m, 0), pam.norm_offset, pam.sample_rate)
    plus, _ = frame_losses(tiled_s, base + eye, cfg, tiled_pam, tiled_t, grad=False)
    minus, _ = frame_losses(tiled_s, base - eye, cfg, tiled_pam, tiled_t, grad=False)
    return ((plus - minus) / (2 * h)).reshape(n_mod, n)


def l4_well_separated(s, recons, pam, margin=1e-3):
    """True when the frame's NMR maximum is clear of both the ReLU kink and any tie."""
    from psycal.loss import noise_to_mask
    nmr = noise_to_mask(s, recons.sum(axis=0), pam.mask_db[0], pam.norm_offset)
    top2 = np.sort(nmr)[-2:]
    return abs(top2[1] - 1.0) > margin and top2[0] < (1 - margin) * top2[1]
