"""Hann-windowed magnitude spectra, SPL-referenced power spectral density and mel spectra.

All functions accept a single frame of shape ``(T,)`` or a batch ``(n, T)``
and operate along the last axis.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

FULL_SCALE_SPL = 96.0
DB_FLOOR = -200.0
DEFAULT_MEL_BANDS = 40


@lru_cache(maxsize=16)
def _hann(n: int) -> np.ndarray:
    # periodic Hann: an on-bin sinusoid leaks into exactly its two neighbours
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def hann_window(n: int) -> np.ndarray:
    return _hann(n)


def bin_frequencies(n_fft: int, sample_rate: float) -> np.ndarray:
    return np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)


def spl_offset(n_fft: int) -> float:
    """dB offset that puts the peak of a full-scale on-bin sinusoid at 96 dB SPL.

    Under the periodic Hann window that peak has magnitude ``n_fft / 4``.
    """
    return FULL_SCALE_SPL - 20.0 * np.log10(n_fft / 4.0)


@dataclass
class MagnitudeSpectrum:
    values: np.ndarray
    bin_hz: float


@dataclass
class PowerSpectrumDb:
    values: np.ndarray
    norm_offset: float
    bin_hz: float


@dataclass
class MelSpectrum:
    values: np.ndarray

    @property
    def band_count(self) -> int:
        return self.values.shape[-1]


def analysis_fft(frames: np.ndarray, window: bool = True) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if window:
        frames = frames * _hann(frames.shape[-1])
    return np.fft.rfft(frames, axis=-1)


def magnitude_spectrum(frame, sample_rate: float = 44100, window: bool = True) -> MagnitudeSpectrum:
    x = frame.samples if hasattr(frame, "samples") else np.asarray(frame, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("frame must contain at least two samples")
    return MagnitudeSpectrum(np.abs(analysis_fft(x, window)), sample_rate / n)


def power_to_db(power: np.ndarray, offset: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        db = offset + 10.0 * np.log10(power)
    return np.maximum(db, DB_FLOOR)


def psd_spl(frame, sample_rate: float = 44100) -> PowerSpectrumDb:
    """Log power spectral density in dB SPL, floored at -200 dB."""
    x = frame.samples if hasattr(frame, "samples") else np.asarray(frame, dtype=np.float64)
    n = x.shape[-1]
    offset = spl_offset(n)
    power = np.abs(analysis_fft(x)) ** 2
    return PowerSpectrumDb(power_to_db(power, offset), offset, sample_rate / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=32)
def _mel_filterbank(bands: int, n_fft: int, sample_rate: float, norm: str) -> np.ndarray:
    n_bins = n_fft // 2 + 1
    if bands < 1:
        raise ValueError("need at least one mel band")
    if bands > n_bins:
        raise ValueError(f"{bands} mel bands exceed the {n_bins} spectrum bins")
    freqs = bin_frequencies(n_fft, sample_rate)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), bands + 2))
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (centre - lo)
    falling = (hi - freqs) / (hi - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if norm == "area":
        sums = fb.sum(axis=1)
        if np.any(sums == 0.0):
            raise ValueError(
                f"{int(np.sum(sums == 0))} of {bands} mel filters cover no FFT bin at "
                f"n_fft={n_fft}, sample_rate={sample_rate}; use fewer bands or a longer FFT")
        fb = fb / sums[:, None]
    elif norm != "unity":
        raise ValueError(f"unknown filterbank norm {norm!r}")
    fb.setflags(write=False)
    return fb


def mel_filterbank(bands: int = DEFAULT_MEL_BANDS, n_fft: int = 512, sample_rate: float = 44100,
                   norm: str = "area") -> np.ndarray:
    """Triangular mel filterbank of shape ``(bands, n_fft // 2 + 1)``.

    ``norm="unity"`` keeps peak-one triangles that sum to one across the
    covered range; ``norm="area"`` scales every row to unit sum so a flat
    power spectrum yields equal band energies.
    """
    return _mel_filterbank(int(bands), int(n_fft), float(sample_rate), norm)


def mel_spectrum(mag: MagnitudeSpectrum | np.ndarray, bands: int = DEFAULT_MEL_BANDS,
                 sample_rate: float | None = None, norm: str = "area") -> MelSpectrum:
    """Mel-band energies of the power spectrum ``mag ** 2``."""
    if isinstance(mag, MagnitudeSpectrum):
        values = mag.values
        n_fft = 2 * (values.shape[-1] - 1)
        rate = sample_rate if sample_rate is not None else mag.bin_hz * n_fft
    else:
        values = np.asarray(mag, dtype=np.float64)
        n_fft = 2 * (values.shape[-1] - 1)
        rate = sample_rate if sample_rate is not None else 44100
    fb = mel_filterbank(bands, n_fft, rate, norm)
    return MelSpectrum((values ** 2) @ fb.T)


def export_spectrum_csv(path: str | Path, values: np.ndarray, bin_hz: float, header: str = "value") -> None:
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "hz", header])
        for k, v in enumerate(values):
            writer.writerow([k, repr(k * bin_hz), repr(float(v))])
