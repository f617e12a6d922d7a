"""Simultaneous-masking psychoacoustic model (MPEG-1 model 1).

Pipeline per frame: SPL-normalized PSD, tonal and noise masker detection,
decimation, individual masking thresholds, global masking threshold, and the
perceptual weights derived from the signal-to-mask ratio.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .spectral import DB_FLOOR, PowerSpectrumDb, bin_frequencies, psd_spl

LN10 = np.log(10.0)


@dataclass(frozen=True)
class PamConfig:
    """Model constants; the defaults are the usual model-1 values."""

    tonal_index_slope: float = 0.275
    tonal_index_offset: float = -6.025
    noise_index_slope: float = 0.175
    noise_index_offset: float = -2.025
    tonal_prominence_db: float = 7.0
    decimation_bark: float = 0.5
    min_tonal_hz: float = 170.0
    # neighbourhood half-widths (in bins at 44.1 kHz / 512-point FFT) and their upper band edges
    neighbourhood_edges_hz: tuple = (5500.0, 11000.0)
    neighbourhood_widths: tuple = (2, 3, 6)
    reference_bin_hz: float = 44100.0 / 512.0


DEFAULT_CONFIG = PamConfig()


def bark(f):
    """Critical-band rate in Bark for frequency ``f`` in Hz."""
    f = np.asarray(f, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def ath_db(f):
    """Absolute threshold of hearing in dB SPL at ``f`` Hz (``f > 0``)."""
    k = np.asarray(f, dtype=np.float64) / 1000.0
    return 3.64 * k ** -0.8 - 6.5 * np.exp(-0.6 * (k - 3.3) ** 2) + 1e-3 * k ** 4


@dataclass
class AbsoluteThreshold:
    q: np.ndarray
    bin_hz: float


def absolute_threshold(bin_hz: float, n_bins: int) -> AbsoluteThreshold:
    """Threshold in quiet on the FFT bin grid; bin 0 takes the value of bin 1."""
    if bin_hz <= 0:
        raise ValueError("bin spacing must be positive")
    f = np.arange(n_bins) * bin_hz
    q = np.empty(n_bins)
    q[1:] = ath_db(f[1:])
    q[0] = q[1] if n_bins > 1 else ath_db(bin_hz)
    return AbsoluteThreshold(q, bin_hz)


@dataclass
class Masker:
    bin: int
    level: float
    kind: str
    bark: float


@dataclass
class MaskerSet:
    maskers: list = field(default_factory=list)

    @property
    def tonal(self) -> list:
        return [m for m in self.maskers if m.kind == "tonal"]

    @property
    def noise(self) -> list:
        return [m for m in self.maskers if m.kind == "noise"]

    def __len__(self):
        return len(self.maskers)


@dataclass
class IndividualThresholds:
    u: np.ndarray  # (F, R) tonal
    v: np.ndarray  # (F, B) noise


@dataclass
class GlobalMask:
    m: np.ndarray


@dataclass
class PerceptualWeights:
    w: np.ndarray


def neighbourhood_widths(n_bins: int, bin_hz: float, cfg: PamConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Tonal-prominence half-width per bin, rescaled to the active bin spacing.

    Bins below ``cfg.min_tonal_hz`` get width 0 and cannot host a tonal masker.
    """
    f = np.arange(n_bins) * bin_hz
    scale = cfg.reference_bin_hz / bin_hz
    widths = np.array([max(2, int(round(w * scale))) for w in cfg.neighbourhood_widths])
    band = np.searchsorted(np.asarray(cfg.neighbourhood_edges_hz), f, side="right")
    out = widths[band].astype(np.int64)
    out[f < cfg.min_tonal_hz] = 0
    return out


def _power_sum_db(levels_db) -> float:
    levels_db = np.asarray(levels_db, dtype=np.float64)
    return float(10.0 * np.log10(np.sum(10.0 ** (0.1 * levels_db))))


def detect_maskers(psd: PowerSpectrumDb, cfg: PamConfig = DEFAULT_CONFIG) -> MaskerSet:
    """Find tonal and noise maskers in one frame and decimate them."""
    p = np.asarray(psd.values, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("detect_maskers works on one frame at a time")
    n_bins = p.shape[0]
    bin_hz = psd.bin_hz
    freqs = np.arange(n_bins) * bin_hz
    z = bark(freqs)
    widths = neighbourhood_widths(n_bins, bin_hz, cfg)

    peaks = kernels.tonal_peaks(p, widths, cfg.tonal_prominence_db)
    maskers = []
    consumed = np.zeros(n_bins, dtype=bool)
    for k in peaks:
        level = _power_sum_db(p[k - 1:k + 2])
        maskers.append(Masker(int(k), level, "tonal", float(z[k])))
        w = widths[k]
        consumed[max(0, k - w):k + w + 1] = True

    band_of_bin = np.floor(z).astype(np.int64)
    for b in np.unique(band_of_bin):
        in_band = np.flatnonzero(band_of_bin == b)
        free = in_band[~consumed[in_band]]
        if free.size == 0:
            continue
        nz = np.maximum(in_band, 1)
        centre = int(round(float(np.exp(np.mean(np.log(nz))))))
        centre = min(max(centre, int(in_band[0])), int(in_band[-1]))
        maskers.append(Masker(centre, _power_sum_db(p[free]), "noise", float(z[centre])))

    return MaskerSet(decimate(maskers, absolute_threshold(bin_hz, n_bins).q, cfg))


def decimate(maskers: list, q: np.ndarray, cfg: PamConfig = DEFAULT_CONFIG) -> list:
    """Drop maskers below the threshold in quiet, then keep only the strongest
    masker within any ``cfg.decimation_bark`` window.

    Ties in level go to the lower bin. The result is sorted by bin.
    """
    audible = [m for m in maskers if m.level >= q[m.bin]]
    audible.sort(key=lambda m: (-m.level, m.bin))
    kept = []
    for m in audible:
        if all(abs(m.bark - o.bark) >= cfg.decimation_bark for o in kept):
            kept.append(m)
    kept.sort(key=lambda m: (m.bin, m.kind))
    return kept


def individual_thresholds(maskers: MaskerSet, n_bins: int, bin_hz: float,
                          cfg: PamConfig = DEFAULT_CONFIG) -> IndividualThresholds:
    """Per-masker threshold curves in dB; entries outside [-3, 8) Bark are at the dB floor."""
    z = bark(np.arange(n_bins) * bin_hz)

    def curves(group, slope, offset):
        if not group:
            return np.zeros((n_bins, 0))
        zm = np.array([m.bark for m in group])
        lv = np.array([m.level for m in group])
        return kernels.spread_thresholds(z, zm, lv, slope, offset, DB_FLOOR)

    u = curves(maskers.tonal, cfg.tonal_index_slope, cfg.tonal_index_offset)
    v = curves(maskers.noise, cfg.noise_index_slope, cfg.noise_index_offset)
    return IndividualThresholds(u, v)


def global_mask(thr: IndividualThresholds, q: AbsoluteThreshold | np.ndarray) -> GlobalMask:
    """Power sum of the threshold in quiet and every individual threshold, in dB."""
    qv = q.q if isinstance(q, AbsoluteThreshold) else np.asarray(q, dtype=np.float64)
    if thr.u.shape[0] != qv.shape[0] or thr.v.shape[0] != qv.shape[0]:
        raise ValueError("threshold matrices and absolute threshold disagree on bin count")
    # factor out Q so that m >= Q holds exactly in floating point, and m == Q with no maskers
    rel = np.sum(10.0 ** (0.1 * (thr.u - qv[:, None])), axis=1)
    rel = rel + np.sum(10.0 ** (0.1 * (thr.v - qv[:, None])), axis=1)
    return GlobalMask(qv + 10.0 * np.log10(1.0 + rel))


def perceptual_weights(p: PowerSpectrumDb | np.ndarray, m: GlobalMask | np.ndarray) -> PerceptualWeights:
    """w = log10(10^(p/10) / 10^(m/10) + 1), computed without overflow."""
    pv = p.values if isinstance(p, PowerSpectrumDb) else np.asarray(p, dtype=np.float64)
    mv = m.m if isinstance(m, GlobalMask) else np.asarray(m, dtype=np.float64)
    if pv.shape != mv.shape:
        raise ValueError(f"PSD shape {pv.shape} does not match mask shape {mv.shape}")
    return PerceptualWeights(np.logaddexp(0.0, 0.1 * LN10 * (pv - mv)) / LN10)


@dataclass
class PamAnalysis:
    """Everything the model derives from one reference frame."""

    psd: PowerSpectrumDb
    ath: AbsoluteThreshold
    maskers: MaskerSet
    thresholds: IndividualThresholds
    mask: GlobalMask
    weights: PerceptualWeights

    @property
    def n_bins(self) -> int:
        return self.psd.values.shape[0]

    def to_dict(self) -> dict:
        bin_hz = self.psd.bin_hz
        return {
            "bin_hz": bin_hz,
            "norm_offset_db": self.psd.norm_offset,
            "psd_db": self.psd.values.tolist(),
            "ath_db": self.ath.q.tolist(),
            "mask_db": self.mask.m.tolist(),
            "weights": self.weights.w.tolist(),
            "maskers": [
                {"bin": m.bin, "hz": m.bin * bin_hz, "bark": m.bark, "level_db": m.level, "kind": m.kind}
                for m in self.maskers.maskers
            ],
            "tonal_thresholds_db": self.thresholds.u.T.tolist(),
            "noise_thresholds_db": self.thresholds.v.T.tolist(),
        }


def analyze_frame(frame, sample_rate: float = 44100, cfg: PamConfig = DEFAULT_CONFIG) -> PamAnalysis:
    psd = psd_spl(frame, sample_rate)
    n_bins = psd.values.shape[0]
    ath = absolute_threshold(psd.bin_hz, n_bins)
    maskers = detect_maskers(psd, cfg)
    thr = individual_thresholds(maskers, n_bins, psd.bin_hz, cfg)
    mask = global_mask(thr, ath)
    return PamAnalysis(psd, ath, maskers, thr, mask, perceptual_weights(psd, mask))


@dataclass
class PamBatch:
    """Stop-gradient model outputs for a batch of reference frames, shape ``(n, F)``."""

    weights: np.ndarray
    mask_db: np.ndarray
    psd_db: np.ndarray
    norm_offset: float
    sample_rate: float

    @property
    def mask_power(self) -> np.ndarray:
        return 10.0 ** (0.1 * self.mask_db)


def analyze_frames(frames, sample_rate: float = 44100, cfg: PamConfig = DEFAULT_CONFIG) -> PamBatch:
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    results = [analyze_frame(f, sample_rate, cfg) for f in frames]
    return PamBatch(
        weights=np.stack([r.weights.w for r in results]),
        mask_db=np.stack([r.mask.m for r in results]),
        psd_db=np.stack([r.psd.values for r in results]),
        norm_offset=results[0].psd.norm_offset,
        sample_rate=sample_rate,
    )


__all__ = [
    "PamConfig", "bark", "ath_db", "absolute_threshold", "AbsoluteThreshold", "Masker", "MaskerSet",
    "IndividualThresholds", "GlobalMask", "PerceptualWeights", "detect_maskers", "decimate",
    "individual_thresholds", "global_mask", "perceptual_weights", "analyze_frame", "analyze_frames",
    "PamAnalysis", "PamBatch", "bin_frequencies", "neighbourhood_widths",
]
