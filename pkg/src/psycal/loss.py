"""Time-domain, mel, priority-weighted and noise-modulation losses with analytic gradients.

Shapes: the reference ``s`` is ``(T,)`` or ``(n, T)`` for a batch of ``n``
frames. Module reconstructions ``recons`` and their residual targets are
sequences over the ``N`` cascaded modules, each element shaped like ``s``.
Internally everything is carried as ``(N, n, T)``.

Perceptual weights and the global mask come from the reference only and are
treated as constants when differentiating.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pam import PamBatch, analyze_frames
from .spectral import DEFAULT_MEL_BANDS, hann_window, mel_filterbank

TERMS = ("l1", "l2", "l3", "l4")
PRESETS = {
    "model-a": ("l1",),
    "model-b": ("l1", "l2"),
    "model-c": ("l1", "l2", "l3"),
    "model-d": ("l1", "l2", "l3", "l4"),
}


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    terms: tuple = PRESETS["model-d"]
    mel_bands: int = DEFAULT_MEL_BANDS
    sample_rate: float = 44100.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("blend weight must be nonnegative")
        unknown = set(self.terms) - set(TERMS)
        if unknown or "l1" not in self.terms:
            raise ValueError(f"terms must include l1 and be drawn from {TERMS}, got {self.terms}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "LossConfig":
        key = name.lower().replace("_", "-")
        if key not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(terms=PRESETS[key], **overrides)

    @property
    def needs_pam(self) -> bool:
        return "l3" in self.terms or "l4" in self.terms


@dataclass
class LossReport:
    l1: float
    l2: float
    l3: float
    l4: float
    total: float
    per_frame: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "l1": self.l1, "l2": self.l2, "l3": self.l3, "l4": self.l4, "total": self.total,
            "per_frame": self.per_frame,
        }


@dataclass
class LossGradient:
    g: np.ndarray  # (N, n, T) or (N, T) matching the input layout


# layout helpers

def _ref(s) -> tuple[np.ndarray, bool]:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        return s[None, :], True
    if s.ndim == 2:
        return s, False
    raise ValueError(f"reference must be (T,) or (n, T), got shape {s.shape}")


def _modules(x, like: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if like.shape[0] == 1 and x.ndim in (1, 2):
        x = x.reshape(-1, 1, x.shape[-1])
    if x.ndim != 3 or x.shape[1:] != like.shape:
        raise ValueError(f"module signals of shape {x.shape} do not match reference {like.shape}")
    return x


def cmrl_targets(s, recons) -> np.ndarray:
    """Residual target of every module: s minus everything decoded before it."""
    ref, single = _ref(s)
    rec = _modules(recons, ref)
    before = np.concatenate([np.zeros_like(rec[:1]), np.cumsum(rec, axis=0)[:-1]])
    out = ref[None] - before
    return out[:, 0] if single else out


def _backprop(y: np.ndarray, n: int) -> np.ndarray:
    """Map dLoss/dX (as the complex weights ``y`` on each rfft bin) back to the
    time samples of a Hann-windowed frame of length ``n``."""
    z = y.copy()
    z[..., 0] *= 2.0
    if n % 2 == 0:
        z[..., -1] *= 2.0
    return hann_window(n) * (0.5 * n) * np.fft.irfft(z, n=n, axis=-1)


def _fft(x: np.ndarray) -> np.ndarray:
    return np.fft.rfft(x * hann_window(x.shape[-1]), axis=-1)


def _require_pam(pam):
    if pam is None:
        raise ValueError("perceptual terms need model outputs (weights and mask) computed from the reference")


def _pam_arrays(pam, n_frames):
    w = np.atleast_2d(pam.weights)
    m = np.atleast_2d(pam.mask_db)
    if w.shape[0] != n_frames or m.shape[0] != n_frames:
        raise ValueError("model outputs do not match the number of frames")
    return w, m


# individual terms, per frame

def _l1(tgt, rec, grad):
    err = rec - tgt
    val = np.sum(err ** 2, axis=(0, 2))
    return val, (2.0 * err if grad else None)


def _l2(tgt, rec, bands, sample_rate, grad, xt=None, xr=None):
    n = tgt.shape[-1]
    fb = mel_filterbank(bands, n, sample_rate)
    xt = _fft(tgt) if xt is None else xt
    xr = _fft(rec) if xr is None else xr
    y = (np.abs(xt) ** 2) @ fb.T
    yh = (np.abs(xr) ** 2) @ fb.T
    d = yh - y
    val = np.sum(d ** 2, axis=(0, 2))
    if not grad:
        return val, None
    g_pow = (2.0 * d) @ fb
    return val, _backprop(g_pow * 2.0 * xr, n)


def _l3(tgt, rec, w, grad, xt=None, xr=None):
    n = tgt.shape[-1]
    xt = _fft(tgt) if xt is None else xt
    xr = _fft(rec) if xr is None else xr
    mt = np.abs(xt)
    mr = np.abs(xr)
    d = mr - mt
    val = np.sum(w[None] * d ** 2, axis=(0, 2))
    if not grad:
        return val, None
    g_mag = 2.0 * w[None] * d
    with np.errstate(invalid="ignore", divide="ignore"):
        phase = np.where(mr > 0.0, xr / np.where(mr > 0.0, mr, 1.0), 0.0)
    return val, _backprop(g_mag * phase, n)


def noise_to_mask(s, recon_sum, mask_db, norm_offset) -> np.ndarray:
    """Linear noise-to-mask ratio per bin for the error ``s - recon_sum``."""
    e = np.asarray(s, dtype=np.float64) - np.asarray(recon_sum, dtype=np.float64)
    power = np.abs(_fft(e)) ** 2
    return power * 10.0 ** (0.1 * (norm_offset - np.asarray(mask_db)))


def _l4(ref, rec, m_db, offset, grad):
    n = ref.shape[-1]
    e = ref - rec.sum(axis=0)
    xe = _fft(e)
    scale = 10.0 ** (0.1 * (offset - m_db))
    nmr = np.abs(xe) ** 2 * scale
    k = np.argmax(nmr, axis=-1)  # lowest index on ties
    rows = np.arange(nmr.shape[0])
    top = nmr[rows, k]
    val = np.maximum(top - 1.0, 0.0)
    if not grad:
        return val, None, k, top
    y = np.zeros_like(xe)
    active = val > 0.0
    y[rows[active], k[active]] = 2.0 * scale[rows[active], k[active]] * xe[rows[active], k[active]]
    g_e = _backprop(y, n)
    g = np.broadcast_to(-g_e, rec.shape).copy()
    return val, g, k, top


def _evaluate(s, recons, cfg: LossConfig, pam, targets, grad):
    ref, single = _ref(s)
    rec = _modules(recons, ref)
    tgt = cmrl_targets(ref, rec) if targets is None else _modules(targets, ref)
    if tgt.shape != rec.shape:
        raise ValueError("targets and reconstructions disagree in shape")
    n_frames = ref.shape[0]
    zero = np.zeros(n_frames)
    vals = {t: zero for t in TERMS}
    grads = {}
    extra = {"l4_bin": np.zeros(n_frames, dtype=np.int64), "l4_nmr": np.zeros(n_frames)}

    vals["l1"], grads["l1"] = _l1(tgt, rec, grad)
    needs_fft = {"l2", "l3"} & set(cfg.terms)
    xt = _fft(tgt) if needs_fft else None
    xr = _fft(rec) if needs_fft else None
    if "l2" in cfg.terms:
        vals["l2"], grads["l2"] = _l2(tgt, rec, cfg.mel_bands, cfg.sample_rate, grad, xt, xr)
    if cfg.needs_pam:
        _require_pam(pam)
        w, m_db = _pam_arrays(pam, n_frames)
        if "l3" in cfg.terms:
            vals["l3"], grads["l3"] = _l3(tgt, rec, w, grad, xt, xr)
        if "l4" in cfg.terms:
            vals["l4"], grads["l4"], extra["l4_bin"], extra["l4_nmr"] = _l4(ref, rec, m_db, pam.norm_offset, grad)
    return vals, grads, extra, single


def blend(vals: dict, cfg: LossConfig):
    """``l1 + lam * (enabled frequency-domain terms)``; works on scalars or per-frame arrays."""
    freq = sum(vals[t] for t in cfg.terms if t != "l1")
    return vals["l1"] + cfg.lam * freq


def frame_losses(s, recons, cfg: LossConfig, pam=None, targets=None, grad: bool = True):
    """Per-frame blended loss ``(n,)`` and, if requested, the gradient of each
    frame's own loss with respect to every module's reconstruction ``(N, n, T)``."""
    vals, grads, _, _ = _evaluate(s, recons, cfg, pam, targets, grad)
    total = blend(vals, cfg)
    if not grad:
        return total, None
    g = grads["l1"].copy()
    for t in cfg.terms:
        if t != "l1":
            g += cfg.lam * grads[t]
    return total, g


def total_loss(s, recons, cfg: LossConfig, pam=None, targets=None) -> LossReport:
    """Blended loss. L1-L3 are summed over frames, L4 is averaged over frames."""
    vals, _, extra, _ = _evaluate(s, recons, cfg, pam, targets, grad=False)
    l1, l2, l3 = (float(np.sum(vals[t])) for t in ("l1", "l2", "l3"))
    l4 = float(np.mean(vals["l4"]))
    per_frame = []
    totals = blend(vals, cfg)
    for j in range(len(totals)):
        row = {t: float(vals[t][j]) for t in TERMS}
        row["total"] = float(totals[j])
        if "l4" in cfg.terms:
            row["l4_bin"] = int(extra["l4_bin"][j])
            row["l4_nmr"] = float(extra["l4_nmr"][j])
        per_frame.append(row)
    return LossReport(l1, l2, l3, l4, blend({"l1": l1, "l2": l2, "l3": l3, "l4": l4}, cfg), per_frame)


def grad_total_loss(s, recons, cfg: LossConfig, pam=None, targets=None) -> LossGradient:
    """Analytic gradient of :func:`total_loss` with respect to each module's reconstruction.

    Targets are held fixed. The L4 subgradient flows through the largest-NMR
    bin only (lowest index on ties) and vanishes when that NMR is at most 1.
    """
    vals, grads, _, single = _evaluate(s, recons, cfg, pam, targets, grad=True)
    g = grads["l1"].copy()
    n_frames = g.shape[1]
    for t in cfg.terms:
        if t == "l1":
            continue
        part = grads[t] / n_frames if t == "l4" else grads[t]
        g += cfg.lam * part
    return LossGradient(g[:, 0] if single else g)


def term_losses(s, recons, cfg: LossConfig, pam=None, targets=None, grad: bool = True):
    """Unblended per-frame values ``{term: (n,)}`` and gradients ``{term: (N, n, T)}``.

    Terms outside ``cfg.terms`` are reported as zero and carry no gradient.
    """
    vals, grads, extra, _ = _evaluate(s, recons, cfg, pam, targets, grad)
    return vals, grads, extra


def loss_sse_time(targets, recons) -> float:
    t = np.asarray(targets, dtype=np.float64)
    r = np.asarray(recons, dtype=np.float64)
    if t.shape != r.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {r.shape}")
    return float(np.sum((r - t) ** 2))


def loss_mel(targets, recons, bands: int = DEFAULT_MEL_BANDS, sample_rate: float = 44100.0) -> float:
    t = np.asarray(targets, dtype=np.float64)
    r = np.asarray(recons, dtype=np.float64)
    if t.shape != r.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {r.shape}")
    n = t.shape[-1]
    return float(np.sum(_l2(t.reshape(-1, 1, n), r.reshape(-1, 1, n), bands, sample_rate, grad=False)[0]))


def loss_priority(targets, recons, weights) -> float:
    t = np.asarray(targets, dtype=np.float64)
    r = np.asarray(recons, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if t.shape != r.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {r.shape}")
    if w.shape[-1] != t.shape[-1] // 2 + 1:
        raise ValueError(f"{w.shape[-1]} weights for {t.shape[-1] // 2 + 1} bins")
    mt = np.abs(_fft(t))
    mr = np.abs(_fft(r))
    return float(np.sum(w * (mt - mr) ** 2))


def nmr_loss(nmr) -> tuple[float, int]:
    """max_f ReLU(nmr_f - 1) and the bin that attains it (lowest on ties)."""
    nmr = np.asarray(nmr, dtype=np.float64)
    k = int(np.argmax(nmr))
    return max(float(nmr[k]) - 1.0, 0.0), k


def loss_noise_modulation(s, recons, mask_db, norm_offset: float) -> tuple[float, int]:
    """Noise-modulation loss for one frame and its argmax bin."""
    recon_sum = np.sum(np.atleast_2d(np.asarray(recons, dtype=np.float64)), axis=0)
    return nmr_loss(noise_to_mask(s, recon_sum, mask_db, norm_offset))


def reference_pam(s, cfg: LossConfig) -> PamBatch | None:
    """Model outputs for the reference, or None when the preset does not use them."""
    if not cfg.needs_pam:
        return None
    return analyze_frames(s, cfg.sample_rate)


def audible_bins(s, recon_sum, pam: PamBatch) -> np.ndarray:
    """Count of bins per frame whose reconstruction noise exceeds the mask."""
    nmr = noise_to_mask(np.atleast_2d(s), np.atleast_2d(recon_sum), pam.mask_db, pam.norm_offset)
    return np.sum(nmr > 1.0, axis=-1)
