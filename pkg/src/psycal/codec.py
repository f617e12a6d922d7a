"""Linear residual codec, its training loop, a greedy NMR bit allocator, and
direct perceptual optimization of a reconstruction.

A module maps a frame of T samples to T/2 code values with an analysis
matrix, quantizes them against its codebook and maps back with a synthesis
matrix. Modules are cascaded so each one codes what its predecessors missed.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .audio import AudioClip, Frame, frame_signal, frames_to_array, overlap_add
from .bitstream import Bitstream, BitstreamError
from .loss import (LossConfig, audible_bins, cmrl_targets, grad_total_loss, noise_to_mask,
                   reference_pam, term_losses, total_loss)
from .pam import PamBatch, bark
from .quantizer import (Codebook, HuffmanTable, RateController, entropy_bits,
                        features_per_second, huffman_decode, huffman_encode, quantize_vector,
                        soft_entropy_backward, soft_quantize_backward)
from .spectral import PowerSpectrumDb

DB_PER_BIT = 20.0 * np.log10(2.0)  # 6.0206 dB


class TrainingDiverged(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class LinearCodecModule:
    analysis: np.ndarray  # (C, T)
    synthesis: np.ndarray  # (T, C)
    codebook: Codebook

    def __post_init__(self):
        self.analysis = np.asarray(self.analysis, dtype=np.float64)
        self.synthesis = np.asarray(self.synthesis, dtype=np.float64)
        c, t = self.analysis.shape
        if self.synthesis.shape != (t, c):
            raise ValueError(f"synthesis must be {(t, c)}, got {self.synthesis.shape}")

    @property
    def frame_len(self) -> int:
        return self.analysis.shape[1]

    @property
    def code_len(self) -> int:
        return self.analysis.shape[0]

    def encode(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.analysis.T

    def decode(self, h) -> np.ndarray:
        return np.asarray(h, dtype=np.float64) @ self.synthesis.T

    def forward(self, x, mode: str = "hard"):
        z = self.encode(x)
        h, asg = quantize_vector(z, self.codebook, mode)
        return z, h, asg, self.decode(h)

    def copy(self) -> "LinearCodecModule":
        return LinearCodecModule(self.analysis.copy(), self.synthesis.copy(), self.codebook.copy())


@dataclass
class ResidualStack:
    modules: list

    def __post_init__(self):
        if not self.modules:
            raise ValueError("a stack needs at least one module")
        shapes = {m.analysis.shape for m in self.modules}
        if len(shapes) != 1:
            raise ValueError("all modules must share frame and code length")

    @property
    def n_modules(self) -> int:
        return len(self.modules)

    @property
    def frame_len(self) -> int:
        return self.modules[0].frame_len

    @property
    def code_len(self) -> int:
        return self.modules[0].code_len


def _as_frames(frames) -> np.ndarray:
    if isinstance(frames, Frame):
        return frames.samples[None, :]
    if isinstance(frames, (list, tuple)) and frames and isinstance(frames[0], Frame):
        return frames_to_array(frames)
    x = np.asarray(frames, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def random_module(frame_len: int, code_len: int | None = None, k: int = 64,
                  alpha: float = 300.0, rng=None) -> LinearCodecModule:
    """Module with random orthonormal analysis rows and synthesis = analysis^T."""
    rng = np.random.default_rng(rng)
    code_len = frame_len // 2 if code_len is None else code_len
    q, _ = np.linalg.qr(rng.standard_normal((frame_len, code_len)))
    return LinearCodecModule(q.T.copy(), q.copy(), Codebook.uniform(k, -1.0, 1.0, alpha))


def _range_codebook(z, k: int, alpha: float) -> Codebook:
    lo, hi = float(np.min(z)), float(np.max(z))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return Codebook.uniform(k, lo, hi, alpha)


def fit_module_pca(residual, code_len: int | None = None, k: int = 64, alpha: float = 300.0) -> LinearCodecModule:
    """Project onto the top principal directions of ``residual`` (no mean removal).

    Without quantization this is the best rank-``code_len`` linear module for
    time-domain squared error. Kernels are spread evenly over the range of the
    resulting codes.
    """
    x = _as_frames(residual)
    frame_len = x.shape[1]
    code_len = frame_len // 2 if code_len is None else code_len
    _, _, vt = np.linalg.svd(x, full_matrices=True)
    basis = vt[:code_len]
    return LinearCodecModule(basis.copy(), basis.T.copy(), _range_codebook(x @ basis.T, k, alpha))


@dataclass
class CmrlCodes:
    h: np.ndarray  # (n, N*C) concatenated quantized codes
    indices: np.ndarray  # (n, N, C) kernel indices
    targets: np.ndarray  # (N, n, T) input of every module
    recons: np.ndarray  # (N, n, T) output of every module


def cmrl_encode(frames, stack: ResidualStack, mode: str = "hard") -> CmrlCodes:
    """Encode frames module by module, each module seeing s minus all earlier outputs."""
    x = _as_frames(frames)
    residual = x.copy()
    hs, idx, tgts, recs = [], [], [], []
    for m in stack.modules:
        _, h, asg, rec = m.forward(residual, mode)
        tgts.append(residual.copy())
        recs.append(rec)
        hs.append(h)
        idx.append(asg.index)
        residual = residual - rec
    return CmrlCodes(np.concatenate(hs, axis=1), np.stack(idx, axis=1), np.stack(tgts), np.stack(recs))


def cmrl_decode(h, stack: ResidualStack) -> np.ndarray:
    """Sum of every module's synthesis of its own code segment."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    c = stack.code_len
    if h.shape[1] != c * stack.n_modules:
        raise ValueError(f"code length {h.shape[1]} does not match {stack.n_modules} modules of {c}")
    out = np.zeros((h.shape[0], stack.frame_len))
    for i, m in enumerate(stack.modules):
        out += m.decode(h[:, i * c:(i + 1) * c])
    return out


def decode_indices(indices, stack: ResidualStack) -> np.ndarray:
    """Quantized codes ``(n, N*C)`` from kernel indices ``(n, N, C)``."""
    indices = np.asarray(indices, dtype=np.int64)
    parts = [stack.modules[i].codebook.kernels[indices[:, i]] for i in range(stack.n_modules)]
    return np.concatenate(parts, axis=1)


# --- training -----------------------------------------------------------------

LOG_FIELDS = ("module", "epoch", "l1", "l2", "l3", "l4", "total", "bitrate", "blend_weight")


def _stage(seq, i):
    seq = tuple(seq) if np.ndim(seq) else (seq,)
    return seq[min(i, len(seq) - 1)]


def _subset(pam: PamBatch | None, rows) -> PamBatch | None:
    if pam is None:
        return None
    return PamBatch(pam.weights[rows], pam.mask_db[rows], pam.psd_db[rows], pam.norm_offset, pam.sample_rate)


def train_stack(frames, cfg: LossConfig, ctrl: RateController | None = None, epochs=(50, 30),
                lr=(2e-4, 2e-5), n_modules: int = 2, k: int = 64, alpha: float = 300.0,
                momentum: float = 0.9, batch_size: int = 128, seed: int = 0, init: str = "pca",
                quant_mode: str = "soft", hop: int = 480, log_csv=None):
    """Train a residual stack one module at a time.

    Module ``i`` is trained for ``epochs[i]`` passes at ``lr[i]`` (the last entry
    repeats for deeper stacks) while earlier modules stay frozen and feed it
    their hard-quantized residual. The objective is the blended loss plus
    ``ctrl.blend_weight`` times the soft entropy of the module's code, and the
    controller is stepped after every minibatch with the measured lower-bound
    bitrate of all modules so far. Returns ``(stack, log_rows)``.
    """
    x_all = _as_frames(frames)
    n, frame_len = x_all.shape
    rng = np.random.default_rng(seed)
    pam_all = reference_pam(x_all, cfg)
    code_len = frame_len // 2
    feat = features_per_second(cfg.sample_rate, hop, code_len)
    trained: list[LinearCodecModule] = []
    frozen_bits = 0.0
    log = []

    for i in range(n_modules):
        prev = np.zeros((0, n, frame_len))
        if trained:
            prev = cmrl_encode(x_all, ResidualStack(trained), "hard").recons
        resid = x_all - prev.sum(axis=0)
        if init == "pca":
            mod = fit_module_pca(resid, code_len, k, alpha)
        elif init == "random":
            mod = random_module(frame_len, code_len, k, alpha, rng)
            mod.codebook = _range_codebook(mod.encode(resid), k, alpha)
        else:
            raise ValueError(f"unknown init {init!r}")
        params = [mod.analysis, mod.synthesis, mod.codebook.kernels]
        vel = [np.zeros_like(p) for p in params]
        step_lr = _stage(lr, i)
        bitrate = 0.0
        last_total = None

        # overflow shows up as a non-finite loss and is reported as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(_stage(epochs, i)):
                order = rng.permutation(n)
                sums = dict.fromkeys(("l1", "l2", "l3", "l4", "total"), 0.0)
                for b0 in range(0, n, batch_size):
                    rows = order[b0:b0 + batch_size]
                    xb, rb = x_all[rows], resid[rows]
                    pam = _subset(pam_all, rows)
                    z, h, asg, rec = mod.forward(rb, quant_mode)
                    recons = np.concatenate([prev[:, rows], rec[None]])
                    rep = total_loss(xb, recons, cfg, pam)
                    g_rec = grad_total_loss(xb, recons, cfg, pam).g[-1]
                    stats = entropy_bits(asg, "soft", feat)
                    bitrate = frozen_bits + feat * stats.entropy_bits
                    weight = ctrl.blend_weight if ctrl is not None else 0.0
                    objective = rep.total + weight * stats.entropy_bits
                    if not np.isfinite(objective):
                        raise TrainingDiverged(
                            f"module {i + 1}, epoch {epoch + 1}: loss became {objective} "
                            f"(last finite total {last_total}); lower the learning rate")
                    last_total = objective

                    d_s = g_rec.T @ h
                    d_h = g_rec @ mod.synthesis
                    if quant_mode == "soft":
                        d_z, d_beta = soft_quantize_backward(z, mod.codebook, d_h, asg)
                    else:
                        # straight-through for hard or disabled quantization
                        d_z, d_beta = d_h, np.zeros(k)
                    if weight > 0:
                        ez, eb = soft_entropy_backward(z, mod.codebook, asg)
                        d_z = d_z + weight * ez
                        d_beta = d_beta + weight * eb
                    grads = [d_z.T @ rb, d_s, d_beta]
                    for p, v, g in zip(params, vel, grads):
                        v *= momentum
                        v -= step_lr * g
                        p += v
                    if ctrl is not None:
                        ctrl = ctrl.step(bitrate)
                    for key in ("l1", "l2", "l3", "l4"):
                        sums[key] += getattr(rep, key)
                    sums["total"] += rep.total
                row = {"module": i + 1, "epoch": epoch + 1, **sums, "bitrate": bitrate,
                       "blend_weight": ctrl.blend_weight if ctrl is not None else 0.0}
                log.append(row)

        trained.append(mod)
        final = cmrl_encode(x_all, ResidualStack(trained), "hard")
        frozen_bits += feat * entropy_bits(final.indices[:, -1], "hard", k=k).entropy_bits

    if log_csv is not None:
        write_log_csv(log, log_csv)
    return ResidualStack(trained), log


def write_log_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({f: row[f] for f in LOG_FIELDS})


# --- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"PSYK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHHHHH")


def save_checkpoint(stack: ResidualStack, path) -> None:
    """Flat little-endian file: header, then per module alpha, kernels, analysis, synthesis."""
    k = stack.modules[0].codebook.size
    if any(m.codebook.size != k for m in stack.modules):
        raise ValueError("all modules must use the same number of kernels")
    buf = bytearray(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, stack.frame_len, stack.code_len,
                                    stack.n_modules, k))
    for m in stack.modules:
        buf += struct.pack("<d", m.codebook.alpha)
        for arr in (m.codebook.kernels, m.analysis, m.synthesis):
            buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> ResidualStack:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: too short for a checkpoint")
    magic, version, t, c, n, k = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a psycal checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    per = 8 * (1 + k + 2 * c * t)
    if len(data) != _CKPT_HEAD.size + n * per:
        raise CheckpointError(f"{path}: size does not match its header")
    pos = _CKPT_HEAD.size
    mods = []
    for _ in range(n):
        (alpha,) = struct.unpack_from("<d", data, pos)
        pos += 8
        arrs = []
        for count, shape in ((k, (k,)), (c * t, (c, t)), (c * t, (t, c))):
            arrs.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy())
            pos += 8 * count
        mods.append(LinearCodecModule(arrs[1], arrs[2], Codebook(arrs[0], alpha)))
    return ResidualStack(mods)


# --- clip-level coding --------------------------------------------------------------

def _header_stack(stack: ResidualStack) -> ResidualStack:
    """The stack as a decoder sees it: kernels rounded to float32."""
    mods = []
    for m in stack.modules:
        cb = Codebook(m.codebook.kernels.astype(np.float32).astype(np.float64), np.float32(m.codebook.alpha))
        mods.append(LinearCodecModule(m.analysis, m.synthesis, cb))
    return ResidualStack(mods)


def encode_clip(clip: AudioClip, stack: ResidualStack, overlap: int = 32) -> Bitstream:
    k = stack.modules[0].codebook.size
    if any(m.codebook.size != k for m in stack.modules):
        raise ValueError("all modules must use the same number of kernels")
    coded = _header_stack(stack)
    frames = frame_signal(clip, stack.frame_len, overlap)
    codes = cmrl_encode(frames, coded, "hard")
    table, payload, nbits = huffman_encode(codes.indices.reshape(-1), k=k)
    return Bitstream(int(clip.sample_rate), len(clip), stack.frame_len, overlap, len(frames),
                     stack.code_len, np.array([m.codebook.alpha for m in coded.modules]),
                     np.stack([m.codebook.kernels for m in coded.modules]).astype(np.float32),
                     table.lengths, nbits, payload)


def bitstream_indices(bs: Bitstream) -> np.ndarray:
    """Kernel indices ``(n_frames, N, C)`` carried by a bitstream."""
    try:
        table = HuffmanTable(bs.code_lengths)
        idx = huffman_decode(bs.payload, bs.payload_bits, bs.n_symbols, table)
    except ValueError as exc:
        raise BitstreamError(f"payload does not decode: {exc}") from exc
    return idx.reshape(bs.n_frames, bs.n_modules, bs.code_len)


def decode_clip(bs: Bitstream, stack: ResidualStack) -> AudioClip:
    if (bs.n_modules, bs.frame_len, bs.code_len) != (stack.n_modules, stack.frame_len, stack.code_len):
        raise BitstreamError(
            f"bitstream geometry (N={bs.n_modules}, T={bs.frame_len}, C={bs.code_len}) does not match "
            f"checkpoint (N={stack.n_modules}, T={stack.frame_len}, C={stack.code_len})")
    mods = [LinearCodecModule(m.analysis, m.synthesis, Codebook(bs.kernels[i].astype(np.float64), bs.alphas[i]))
            for i, m in enumerate(stack.modules)]
    decoder = ResidualStack(mods)
    out = cmrl_decode(decode_indices(bitstream_indices(bs), decoder), decoder)
    hop = bs.frame_len - bs.overlap
    frames = []
    for j, row in enumerate(out):
        start = j * hop
        frames.append(Frame(row, start, min(bs.frame_len, bs.n_samples - start)))
    return overlap_add(frames, bs.overlap, bs.sample_rate)


def reencode_bitstream(bs: Bitstream) -> Bitstream:
    """Rebuild a bitstream from its own decoded indices (same table, same payload)."""
    idx = bitstream_indices(bs)
    table, payload, nbits = huffman_encode(idx.reshape(-1), HuffmanTable(bs.code_lengths))
    return Bitstream(bs.sample_rate, bs.n_samples, bs.frame_len, bs.overlap, bs.n_frames, bs.code_len,
                     bs.alphas.copy(), bs.kernels.copy(), table.lengths, nbits, payload)


# --- greedy bit allocation ----------------------------------------------------------

@dataclass
class BitAllocation:
    bits_per_band: np.ndarray
    budget: int
    nmr_trace: np.ndarray  # max band NMR in dB after 0, 1, 2, ... bits
    band_smr_db: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def final_nmr_db(self) -> np.ndarray:
        return self.band_smr_db - DB_PER_BIT * self.bits_per_band


def band_smr_db(p, m, bin_hz: float | None = None) -> np.ndarray:
    """Largest signal-to-mask ratio (dB) in every critical band ``floor(bark)``."""
    pv = p.values if isinstance(p, PowerSpectrumDb) else np.asarray(p, dtype=np.float64)
    mv = m.m if hasattr(m, "m") else np.asarray(m, dtype=np.float64)
    if bin_hz is None:
        bin_hz = p.bin_hz if isinstance(p, PowerSpectrumDb) else 44100.0 / (2 * (pv.shape[0] - 1))
    band = np.floor(bark(np.arange(pv.shape[0]) * bin_hz)).astype(np.int64)
    return np.array([np.max((pv - mv)[band == b]) for b in np.unique(band)])


def greedy_nmr_allocate(p, m=None, budget: int = 0, step_db: float = DB_PER_BIT) -> BitAllocation:
    """Hand out bits one at a time to the band with the largest noise-to-mask ratio.

    With no bits a band's noise is its signal, so the starting NMR is the band
    SMR. Each bit lowers that band's NMR by ``step_db``. Allocation stops when
    the budget is spent or no band is above its mask. ``p`` may also be an
    array of band SMRs in dB when ``m`` is None.
    """
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    smr = np.asarray(p, dtype=np.float64) if m is None else band_smr_db(p, m)
    bits, trace = kernels.greedy_allocate(smr, int(budget), float(step_db))
    return BitAllocation(bits, int(budget), trace, smr)


# --- perceptual optimization harness --------------------------------------------------

@dataclass
class OptimizeResult:
    frame: np.ndarray
    trace: np.ndarray  # rows (step, audible bins, max NMR, loss)

    @property
    def audible(self) -> np.ndarray:
        return self.trace[:, 1].astype(np.int64)


TRACE_FIELDS = ("step", "audible_bins", "max_nmr", "loss")


def _polyak(value: float, grad: np.ndarray, cap: float) -> np.ndarray:
    gg = float(grad @ grad)
    if value <= 0.0 or gg == 0.0:
        return np.zeros_like(grad)
    return min(cap, value / gg) * grad


def optimize_reconstruction(s, s0, cfg: LossConfig, steps: int = 2000, lr: float = 1e-3,
                            momentum: float = 0.5, pam: PamBatch | None = None) -> OptimizeResult:
    """Gradient descent on the blended loss over the reconstruction of one frame.

    Every term has a known minimum of zero (reached at ``s0 = s``), so each
    step moves along the gradient of the smooth part L1 + lam*(L2 + L3) by its
    Polyak length ``value / |grad|^2`` capped at ``lr``, and, when active,
    along the noise-modulation subgradient by its own capped Polyak length.
    The two directions are summed and passed through heavy-ball momentum.
    ``trace`` has ``steps + 1`` rows; row ``k`` describes the iterate after
    ``k`` steps.
    """
    s = _as_frames(s)[0]
    x = _as_frames(s0)[0].copy()
    if x.shape != s.shape:
        raise ValueError("start and reference frames differ in length")
    if pam is None:
        pam = reference_pam(s, cfg)
    mask_pam = pam if pam is not None else reference_pam(s, LossConfig(sample_rate=cfg.sample_rate))
    vel = np.zeros_like(x)
    trace = np.zeros((steps + 1, 4))
    for k in range(steps + 1):
        vals, grads, _ = term_losses(s, x[None], cfg, pam)
        smooth = vals["l1"][0] + cfg.lam * sum(vals[t][0] for t in ("l2", "l3") if t in cfg.terms)
        loss = smooth + (cfg.lam * vals["l4"][0] if "l4" in cfg.terms else 0.0)
        nmr = noise_to_mask(s, x, mask_pam.mask_db[0], mask_pam.norm_offset)
        trace[k] = (k, np.sum(nmr > 1.0), nmr.max(), loss)
        if k == steps:
            break
        g_smooth = grads["l1"][0, 0].copy()
        for t in ("l2", "l3"):
            if t in cfg.terms:
                g_smooth += cfg.lam * grads[t][0, 0]
        step = _polyak(smooth, g_smooth, lr)
        if "l4" in cfg.terms:
            step += _polyak(vals["l4"][0], grads["l4"][0, 0], lr)
        vel = momentum * vel + step
        x = x - vel
    return OptimizeResult(x, trace)


def write_trace_csv(result: OptimizeResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for step, aud, mx, loss in result.trace:
            w.writerow([int(step), int(aud), repr(float(mx)), repr(float(loss))])


def degrade(s, rng=None, snr_db: float | None = None, bits: int | None = None) -> np.ndarray:
    """Degraded copy of ``s``: uniform quantization to ``bits`` bits over [-1, 1)
    and/or additive white Gaussian noise at ``snr_db`` relative to the signal power."""
    rng = np.random.default_rng(rng)
    x = np.asarray(s, dtype=np.float64).copy()
    if bits is not None:
        if bits < 1:
            raise ValueError("need at least one bit")
        scale = 2.0 ** (bits - 1)
        x = np.clip(np.round(x * scale), -scale, scale - 1) / scale
    if snr_db is not None:
        noise = rng.standard_normal(x.shape)
        p_sig = np.mean(np.asarray(s, dtype=np.float64) ** 2)
        p_noise = np.mean(noise ** 2)
        if p_sig > 0 and p_noise > 0:
            x = x + noise * np.sqrt(p_sig / p_noise / 10.0 ** (snr_db / 10.0))
    return x


__all__ = [
    "LinearCodecModule", "ResidualStack", "CmrlCodes", "BitAllocation", "OptimizeResult",
    "TrainingDiverged", "CheckpointError", "random_module", "fit_module_pca", "cmrl_encode",
    "cmrl_decode", "decode_indices", "train_stack", "write_log_csv", "save_checkpoint",
    "load_checkpoint", "encode_clip", "decode_clip", "bitstream_indices", "reencode_bitstream",
    "band_smr_db", "greedy_nmr_allocate", "optimize_reconstruction", "write_trace_csv", "degrade",
    "DB_PER_BIT", "cmrl_targets", "audible_bins",
]
