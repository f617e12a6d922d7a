"""Soft-to-hard scalar quantization, entropy estimates, rate control and
canonical Huffman coding of kernel indices."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, replace

import numpy as np

from . import kernels

DEFAULT_ALPHA = 300.0
RATE_STEP = 0.015
MAX_CODE_LEN = 56
LN2 = np.log(2.0)


@dataclass
class Codebook:
    """Trainable scalar kernels ``beta`` and softmax scale ``alpha``."""

    kernels: np.ndarray
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.kernels = np.atleast_1d(np.asarray(self.kernels, dtype=np.float64)).copy()
        if self.kernels.ndim != 1 or self.kernels.size < 1:
            raise ValueError("a codebook needs at least one kernel")
        if not np.all(np.isfinite(self.kernels)):
            raise ValueError("kernels must be finite")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        self.alpha = float(self.alpha)

    @property
    def size(self) -> int:
        return self.kernels.shape[0]

    @classmethod
    def uniform(cls, k: int, lo: float = -1.0, hi: float = 1.0, alpha: float = DEFAULT_ALPHA) -> "Codebook":
        return cls(np.linspace(lo, hi, k), alpha)

    @classmethod
    def from_data(cls, z, k: int, alpha: float = DEFAULT_ALPHA) -> "Codebook":
        """Kernels at evenly spaced quantiles of ``z``."""
        z = np.asarray(z, dtype=np.float64).ravel()
        q = np.quantile(z, (np.arange(k) + 0.5) / k)
        # repeated quantiles would give identical kernels; spread them slightly
        span = max(float(np.ptp(z)), 1e-6)
        q = q + np.arange(k) * span * 1e-9
        return cls(q, alpha)

    def copy(self) -> "Codebook":
        return Codebook(self.kernels.copy(), self.alpha)


@dataclass
class Assignment:
    """Soft and hard assignments of every code element, shape ``(..., K)``."""

    soft: np.ndarray
    index: np.ndarray
    soft_value: np.ndarray
    hard_value: np.ndarray

    @property
    def hard(self) -> np.ndarray:
        k = self.soft.shape[-1]
        return np.eye(k, dtype=np.float64)[self.index]


def _distances(z, cb: Codebook) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return (z[..., None] - cb.kernels) ** 2


def _softmax(u: np.ndarray) -> np.ndarray:
    u = u - np.max(u, axis=-1, keepdims=True)
    e = np.exp(u)
    return e / np.sum(e, axis=-1, keepdims=True)


def soft_assign(z, cb: Codebook) -> Assignment:
    """a = softmax(-alpha * (z - beta)^2); the hard index is argmax(a)."""
    d = _distances(z, cb)
    a = _softmax(-cb.alpha * d)
    idx = np.argmax(a, axis=-1)
    return Assignment(a, idx, a @ cb.kernels, cb.kernels[idx])


def quantize_vector(z, cb: Codebook, mode: str = "soft"):
    """Quantize every element of ``z``.

    ``mode`` is ``soft`` (training), ``hard`` (test) or ``none`` (pass-through,
    assignment still computed). Returns the quantized array and the assignment.
    """
    asg = soft_assign(z, cb)
    if mode == "soft":
        return asg.soft_value, asg
    if mode == "hard":
        return asg.hard_value, asg
    if mode == "none":
        return np.asarray(z, dtype=np.float64).copy(), asg
    raise ValueError(f"unknown quantization mode {mode!r}")


def _softmax_backward(a: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the softmax logits given the gradient w.r.t. ``a``."""
    return a * (up - np.sum(a * up, axis=-1, keepdims=True))


def _logit_backward(z, cb: Codebook, du: np.ndarray):
    """Push a logit gradient ``du`` (..., K) back to ``z`` and the kernels."""
    diff = np.asarray(z, dtype=np.float64)[..., None] - cb.kernels
    # u_k = -alpha (z - beta_k)^2
    dz = np.sum(du * (-2.0 * cb.alpha) * diff, axis=-1)
    dbeta = np.sum((du * (2.0 * cb.alpha) * diff).reshape(-1, cb.size), axis=0)
    return dz, dbeta


def soft_quantize_backward(z, cb: Codebook, upstream, asg: Assignment | None = None):
    """Gradients of ``sum(upstream * h_soft)`` with respect to ``z`` and the kernels."""
    asg = soft_assign(z, cb) if asg is None else asg
    up = np.asarray(upstream, dtype=np.float64)
    # h = a . beta, so dL/da_k = up * beta_k
    du = _softmax_backward(asg.soft, up[..., None] * cb.kernels)
    dz, dbeta = _logit_backward(z, cb, du)
    dbeta = dbeta + np.sum((up[..., None] * asg.soft).reshape(-1, cb.size), axis=0)
    return dz, dbeta


@dataclass
class AssignmentStats:
    probs: np.ndarray
    entropy_bits: float
    feature_rate: float = 0.0


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log2(nz))))


def entropy_bits(assignments, mode: str = "soft", feature_rate: float = 0.0, k: int | None = None) -> AssignmentStats:
    """Occurrence probabilities and entropy H = -sum p log2 p.

    ``soft`` averages the soft assignments (differentiable, used in training);
    ``hard`` counts hard indices. ``assignments`` is an :class:`Assignment` or,
    in hard mode, an array of kernel indices together with ``k``.
    """
    if isinstance(assignments, Assignment):
        soft = assignments.soft.reshape(-1, assignments.soft.shape[-1])
        if soft.shape[0] == 0:
            raise ValueError("entropy of an empty assignment set is undefined")
        if mode == "soft":
            p = soft.mean(axis=0)
        elif mode == "hard":
            p = np.bincount(assignments.index.ravel(), minlength=soft.shape[1]) / soft.shape[0]
        else:
            raise ValueError(f"unknown entropy mode {mode!r}")
    else:
        idx = np.asarray(assignments, dtype=np.int64).ravel()
        if idx.size == 0:
            raise ValueError("entropy of an empty assignment set is undefined")
        if k is None:
            k = int(idx.max()) + 1
        p = np.bincount(idx, minlength=k) / idx.size
    return AssignmentStats(p, _entropy(p), feature_rate)


def soft_entropy_backward(z, cb: Codebook, asg: Assignment | None = None):
    """Gradient of the soft entropy H(mean a) with respect to ``z`` and the kernels."""
    asg = soft_assign(z, cb) if asg is None else asg
    soft = asg.soft
    n = soft.reshape(-1, cb.size).shape[0]
    p = soft.reshape(-1, cb.size).mean(axis=0)
    g = -(np.log2(np.maximum(p, 1e-300)) + 1.0 / LN2) / n
    du = _softmax_backward(soft, np.broadcast_to(g, soft.shape))
    return _logit_backward(z, cb, du)


def features_per_second(sample_rate: float, hop: int, code_len: int, n_modules: int = 1) -> float:
    """Quantized code elements emitted per second of audio."""
    return sample_rate / hop * code_len * n_modules


def bitrate_lower_bound(stats: AssignmentStats) -> float:
    """|h| * H(h) in bits per second."""
    return stats.feature_rate * stats.entropy_bits


@dataclass(frozen=True)
class RateController:
    """Bang-bang adjustment of the entropy-regularizer weight."""

    target_bps: float
    blend_weight: float = 0.0
    step_size: float = RATE_STEP

    def step(self, measured_bps: float) -> "RateController":
        if measured_bps < 0:
            raise ValueError("measured bitrate cannot be negative")
        delta = self.step_size if measured_bps > self.target_bps else -self.step_size
        return replace(self, blend_weight=max(0.0, self.blend_weight + delta))


def rate_controller_step(ctrl: RateController, measured_bps: float) -> RateController:
    return ctrl.step(measured_bps)


# --- canonical Huffman -------------------------------------------------------

@dataclass
class HuffmanTable:
    """Canonical code described entirely by per-symbol code lengths (0 = unused)."""

    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if np.any(self.lengths < 0) or np.any(self.lengths > MAX_CODE_LEN):
            raise ValueError("code lengths must lie in [0, 56]")
        if not np.any(self.lengths):
            raise ValueError("Huffman table has no symbols")
        kraft = np.sum(2.0 ** -self.lengths[self.lengths > 0].astype(np.float64))
        if kraft > 1.0 + 1e-12:
            raise ValueError("code lengths violate the Kraft inequality")
        self._build()

    def _build(self):
        ln = self.lengths
        max_len = int(ln.max())
        order = sorted(np.flatnonzero(ln), key=lambda s: (ln[s], s))
        self.sorted_symbols = np.array(order, dtype=np.int64)
        self.len_count = np.bincount(ln[ln > 0], minlength=max_len + 1).astype(np.int64)
        self.len_count[0] = 0
        self.first_code = np.zeros(max_len + 1, dtype=np.int64)
        self.first_index = np.zeros(max_len + 1, dtype=np.int64)
        code = 0
        idx = 0
        for length in range(1, max_len + 1):
            code = (code + self.len_count[length - 1]) << 1 if length > 1 else 0
            self.first_code[length] = code
            self.first_index[length] = idx
            idx += self.len_count[length]
        codes = np.zeros(ln.shape[0], dtype=np.uint64)
        for rank, s in enumerate(order):
            length = ln[s]
            codes[s] = self.first_code[length] + (rank - self.first_index[length])
        self.codes = codes

    @property
    def size(self) -> int:
        return self.lengths.shape[0]

    def mean_length(self, counts) -> float:
        counts = np.asarray(counts, dtype=np.float64)
        return float(np.sum(counts * self.lengths) / np.sum(counts))


def huffman_lengths(counts) -> np.ndarray:
    """Optimal prefix-code lengths for symbol ``counts``; unused symbols get 0.

    A lone used symbol gets length 1 so that every symbol costs at least one bit.
    """
    counts = np.asarray(counts, dtype=np.int64)
    used = np.flatnonzero(counts > 0)
    lengths = np.zeros(counts.shape[0], dtype=np.int64)
    if used.size == 0:
        raise ValueError("cannot build a code without symbols")
    if used.size == 1:
        lengths[used[0]] = 1
        return lengths
    # heap items: (weight, tiebreak, symbols in subtree)
    heap = [(int(counts[s]), int(s), [int(s)]) for s in used]
    heapq.heapify(heap)
    while len(heap) > 1:
        w1, t1, s1 = heapq.heappop(heap)
        w2, t2, s2 = heapq.heappop(heap)
        for s in s1 + s2:
            lengths[s] += 1
        heapq.heappush(heap, (w1 + w2, min(t1, t2), s1 + s2))
    if lengths.max() > MAX_CODE_LEN:
        raise ValueError("symbol counts too skewed for 56-bit codes")
    return lengths


def build_huffman(indices, k: int) -> HuffmanTable:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ValueError(f"indices must lie in [0, {k})")
    return HuffmanTable(huffman_lengths(np.bincount(idx, minlength=k)))


def huffman_encode(indices, table: HuffmanTable | None = None, k: int | None = None):
    """Encode kernel indices. Returns ``(table, payload bytes, payload bits)``.

    Without a ``table`` one is built from the empirical counts.
    """
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if table is None:
        if k is None:
            k = int(idx.max()) + 1 if idx.size else 1
        table = build_huffman(idx, k)
    if idx.size and (idx.min() < 0 or idx.max() >= table.size or np.any(table.lengths[idx] == 0)):
        raise ValueError("index without a code in this table")
    data, nbits = kernels.huffman_pack(idx, table.codes, table.lengths)
    return table, data, int(nbits)


def huffman_decode(data: bytes, nbits: int, count: int, table: HuffmanTable) -> np.ndarray:
    """Inverse of :func:`huffman_encode`; corrupt input raises ``ValueError``."""
    return kernels.huffman_unpack(bytes(data), int(nbits), int(count), table.first_code,
                                  table.first_index, table.len_count, table.sorted_symbols)


__all__ = [
    "Codebook", "Assignment", "AssignmentStats", "RateController", "HuffmanTable",
    "soft_assign", "quantize_vector", "soft_quantize_backward", "entropy_bits",
    "soft_entropy_backward", "features_per_second", "bitrate_lower_bound",
    "rate_controller_step", "huffman_lengths", "build_huffman", "huffman_encode",
    "huffman_decode", "DEFAULT_ALPHA", "RATE_STEP",
]
