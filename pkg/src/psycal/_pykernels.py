"""Pure-Python reference versions of the hot kernels.

Signatures and results match ``_ckernels.pyx`` exactly; the test-suite checks
the two against each other.
"""
import numpy as np


def tonal_peaks(psd, widths, prominence):
    """Indices of bins that are local maxima and exceed every neighbour at
    distance 2..widths[k] on both sides by at least ``prominence`` dB."""
    psd = np.asarray(psd, dtype=np.float64)
    n = psd.shape[0]
    out = []
    for k in range(1, n - 1):
        w = int(widths[k])
        if w < 2:
            continue
        p = psd[k]
        if not (p > psd[k - 1] and p >= psd[k + 1]):
            continue
        ok = True
        for j in range(2, w + 1):
            if k - j >= 0 and p - psd[k - j] < prominence:
                ok = False
                break
            if k + j < n and p - psd[k + j] < prominence:
                ok = False
                break
        if ok:
            out.append(k)
    return np.array(out, dtype=np.intp)


def spread_thresholds(bin_bark, masker_bark, masker_level, index_slope, index_offset, floor):
    """Individual masking thresholds, one column per masker.

    level - index_slope * z_masker + SF(dz, level) + index_offset for
    -3 <= dz < 8 Bark, ``floor`` elsewhere.
    """
    z = np.asarray(bin_bark, dtype=np.float64)[:, None]
    zm = np.asarray(masker_bark, dtype=np.float64)[None, :]
    p = np.asarray(masker_level, dtype=np.float64)[None, :]
    dz = z - zm
    sf = np.select(
        [dz < -1.0, dz < 0.0, dz < 1.0],
        [17.0 * dz - 0.4 * p + 11.0, (0.4 * p + 6.0) * dz, -17.0 * dz],
        (0.15 * p - 17.0) * dz - 0.15 * p,
    )
    thr = p - index_slope * zm + sf + index_offset
    inside = (dz >= -3.0) & (dz < 8.0)
    return np.where(inside, thr, floor)


def huffman_pack(symbols, codes, lengths):
    out = bytearray()
    acc = 0
    nacc = 0
    nbits = 0
    for s in symbols:
        ln = int(lengths[s])
        acc = (acc << ln) | int(codes[s])
        nacc += ln
        nbits += ln
        while nacc >= 8:
            nacc -= 8
            out.append((acc >> nacc) & 0xFF)
        acc &= (1 << nacc) - 1
    if nacc:
        out.append((acc << (8 - nacc)) & 0xFF)
    return bytes(out), nbits


def huffman_unpack(data, nbits, count, first_code, first_index, len_count, sorted_symbols):
    """Canonical Huffman decode of ``count`` symbols from the first ``nbits`` of ``data``.

    ``first_code[L]``, ``first_index[L]`` and ``len_count[L]`` describe the
    codes of length ``L``; ``sorted_symbols`` lists symbols in canonical order.
    """
    max_len = len(len_count) - 1
    if nbits > 8 * len(data):
        raise ValueError("bitstream shorter than its declared length")
    out = np.empty(count, dtype=np.int64)
    pos = 0
    for i in range(count):
        code = 0
        ln = 0
        while True:
            if pos >= nbits:
                raise ValueError(f"bitstream truncated after {i} of {count} symbols")
            bit = (data[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
            code = (code << 1) | bit
            ln += 1
            if ln > max_len:
                raise ValueError(f"invalid code at bit {pos}")
            rel = code - first_code[ln]
            if 0 <= rel < len_count[ln]:
                out[i] = sorted_symbols[first_index[ln] + rel]
                break
    if pos != nbits:
        raise ValueError(f"{nbits - pos} trailing bits after {count} symbols")
    return out


def greedy_allocate(smr_db, budget, step_db):
    """Give one bit at a time to the band with the largest noise-to-mask ratio.

    Returns (bits, trace) where trace[i] is the max NMR (dB) after i bits.
    """
    nmr = np.array(smr_db, dtype=np.float64)
    bits = np.zeros(nmr.shape[0], dtype=np.int64)
    trace = []
    if nmr.shape[0] == 0:
        return bits, np.zeros(1)
    trace.append(nmr.max())
    left = int(budget)
    while left > 0:
        b = int(np.argmax(nmr))
        if nmr[b] <= 0.0:
            break
        bits[b] += 1
        nmr[b] -= step_db
        left -= 1
        trace.append(nmr.max())
    return bits, np.array(trace)
