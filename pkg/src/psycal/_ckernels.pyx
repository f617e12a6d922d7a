# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint8_t, uint64_t

cnp.import_array()


def tonal_peaks(psd, widths, double prominence):
    cdef const double[::1] p = np.ascontiguousarray(psd, dtype=np.float64)
    cdef const int64_t[::1] w = np.ascontiguousarray(widths, dtype=np.int64)
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t k, j
    cdef double v
    cdef bint ok
    cdef cnp.ndarray[cnp.intp_t, ndim=1] out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t m = 0
    for k in range(1, n - 1):
        if w[k] < 2:
            continue
        v = p[k]
        if not (v > p[k - 1] and v >= p[k + 1]):
            continue
        ok = True
        for j in range(2, w[k] + 1):
            if k - j >= 0 and v - p[k - j] < prominence:
                ok = False
                break
            if k + j < n and v - p[k + j] < prominence:
                ok = False
                break
        if ok:
            out[m] = k
            m += 1
    return out[:m].copy()


def spread_thresholds(bin_bark, masker_bark, masker_level, double index_slope,
                      double index_offset, double floor):
    cdef const double[::1] z = np.ascontiguousarray(bin_bark, dtype=np.float64)
    cdef const double[::1] zm = np.ascontiguousarray(masker_bark, dtype=np.float64)
    cdef const double[::1] lv = np.ascontiguousarray(masker_level, dtype=np.float64)
    cdef Py_ssize_t nf = z.shape[0]
    cdef Py_ssize_t nm = zm.shape[0]
    out_arr = np.empty((nf, nm), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t f, r
    cdef double dz, pr, sf, base
    for r in range(nm):
        pr = lv[r]
        base = pr - index_slope * zm[r] + index_offset
        for f in range(nf):
            dz = z[f] - zm[r]
            if dz < -3.0 or dz >= 8.0:
                out[f, r] = floor
                continue
            if dz < -1.0:
                sf = 17.0 * dz - 0.4 * pr + 11.0
            elif dz < 0.0:
                sf = (0.4 * pr + 6.0) * dz
            elif dz < 1.0:
                sf = -17.0 * dz
            else:
                sf = (0.15 * pr - 17.0) * dz - 0.15 * pr
            out[f, r] = base + sf
    return out_arr


def huffman_pack(symbols, codes, lengths):
    cdef const int64_t[::1] sym = np.ascontiguousarray(symbols, dtype=np.int64)
    cdef const uint64_t[::1] cd = np.ascontiguousarray(codes, dtype=np.uint64)
    cdef const int64_t[::1] ln = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef Py_ssize_t n = sym.shape[0]
    cdef Py_ssize_t i, total = 0
    for i in range(n):
        total += ln[sym[i]]
    buf_arr = np.zeros((total + 7) // 8, dtype=np.uint8)
    cdef uint8_t[::1] buf = buf_arr
    cdef uint64_t acc = 0
    cdef int nacc = 0
    cdef Py_ssize_t o = 0
    cdef int64_t l
    for i in range(n):
        # nacc < 8 here and code lengths are capped at 56, so acc cannot overflow
        l = ln[sym[i]]
        acc = (acc << l) | cd[sym[i]]
        nacc += l
        while nacc >= 8:
            nacc -= 8
            buf[o] = <uint8_t>((acc >> nacc) & 0xFF)
            o += 1
    if nacc > 0:
        buf[o] = <uint8_t>((acc << (8 - nacc)) & 0xFF)
    return buf_arr.tobytes(), total


def huffman_unpack(data, Py_ssize_t nbits, Py_ssize_t count, first_code, first_index,
                   len_count, sorted_symbols):
    cdef const uint8_t[::1] d = np.frombuffer(bytes(data), dtype=np.uint8)
    cdef const int64_t[::1] fc = np.ascontiguousarray(first_code, dtype=np.int64)
    cdef const int64_t[::1] fi = np.ascontiguousarray(first_index, dtype=np.int64)
    cdef const int64_t[::1] lc = np.ascontiguousarray(len_count, dtype=np.int64)
    cdef const int64_t[::1] ss = np.ascontiguousarray(sorted_symbols, dtype=np.int64)
    cdef Py_ssize_t max_len = lc.shape[0] - 1
    if nbits > 8 * d.shape[0]:
        raise ValueError("bitstream shorter than its declared length")
    out_arr = np.empty(count, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef Py_ssize_t pos = 0, i, l
    cdef int64_t code, rel
    cdef int bit
    for i in range(count):
        code = 0
        l = 0
        while True:
            if pos >= nbits:
                raise ValueError(f"bitstream truncated after {i} of {count} symbols")
            bit = (d[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
            code = (code << 1) | bit
            l += 1
            if l > max_len:
                raise ValueError(f"invalid code at bit {pos}")
            rel = code - fc[l]
            if rel >= 0 and rel < lc[l]:
                out[i] = ss[fi[l] + rel]
                break
    if pos != nbits:
        raise ValueError(f"{nbits - pos} trailing bits after {count} symbols")
    return out_arr


def greedy_allocate(smr_db, Py_ssize_t budget, double step_db):
    nmr_arr = np.array(smr_db, dtype=np.float64)
    cdef double[::1] nmr = nmr_arr
    cdef Py_ssize_t nb = nmr.shape[0]
    bits_arr = np.zeros(nb, dtype=np.int64)
    cdef int64_t[::1] bits = bits_arr
    if nb == 0:
        return bits_arr, np.zeros(1)
    trace_arr = np.empty(budget + 1, dtype=np.float64)
    cdef double[::1] trace = trace_arr
    cdef Py_ssize_t b, best, t = 0
    cdef double mx

    best = 0
    for b in range(1, nb):
        if nmr[b] > nmr[best]:
            best = b
    trace[0] = nmr[best]
    while t < budget:
        if nmr[best] <= 0.0:
            break
        bits[best] += 1
        nmr[best] -= step_db
        t += 1
        best = 0
        for b in range(1, nb):
            if nmr[b] > nmr[best]:
                best = b
        trace[t] = nmr[best]
    return bits_arr, trace_arr[:t + 1].copy()
