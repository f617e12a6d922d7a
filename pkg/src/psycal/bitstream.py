"""Binary container for Huffman-coded kernel indices.

Layout (little-endian)::

    magic "PSYB" | version u16 | sample_rate u32 | n_samples u64
    frame_len u16 | overlap u16 | n_frames u32 | n_modules u16 | code_len u16 | K u16
    per module: alpha f32, K kernels f32
    K code lengths u8
    payload_bits u64 | payload bytes

The payload lists indices frame by frame, and within a frame module by module
in cascade order. One Huffman table, built per clip, covers all modules.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PSYB"
VERSION = 1
_HEAD = struct.Struct("<4sHIQHHIHHH")


class BitstreamError(ValueError):
    """Corrupt, truncated or incompatible bitstream."""


@dataclass
class Bitstream:
    sample_rate: int
    n_samples: int
    frame_len: int
    overlap: int
    n_frames: int
    code_len: int
    alphas: np.ndarray  # (N,)
    kernels: np.ndarray  # (N, K) float32 values
    code_lengths: np.ndarray  # (K,)
    payload_bits: int
    payload: bytes

    @property
    def n_modules(self) -> int:
        return self.kernels.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.n_frames * self.n_modules * self.code_len

    @property
    def kbps(self) -> float:
        """Payload bits per second of audio, in kbit/s."""
        return self.payload_bits / (self.n_samples / self.sample_rate) / 1000.0

    def to_bytes(self) -> bytes:
        n, k = self.kernels.shape
        head = _HEAD.pack(MAGIC, VERSION, self.sample_rate, self.n_samples, self.frame_len,
                          self.overlap, self.n_frames, n, self.code_len, k)
        body = bytearray(head)
        for a, row in zip(self.alphas, self.kernels):
            body += struct.pack("<f", float(a))
            body += np.asarray(row, dtype="<f4").tobytes()
        body += np.asarray(self.code_lengths, dtype=np.uint8).tobytes()
        body += struct.pack("<Q", self.payload_bits)
        body += self.payload
        return bytes(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEAD.size:
            raise BitstreamError("bitstream shorter than its header")
        magic, version, rate, n_samples, frame_len, overlap, n_frames, n, code_len, k = _HEAD.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError("not a psycal bitstream (bad magic)")
        if version != VERSION:
            raise BitstreamError(f"bitstream version {version} is not supported (expected {VERSION})")
        pos = _HEAD.size
        need = pos + n * 4 * (k + 1) + k + 8
        if len(data) < need:
            raise BitstreamError("bitstream truncated inside its header")
        alphas = np.empty(n)
        kern = np.empty((n, k), dtype=np.float32)
        for i in range(n):
            alphas[i] = struct.unpack_from("<f", data, pos)[0]
            pos += 4
            kern[i] = np.frombuffer(data, dtype="<f4", count=k, offset=pos)
            pos += 4 * k
        lengths = np.frombuffer(data, dtype=np.uint8, count=k, offset=pos).astype(np.int64)
        pos += k
        (nbits,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        payload = bytes(data[pos:])
        if len(payload) != (nbits + 7) // 8:
            raise BitstreamError(f"payload holds {len(payload)} bytes, header declares {nbits} bits")
        return cls(rate, n_samples, frame_len, overlap, n_frames, code_len, alphas, kern,
                   lengths, nbits, payload)


__all__ = ["Bitstream", "BitstreamError", "MAGIC", "VERSION"]
