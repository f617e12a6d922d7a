"""Audio clips, overlapped framing with a raised-cosine cross-fade, and WAV I/O."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_FRAME_LEN = 512
DEFAULT_OVERLAP = 32


class WavError(ValueError):
    """Raised for unreadable, malformed or unsupported WAV files."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip holds mono samples only")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class Frame:
    """A fixed-length frame cut from a clip.

    ``valid_length`` is shorter than ``len(samples)`` only for a zero-padded
    trailing frame.
    """

    samples: np.ndarray
    start_index: int
    valid_length: int = field(default=-1)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.valid_length < 0:
            self.valid_length = self.samples.shape[0]

    def __len__(self):
        return self.samples.shape[0]


def crossfade_ramp(overlap: int) -> np.ndarray:
    """Rising half of a Hann window of width ``overlap``.

    ``ramp + ramp[::-1] == 1`` so that a fade-out/fade-in pair sums to unity.
    """
    if overlap == 0:
        return np.zeros(0)
    n = np.arange(overlap)
    return 0.5 - 0.5 * np.cos(np.pi * (n + 0.5) / overlap)


def frame_count(n_samples: int, frame_len: int, overlap: int) -> int:
    hop = frame_len - overlap
    if n_samples <= frame_len:
        return 1
    return 1 + -(-(n_samples - frame_len) // hop)


def frame_signal(clip: AudioClip | np.ndarray, frame_len: int = DEFAULT_FRAME_LEN,
                 overlap: int = DEFAULT_OVERLAP) -> list[Frame]:
    """Cut ``clip`` into frames spaced ``frame_len - overlap`` apart.

    Every region shared by two neighbouring frames is cross-faded: the earlier
    frame fades out and the later one fades in, so summing the frames back
    with :func:`overlap_add` restores the input exactly. The outer edges of
    the first and last frame are left untouched. A trailing remainder is
    zero-padded to a full frame.
    """
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if not 0 <= overlap < frame_len:
        raise ValueError(f"need 0 <= overlap < frame_len, got overlap={overlap}, frame_len={frame_len}")
    n = samples.shape[0]
    if n < frame_len:
        raise ValueError(f"clip of {n} samples is shorter than one frame ({frame_len})")
    hop = frame_len - overlap
    count = frame_count(n, frame_len, overlap)
    ramp = crossfade_ramp(overlap)

    frames = []
    for i in range(count):
        start = i * hop
        chunk = samples[start:start + frame_len]
        valid = chunk.shape[0]
        buf = np.zeros(frame_len)
        buf[:valid] = chunk
        if overlap:
            if i > 0:
                buf[:overlap] *= ramp
            if i < count - 1:
                buf[frame_len - overlap:] *= ramp[::-1]
        frames.append(Frame(buf, start, valid))
    return frames


def frames_to_array(frames: list[Frame]) -> np.ndarray:
    return np.stack([f.samples for f in frames])


def overlap_add(frames: list[Frame], overlap: int = DEFAULT_OVERLAP,
                sample_rate: int = 44100) -> AudioClip:
    """Sum cross-faded frames back into a clip (inverse of :func:`frame_signal`)."""
    if not frames:
        raise ValueError("no frames to overlap-add")
    frame_len = len(frames[0])
    if any(len(f) != frame_len for f in frames):
        raise ValueError("inconsistent frame lengths")
    hop = frame_len - overlap
    for i, f in enumerate(frames):
        if f.start_index != i * hop:
            raise ValueError(f"frame {i} starts at {f.start_index}, expected {i * hop}")
    last = frames[-1]
    total = last.start_index + last.valid_length
    out = np.zeros(last.start_index + frame_len)
    for f in frames:
        out[f.start_index:f.start_index + frame_len] += f.samples
    return AudioClip(out[:total], sample_rate)


# WAV I/O

def read_wav(path: str | Path, downmix: bool = False) -> AudioClip:
    """Read a PCM16 or float32 WAV file into a clip normalized to [-1, 1].

    PCM16 samples are divided by 32768. Multichannel input is rejected unless
    ``downmix`` is set, in which case channels are averaged.
    """
    path = Path(path)
    try:
        with warnings.catch_warnings():
            # unknown chunks (LIST, fact, ...) are skipped by the reader
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, struct.error, IndexError, KeyError, UnboundLocalError) as exc:
        # scipy surfaces some truncated headers as internal NameErrors
        raise WavError(f"{path}: malformed or unsupported WAV ({exc})") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample format {data.dtype}; need PCM16 or float32")

    if samples.ndim == 2:
        if samples.shape[1] == 1:
            samples = samples[:, 0]
        elif downmix:
            samples = samples.mean(axis=1)
        else:
            raise WavError(f"{path}: {samples.shape[1]} channels; only mono is supported (use downmix)")
    if not np.all(np.isfinite(samples)):
        raise WavError(f"{path}: non-finite samples")
    return AudioClip(samples, int(rate))


def write_wav(clip: AudioClip, path: str | Path, fmt: str = "pcm16") -> None:
    """Write a mono clip as PCM16 (``fmt="pcm16"``) or IEEE float32 (``fmt="float32"``)."""
    if fmt == "pcm16":
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = clip.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(Path(path), int(clip.sample_rate), data)
