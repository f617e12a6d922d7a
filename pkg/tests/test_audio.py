import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psycal.audio import (AudioClip, Frame, WavError, crossfade_ramp, frame_count, frame_signal,
                          frames_to_array, overlap_add, read_wav, write_wav)


def test_single_frame_clip():
    frames = frame_signal(np.arange(512.0), 512, 32)
    assert len(frames) == 1
    assert frames[0].start_index == 0
    # a lone frame has no neighbour to fade against
    np.testing.assert_array_equal(frames[0].samples, np.arange(512.0))


def test_two_frames_at_hop_offsets():
    frames = frame_signal(np.ones(992), 512, 32)
    assert [f.start_index for f in frames] == [0, 480]
    assert all(f.valid_length == 512 for f in frames)


def test_overlap_add_roundtrip_992():
    x = np.random.default_rng(0).standard_normal(992)
    back = overlap_add(frame_signal(x, 512, 32), 32)
    np.testing.assert_allclose(back.samples, x, atol=1e-12, rtol=0)


def test_single_frame_overlap_add_verbatim():
    x = np.random.default_rng(1).standard_normal(512)
    np.testing.assert_array_equal(overlap_add(frame_signal(x), 32).samples, x)


def test_crossfade_is_complementary():
    r = crossfade_ramp(32)
    np.testing.assert_allclose(r + r[::-1], 1.0, atol=1e-15)
    assert np.all(np.diff(r) > 0)


def test_trailing_remainder_zero_padded():
    frames = frame_signal(np.ones(1000), 512, 32)
    assert len(frames) == 3
    last = frames[-1]
    assert last.start_index == 960
    assert last.valid_length == 40
    assert np.all(last.samples[last.valid_length:] == 0.0)
    assert len(overlap_add(frames, 32)) == 1000


def test_short_clip_rejected():
    with pytest.raises(ValueError, match="shorter than one frame"):
        frame_signal(np.zeros(100), 512, 32)


@pytest.mark.parametrize("overlap", [-1, 512, 600])
def test_bad_overlap(overlap):
    with pytest.raises(ValueError):
        frame_signal(np.zeros(2048), 512, overlap)


def test_inconsistent_frames_rejected():
    frames = frame_signal(np.zeros(992))
    frames[1] = Frame(np.zeros(500), 480)
    with pytest.raises(ValueError, match="inconsistent"):
        overlap_add(frames, 32)


def test_clip_validation():
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, np.nan]), 44100)
    with pytest.raises(ValueError):
        AudioClip(np.zeros(4), 0)


@given(n=st.integers(512, 6000), overlap=st.sampled_from([0, 1, 16, 32, 100]),
       seed=st.integers(0, 2**32 - 1))
def test_cola_roundtrip_property(n, overlap, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    frames = frame_signal(x, 512, overlap)
    assert len(frames) == frame_count(n, 512, overlap)
    back = overlap_add(frames, overlap)
    np.testing.assert_allclose(back.samples, x, atol=1e-12, rtol=0)


def test_random_ten_frame_clip():
    x = np.random.default_rng(7).uniform(-1, 1, 512 + 9 * 480)
    frames = frame_signal(x)
    assert len(frames) == 10
    assert np.max(np.abs(overlap_add(frames).samples - x)) < 1e-12


def test_framing_deterministic():
    x = np.random.default_rng(3).standard_normal(3000)
    a = frames_to_array(frame_signal(x))
    b = frames_to_array(frame_signal(x))
    np.testing.assert_array_equal(a, b)


def test_pcm16_read(tmp_path):
    from scipy.io import wavfile
    data = np.zeros(44100, dtype=np.int16)
    data[0] = 32767
    data[1] = -32768
    wavfile.write(tmp_path / "a.wav", 44100, data)
    clip = read_wav(tmp_path / "a.wav")
    assert len(clip) == 44100 and clip.sample_rate == 44100
    assert clip.samples[0] == 32767 / 32768
    assert clip.samples[1] == -1.0


def test_float32_roundtrip_bit_exact(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
    write_wav(AudioClip(x, 32000), tmp_path / "f.wav", "float32")
    clip = read_wav(tmp_path / "f.wav")
    assert clip.sample_rate == 32000
    np.testing.assert_array_equal(clip.samples, x)


def test_pcm16_roundtrip_within_one_lsb(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 1000)
    write_wav(AudioClip(x, 44100), tmp_path / "p.wav", "pcm16")
    back = read_wav(tmp_path / "p.wav").samples
    assert np.max(np.abs(back - x)) <= 1 / 32768


def test_malformed_wav(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFF\x00\x00\x00\x00WAVEjunkjunk")
    with pytest.raises(WavError):
        read_wav(p)


def test_unsupported_format(tmp_path):
    from scipy.io import wavfile
    wavfile.write(tmp_path / "i32.wav", 8000, np.zeros(10, dtype=np.int32))
    with pytest.raises(WavError, match="unsupported sample format"):
        read_wav(tmp_path / "i32.wav")


def test_stereo_requires_downmix(tmp_path):
    from scipy.io import wavfile
    data = np.stack([np.full(100, 0.5), np.full(100, -0.25)], axis=1).astype(np.float32)
    wavfile.write(tmp_path / "st.wav", 44100, data)
    with pytest.raises(WavError, match="channels"):
        read_wav(tmp_path / "st.wav")
    np.testing.assert_allclose(read_wav(tmp_path / "st.wav", downmix=True).samples, 0.125)
