import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsrdistill import tensor as T
from vsrdistill.frontends import (SAMPLE_RATE, ConvSubsampler, MelConfig, MelFeatures, VideoClip, VisualStem, Waveform,
                                  conv_subsample, mel_center_frequencies, mel_spectrogram, num_mel_frames, read_wav,
                                  visual_stem, write_wav)
from vsrdistill.gradcheck import grad_check
from vsrdistill.nn import Module
from vsrdistill.tensor import Tensor


def sine(freq, seconds=1.0, amp=1.0):
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    return Waveform(np.round(amp * 32767 * np.sin(2 * np.pi * freq * t)).astype(np.int16))


def to64(m: Module) -> Module:
    return m.to(np.float64)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.zeros(10, np.int16), 8000)
    with pytest.raises(TypeError):
        Waveform(np.zeros(10, np.float32))
    with pytest.raises(ValueError):
        Waveform(np.zeros(0, np.int16))


def test_wav_round_trip(tmp_path):
    w = sine(300, 0.1, 0.5)
    write_wav(tmp_path / "a.wav", w)
    assert np.array_equal(read_wav(tmp_path / "a.wav").samples, w.samples)


def test_silence_is_floor_everywhere():
    mel = mel_spectrogram(Waveform(np.zeros(SAMPLE_RATE, np.int16)))
    assert (mel.frames == MelConfig().log_floor).all()


def test_frame_count_matches_formula():
    cfg = MelConfig()
    mel = mel_spectrogram(sine(440))
    expected = int(np.floor((1.0 - cfg.win) / cfg.hop)) + 1
    assert mel.frames.shape == (expected, cfg.n_mels) == (num_mel_frames(SAMPLE_RATE), 64)
    assert 96 <= expected <= 100  # about four mel frames per 40 ms video frame
    with pytest.raises(ValueError):
        mel_spectrogram(Waveform(np.zeros(100, np.int16)))


def test_sine_peak_lands_in_nearest_band():
    cfg = MelConfig()
    mel = mel_spectrogram(sine(440), cfg)
    # oracle: direct DFT of one windowed frame projected on the triangular filters
    win, hop = 400, 160
    x = sine(440).as_float()[5 * hop:5 * hop + win] * np.hanning(win)
    k = np.arange(cfg.n_fft // 2 + 1)
    dft = np.array([np.sum(np.pad(x, (0, cfg.n_fft - win)) * np.exp(-2j * np.pi * kk * np.arange(cfg.n_fft) / cfg.n_fft))
                    for kk in k])
    centers = mel_center_frequencies(cfg)
    nearest = int(np.argmin(np.abs(centers - 440)))
    assert np.argmax(mel.frames[5]) == nearest
    assert np.argmax(np.abs(dft) ** 2) * SAMPLE_RATE / cfg.n_fft == pytest.approx(440, abs=SAMPLE_RATE / cfg.n_fft)
    assert (np.argmax(mel.frames[2:-2], axis=1) == nearest).all()


def test_hop_shift_consistency():
    rng = np.random.default_rng(0)
    pcm = rng.integers(-3000, 3000, size=8000).astype(np.int16)
    a = mel_spectrogram(Waveform(pcm)).frames
    b = mel_spectrogram(Waveform(pcm[160:])).frames
    assert np.array_equal(a[1:1 + b.shape[0]], b)


def test_subsampler_lengths_and_gradient():
    rng = np.random.default_rng(1)
    sub = ConvSubsampler(16, 2, 8, rng)
    for ta, t in [(100, 25), (4, 1), (7, 1), (9, 2)]:
        out = conv_subsample(MelFeatures(rng.normal(size=(ta, 16)).astype(np.float32)), sub)
        assert out.shape == (t, 8)
    T.get_tape().clear()
    sub = to64(ConvSubsampler(8, 2, 4, rng))
    x = Tensor(rng.normal(size=(1, 9, 8)), dtype=np.float64)
    params = sub.parameters()
    assert grad_check(lambda v: T.tanh(sub(v, [9])[0]).sum(), x, wrt=params) < 1e-4


def test_subsampler_ignores_padding():
    rng = np.random.default_rng(2)
    sub = ConvSubsampler(16, 3, 8, rng)
    x = rng.normal(size=(1, 20, 16)).astype(np.float32)
    alone, _ = sub(Tensor(x), [20])
    padded = np.concatenate([x, rng.normal(size=(1, 12, 16)).astype(np.float32)], axis=1)
    out, lens = sub(Tensor(padded), [20])
    assert lens[0] == 5
    np.testing.assert_allclose(out.data[:, :5], alone.data, rtol=1e-5, atol=1e-6)
    T.get_tape().clear()


def test_stem_preserves_time_and_zero_clip_is_constant():
    rng = np.random.default_rng(3)
    stem = VisualStem((4, 8), 2, rng)
    out = visual_stem(VideoClip(rng.random((75, 24, 24))), stem)
    assert out.shape == (75, 8)
    zero = visual_stem(VideoClip(np.zeros((10, 24, 24))), stem).data
    assert np.allclose(zero, zero[0:1], atol=0)
    with pytest.raises(ValueError):
        stem(Tensor(np.zeros((1, 3, 6, 6))))
    with pytest.raises(ValueError):
        stem(Tensor(np.zeros((1, 0, 24, 24))))
    T.get_tape().clear()


def test_stem_time_equivariance():
    rng = np.random.default_rng(4)
    stem = VisualStem((2, 4), 1, rng)
    clip = rng.random((12, 16, 16)).astype(np.float32)
    j = 3
    a = visual_stem(VideoClip(clip), stem).data
    b = visual_stem(VideoClip(np.roll(clip, j, axis=0)), stem).data
    # interior positions away from both the wrap-around and the zero border
    np.testing.assert_allclose(b[j + 2:-2], a[2:-2 - j], rtol=1e-5, atol=1e-6)
    T.get_tape().clear()


def test_stem_gradient():
    rng = np.random.default_rng(5)
    stem = to64(VisualStem((2, 3), 1, rng))
    x = Tensor(rng.random((1, 4, 16, 16)), dtype=np.float64)
    assert grad_check(lambda v: T.tanh(stem(v)[0]).sum(), x, wrt=stem.parameters(), max_coords=30) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(400, 4000))
def test_num_mel_frames_matches_spectrogram(n):
    pcm = np.random.default_rng(n).integers(-100, 100, size=n).astype(np.int16)
    assert mel_spectrogram(Waveform(pcm)).frames.shape[0] == num_mel_frames(n)
