"""Audio and video frontends.

Audio: 16 kHz PCM16 -> log-Mel frames at a 10 ms hop -> two stride-2
convolutions, giving one encoder step per 40 ms (one per video frame at 25 fps).

Video: grayscale [T, S, S] clips -> two 3-d convolutions (stride 1 in time)
-> a small per-frame residual trunk -> global average pooling.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .nn import Conv2d, Conv3d, Linear, Module
from .tensor import Tensor

SAMPLE_RATE = 16000
FPS = 25
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS  # 640


@dataclass
class Waveform:
    samples: np.ndarray  # int16
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"only {SAMPLE_RATE} Hz audio is supported, got {self.sample_rate}")
        self.samples = np.asarray(self.samples)
        if self.samples.dtype != np.int16:
            raise TypeError("waveform samples must be int16 PCM")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-d sequence")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def as_float(self) -> np.ndarray:
        return self.samples.astype(np.float64) / 32768.0


@dataclass
class MelConfig:
    win: float = 0.025
    hop: float = 0.010
    n_fft: int = 512
    n_mels: int = 64
    log_floor: float = -10.0
    fmin: float = 0.0
    fmax: float = SAMPLE_RATE / 2


@dataclass
class MelFeatures:
    frames: np.ndarray  # [T_a, n_mels]
    hop: float = 0.010


@dataclass
class VideoClip:
    frames: np.ndarray  # [T_v, S, S] in [0, 1]
    fps: int = FPS

    def __post_init__(self):
        if self.fps != FPS:
            raise ValueError(f"only {FPS} fps video is supported")
        if self.frames.ndim != 3 or self.frames.shape[1] != self.frames.shape[2]:
            raise ValueError(f"expected square frames [T, S, S], got {self.frames.shape}")


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono PCM16")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2").astype(np.int16)
    return Waveform(data, rate)


def write_wav(path, wav: Waveform) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wav.sample_rate)
        w.writeframes(wav.samples.astype("<i2").tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: MelConfig, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Unit-peak triangular filters, shape [n_mels, n_fft // 2 + 1]."""
    freqs = np.fft.rfftfreq(cfg.n_fft, d=1.0 / sample_rate)
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


_FB_CACHE: dict = {}


def num_mel_frames(n_samples: int, cfg: MelConfig = MelConfig(), sample_rate: int = SAMPLE_RATE) -> int:
    win = int(round(cfg.win * sample_rate))
    hop = int(round(cfg.hop * sample_rate))
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def mel_spectrogram(wav: Waveform, cfg: MelConfig = MelConfig()) -> MelFeatures:
    """Log-Mel energies floored at ``cfg.log_floor``."""
    sr = wav.sample_rate
    win = int(round(cfg.win * sr))
    hop = int(round(cfg.hop * sr))
    if win > cfg.n_fft:
        raise ValueError("analysis window longer than n_fft")
    x = wav.as_float()
    if x.size < win:
        raise ValueError(f"waveform of {x.size} samples is shorter than one {win}-sample window")
    frames = sliding_window_view(x, win)[::hop] * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=-1)) ** 2
    key = (cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax, sr)
    fb = _FB_CACHE.get(key)
    if fb is None:
        fb = _FB_CACHE[key] = mel_filterbank(cfg, sr)
    # row-by-row product keeps each frame's value independent of its neighbours
    energy = np.einsum("tf,mf->tm", power, fb)
    with np.errstate(divide="ignore"):
        logmel = np.maximum(np.log(energy), cfg.log_floor)
    return MelFeatures(logmel.astype(np.float32), hop=cfg.hop)


def _time_mask(lengths: np.ndarray, t: int, dtype) -> np.ndarray:
    return (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)


class ConvSubsampler(Module):
    """Two stride-2 (time x mel) convolutions and a projection to the encoder width.

    Input [N, T_a, n_mels] log-Mel features, output [N, floor(T_a / 4), d].
    """

    def __init__(self, n_mels: int, channels: int, d: int, rng: np.random.Generator,
                 feat_offset: float = 5.0, feat_scale: float = 5.0):
        self.conv1 = Conv2d(1, channels, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, stride=2, padding=1)
        f = n_mels
        for _ in range(2):
            f = (f - 1) // 2 + 1
        self.proj = Linear(channels * f, d, rng)
        self.n_mels = n_mels
        self.feat_offset = feat_offset
        self.feat_scale = feat_scale

    @staticmethod
    def output_lengths(lengths) -> np.ndarray:
        return np.asarray(lengths) // 4

    def forward(self, feats: Tensor, lengths) -> tuple[Tensor, np.ndarray]:
        n, t, f = feats.shape
        if f != self.n_mels:
            raise ValueError(f"expected {self.n_mels} mel bins, got {f}")
        lengths = np.asarray(lengths)
        if t < 4 or lengths.min() < 4:
            raise ValueError("need at least 4 mel frames to subsample")
        x = (feats + self.feat_offset) * (1.0 / self.feat_scale)
        x = x * _time_mask(lengths, t, x.dtype)[:, :, None]
        x = x.reshape(n, 1, t, f)
        x = T.relu(self.conv1(x))
        t1 = x.shape[2]
        # zero positions past each element's end so padding matches the zero border
        x = x * _time_mask((lengths + 1) // 2, t1, x.dtype)[:, None, :, None]
        x = T.relu(self.conv2(x))
        n, c, t2, f2 = x.shape
        x = x.transpose(0, 2, 1, 3).reshape(n, t2, c * f2)
        out_t = t // 4
        if t2 != out_t:
            x = x[:, :out_t]
        return self.proj(x), self.output_lengths(lengths)


class ResidualBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv1(x))
        return T.relu(x + self.conv2(h))


class VisualStem(Module):
    """Two 3-d convolutions then a per-frame residual trunk with global pooling.

    Input [N, T, S, S], output [N, T, channels[1]].
    """

    min_size = 8

    def __init__(self, channels: tuple[int, int], n_blocks: int, rng: np.random.Generator):
        c1, c2 = channels
        self.conv1 = Conv3d(1, c1, 3, rng, stride=(1, 2, 2), padding=1)
        self.conv2 = Conv3d(c1, c2, 3, rng, stride=(1, 2, 2), padding=1)
        self.blocks = [ResidualBlock(c2, rng) for _ in range(n_blocks)]
        self.d_out = c2

    def forward(self, video: Tensor, lengths=None) -> tuple[Tensor, np.ndarray]:
        if video.ndim != 4:
            raise ValueError(f"expected video batch [N, T, S, S], got {video.shape}")
        n, t, h, w = video.shape
        if t < 1:
            raise ValueError("empty clip")
        if h != w or h < self.min_size:
            raise ValueError(f"frame size {h}x{w} below the {self.min_size}px minimum or not square")
        lengths = np.full(n, t) if lengths is None else np.asarray(lengths)
        mask = _time_mask(lengths, t, video.dtype)[:, None, :, None, None]
        x = video.reshape(n, 1, t, h, w) * mask
        x = T.relu(self.conv1(x)) * mask
        x = T.relu(self.conv2(x)) * mask
        c, hh, ww = x.shape[1], x.shape[3], x.shape[4]
        x = x.transpose(0, 2, 1, 3, 4).reshape(n * t, c, hh, ww)
        for block in self.blocks:
            x = block(x)
        x = x.mean(axis=(2, 3))
        return x.reshape(n, t, c), lengths


class VisualFrontend(Module):
    """Visual stem followed by a projection to the Conformer width."""

    def __init__(self, stem: VisualStem, d: int, rng: np.random.Generator):
        self.stem = stem
        self.proj = Linear(stem.d_out, d, rng)

    def forward(self, video: Tensor, lengths=None) -> tuple[Tensor, np.ndarray]:
        x, lengths = self.stem(video, lengths)
        return self.proj(x), lengths


def visual_stem(clip: VideoClip, stem: VisualStem) -> Tensor:
    """Run one clip through the stem: [T_v, S, S] -> [T_v, d_stem]."""
    x = Tensor(clip.frames[None].astype(stem.conv1.weight.dtype))
    out, _ = stem(x)
    return out[0]


def conv_subsample(mel: MelFeatures, sub: ConvSubsampler) -> Tensor:
    """Run one utterance through the subsampler: [T_a, n_mels] -> [T_a // 4, d]."""
    x = Tensor(mel.frames[None].astype(sub.proj.weight.dtype))
    out, _ = sub(x, [mel.frames.shape[0]])
    return out[0]
