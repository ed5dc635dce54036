"""Mouth-ROI cropping, resizing, temporal masking, random slicing, and batching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Sample
from .frontends import FPS, SAMPLES_PER_FRAME, Waveform, num_mel_frames

EVAL_SCALE = 2.5
SCALE_RANGE = (2.0, 3.0)
JITTER_FRACTION = 0.2  # displacement bound as a fraction of B
MASK_FRACTION = 0.4


@dataclass
class CropParams:
    b: float
    dx: float
    dy: float


def mouth_geometry(landmarks) -> tuple[float, float, float]:
    """Center (mean of the 4 mouth points) and width (corner-to-corner distance)."""
    pts = np.asarray(landmarks, dtype=np.float64).reshape(4, 2)
    cx, cy = pts.mean(axis=0)
    w = float(np.hypot(*(pts[1] - pts[0])))
    return float(cx), float(cy), w


def sample_crop_params(w_m: float, rng: Optional[np.random.Generator]) -> CropParams:
    """Train mode (``rng`` given): b ~ U(2, 3), d ~ U(-B/5, B/5). Eval mode: b = 2.5, d = 0."""
    if rng is None:
        return CropParams(EVAL_SCALE, 0.0, 0.0)
    b = float(rng.uniform(*SCALE_RANGE))
    bound = JITTER_FRACTION * b * w_m
    dx, dy = rng.uniform(-bound, bound, size=2)
    return CropParams(b, float(dx), float(dy))


def crop_box(cx: float, cy: float, w_m: float, params: CropParams) -> tuple[int, int, int]:
    """Top-left corner and side of the B x B box around the displaced center."""
    side = int(round(params.b * w_m))
    if side < 1:
        raise ValueError("crop side rounds to zero")
    x0 = int(np.floor(cx + params.dx - side / 2 + 0.5))
    y0 = int(np.floor(cy + params.dy - side / 2 + 0.5))
    return x0, y0, side


def _cut(frame: np.ndarray, x0: int, y0: int, side: int) -> np.ndarray:
    h, w = frame.shape
    out = np.zeros((side, side), dtype=frame.dtype)
    xs, xe = max(x0, 0), min(x0 + side, w)
    ys, ye = max(y0, 0), min(y0 + side, h)
    if xs < xe and ys < ye:
        out[ys - y0:ye - y0, xs - x0:xe - x0] = frame[ys:ye, xs:xe]
    return out


def crop_roi(frame: np.ndarray, landmarks, rng: Optional[np.random.Generator] = None,
             params: Optional[CropParams] = None) -> np.ndarray:
    """Crop one frame around the mouth; areas outside the image are zero.

    Pass ``rng`` for a train-mode draw, nothing for the deterministic eval crop,
    or explicit ``params`` to reuse a draw.
    """
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ValueError("crop_roi expects a single 2-d frame")
    cx, cy, w_m = mouth_geometry(landmarks)
    if w_m == 0:
        raise ValueError("degenerate landmarks: mouth width is zero")
    h, w = frame.shape
    pts = np.asarray(landmarks).reshape(4, 2)
    if (pts < 0).any() or (pts[:, 0] >= w).any() or (pts[:, 1] >= h).any():
        raise ValueError("landmarks outside the frame")
    if params is None:
        params = sample_crop_params(w_m, rng)
    return _cut(frame, *crop_box(cx, cy, w_m, params))


def crop_clip(clip: np.ndarray, landmarks: np.ndarray, rng: Optional[np.random.Generator] = None):
    """Crop every frame with one scale/displacement draw per clip.

    The box follows each frame's mouth center; its side uses the clip's median width.
    """
    pts = np.asarray(landmarks, dtype=np.float64)
    centers = pts.mean(axis=1)
    widths = np.hypot(*(pts[:, 1] - pts[:, 0]).T)
    w_m = float(np.median(widths))
    if w_m == 0:
        raise ValueError("degenerate landmarks: mouth width is zero")
    params = sample_crop_params(w_m, rng)
    return np.stack([_cut(f, *crop_box(cx, cy, w_m, params)) for f, (cx, cy) in zip(clip, centers)])


def _bilinear_weights(n_in: int, n_out: int):
    # half-pixel centers, edge-clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def normalize_resize(cropped: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of [..., B, B] uint8 crops to [..., S, S] float32 in [0, 1]."""
    cropped = np.asarray(cropped)
    if cropped.ndim < 2 or cropped.shape[-1] == 0 or cropped.shape[-2] == 0:
        raise ValueError("empty crop")
    x = cropped.astype(np.float64)
    if cropped.dtype == np.uint8:
        x = x / 255.0
    ry = _bilinear_weights(x.shape[-2], size)
    rx = _bilinear_weights(x.shape[-1], size)
    out = ry @ x @ rx.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def time_mask(clip: np.ndarray, rng: np.random.Generator, fps: int = FPS) -> np.ndarray:
    """In each disjoint one-second window, replace a random run of up to 40% of its
    frames by the window's mean frame."""
    if fps != FPS:
        raise ValueError(f"time masking assumes {FPS} fps")
    out = np.array(clip, copy=True)
    for start in range(0, out.shape[0], fps):
        win = out[start:start + fps]
        budget = int(np.floor(MASK_FRACTION * win.shape[0]))
        m = int(rng.integers(0, budget + 1))
        if m == 0:
            continue
        s = int(rng.integers(0, win.shape[0] - m + 1))
        mean = win.mean(axis=0, dtype=np.float64).astype(out.dtype)
        win[s:s + m] = mean
    return out


def slice_random(sample: Sample, length: int, rng: np.random.Generator):
    """A ``length``-frame window with its time-aligned audio; short samples pass whole.

    Returns ``(waveform, clip, landmarks, start_frame)``.
    """
    t = sample.num_frames
    if t < 1:
        raise ValueError("empty clip")
    if t <= length:
        return sample.waveform, sample.clip, sample.landmarks, 0
    start = int(rng.integers(0, t - length + 1))
    pcm = sample.waveform.samples[start * SAMPLES_PER_FRAME:(start + length) * SAMPLES_PER_FRAME]
    return Waveform(pcm), sample.clip[start:start + length], sample.landmarks[start:start + length], start


def prepare_video(clip: np.ndarray, landmarks: np.ndarray, size: int,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Crop, resize and (train mode only) time-mask a raw clip: [T, S, S] float32."""
    frames = normalize_resize(crop_clip(clip, landmarks, rng), size)
    if rng is not None:
        frames = time_mask(frames, rng)
    return frames


@dataclass
class Item:
    mel: Optional[np.ndarray]  # [T_a, n_mels]
    video: np.ndarray  # [T, S, S] float32
    target: Optional[list] = None


@dataclass
class Batch:
    mel: Optional[np.ndarray]  # [N, T_a, n_mels]
    mel_lengths: Optional[np.ndarray]
    video: np.ndarray  # [N, T_v, S, S]
    video_lengths: np.ndarray
    targets: Optional[list]

    def __len__(self) -> int:
        return self.video.shape[0]


def batch_pad(items: Sequence[Item], include_transcripts: bool = True) -> Batch:
    """Zero-pad to the longest element; true lengths travel with the batch."""
    if not items:
        raise ValueError("empty batch")
    v_lens = np.array([it.video.shape[0] for it in items])
    s = items[0].video.shape[1:]
    video = np.zeros((len(items), int(v_lens.max()), *s), dtype=np.float32)
    for i, it in enumerate(items):
        if it.video.shape[1:] != s:
            raise ValueError("all clips in a batch must share the frame size")
        video[i, :v_lens[i]] = it.video
    mel = mel_lens = None
    if items[0].mel is not None:
        feats = [it.mel for it in items]
        mel_lens = np.array([f.shape[0] for f in feats])
        mel = np.zeros((len(items), int(mel_lens.max()), feats[0].shape[1]), dtype=np.float32)
        for i, f in enumerate(feats):
            mel[i, :f.shape[0]] = f
    targets = None
    if include_transcripts:
        if any(it.target is None for it in items):
            raise ValueError("transcripts requested but an item is unlabeled")
        targets = [list(it.target) for it in items]
    return Batch(mel, mel_lens, video, v_lens, targets)


def slice_mel(mel: np.ndarray, start: int, n_frames: int, n_samples: int) -> np.ndarray:
    """Mel frames of the audio interval starting at video frame ``start``.

    With a 10 ms hop, frame ``4 * start + i`` of the full utterance covers exactly
    the samples of frame ``i`` of the sliced audio, so slicing features equals
    recomputing them on the sliced waveform.
    """
    return mel[4 * start:4 * start + num_mel_frames(n_samples)]


def encoder_steps(n_samples: int) -> int:
    """Audio encoder steps produced by a waveform of ``n_samples``."""
    return num_mel_frames(n_samples) // 4
