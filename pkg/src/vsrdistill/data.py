"""Synthetic audio-visual corpus: generation, the AVSM sample container, and manifests.

Each sample couples a transcript to a waveform in which every character is a
120 ms tone at a character-specific frequency, and to a silent clip in which
the same character is drawn as an oriented bar inside a jittered mouth region.
Both modalities are laid out on the 40 ms video-frame grid, so either one alone
determines the transcript.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .frontends import SAMPLE_RATE, SAMPLES_PER_FRAME, Waveform

MAGIC = b"AVSM"
VERSION = 1
SPLITS = ("pretrain", "finetune", "test")
LABELED_SPLITS = ("finetune", "test")

CHAR_FRAMES = 3  # 120 ms per character
GAP_FRAMES = 1  # 40 ms between words
EDGE_FRAMES = 2  # silence before the first and after the last word


@dataclass
class Sample:
    waveform: Waveform
    clip: np.ndarray  # uint8 [T_raw, H_raw, W_raw]
    transcript: str
    landmarks: np.ndarray  # [T_raw, 4, 2] (x, y): left corner, right corner, top lip, bottom lip

    def __post_init__(self):
        if self.clip.ndim != 3:
            raise ValueError("clip must be [T, H, W]")
        if self.landmarks.shape != (self.clip.shape[0], 4, 2):
            raise ValueError(f"landmarks must be [T, 4, 2], got {self.landmarks.shape}")
        frames_from_audio = self.waveform.samples.size / SAMPLES_PER_FRAME
        if abs(frames_from_audio - self.clip.shape[0]) > 1:
            raise ValueError("clip and waveform durations differ by more than one frame")

    @property
    def num_frames(self) -> int:
        return self.clip.shape[0]

    @property
    def duration(self) -> float:
        return self.waveform.duration


@dataclass
class CorpusSpec:
    vocab: str = "abcdefgh"
    n_samples: int = 2000
    words_per_sample: tuple = (2, 4)
    chars_per_word: tuple = (2, 3)
    seed: int = 0
    audio_sigma: float = 0.02
    video_sigma: float = 0.06
    frame_size: int = 48
    fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if len(set(self.vocab)) != len(self.vocab) or len(self.vocab) < 2:
            raise ValueError("vocab needs at least two distinct characters")
        if " " in self.vocab:
            raise ValueError("space is reserved as the word separator")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must be three values summing to 1")
        self.words_per_sample = tuple(self.words_per_sample)
        self.chars_per_word = tuple(self.chars_per_word)
        self.fractions = tuple(self.fractions)

    def split_counts(self) -> tuple[int, int, int]:
        n_pre = int(round(self.n_samples * self.fractions[0]))
        n_ft = int(round(self.n_samples * self.fractions[1]))
        return n_pre, n_ft, self.n_samples - n_pre - n_ft

    def split_of(self, index: int) -> str:
        n_pre, n_ft, _ = self.split_counts()
        if index < n_pre:
            return "pretrain"
        return "finetune" if index < n_pre + n_ft else "test"


def transcript_symbols(vocab: str) -> list[str]:
    """Output symbols for a corpus vocabulary: the characters plus the word separator."""
    return list(vocab) + [" "]


def char_frequency(i: int) -> float:
    return 400.0 + 300.0 * i


def glyph_angle(i: int, n: int) -> float:
    # offset by half a step so no glyph is horizontal like the resting mouth
    return (i + 0.5) * np.pi / n


# ----------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------

def random_transcript(spec: CorpusSpec, rng: np.random.Generator) -> str:
    words = []
    for _ in range(int(rng.integers(spec.words_per_sample[0], spec.words_per_sample[1] + 1))):
        n = int(rng.integers(spec.chars_per_word[0], spec.chars_per_word[1] + 1))
        word = []
        for _ in range(n):
            # no adjacent repeats: a held tone or glyph cannot show a character boundary
            choices = [c for c in spec.vocab if not word or c != word[-1]]
            word.append(choices[int(rng.integers(len(choices)))])
        words.append("".join(word))
    return " ".join(words)


def frame_layout(transcript: str) -> list[Optional[str]]:
    """Per-frame character (``None`` for silence) on the 40 ms grid."""
    frames: list[Optional[str]] = [None] * EDGE_FRAMES
    for w, word in enumerate(transcript.split(" ")):
        if w:
            frames += [None] * GAP_FRAMES
        for ch in word:
            frames += [ch] * CHAR_FRAMES
    return frames + [None] * EDGE_FRAMES


def synth_audio(layout, vocab: str, sigma: float, rng: np.random.Generator) -> Waveform:
    n = len(layout) * SAMPLES_PER_FRAME
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    ramp = int(0.005 * SAMPLE_RATE)
    env = np.ones(CHAR_FRAMES * SAMPLES_PER_FRAME)
    env[:ramp] = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
    env[-ramp:] = env[:ramp][::-1]
    i = 0
    while i < len(layout):
        ch = layout[i]
        if ch is None:
            i += 1
            continue
        lo = i * SAMPLES_PER_FRAME
        hi = lo + env.size
        f = char_frequency(vocab.index(ch))
        x[lo:hi] += 0.3 * env * np.sin(2 * np.pi * f * t[lo:hi])
        i += CHAR_FRAMES
    x += rng.normal(0.0, sigma, size=n)
    pcm = np.clip(np.round(x * 32767), -32768, 32767).astype(np.int16)
    return Waveform(pcm)


def _draw_segment(img, cx, cy, angle, length, thickness, value):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = np.cos(angle), np.sin(angle)
    px, py = xx + 0.5 - cx, yy + 0.5 - cy
    along = np.clip(px * dx + py * dy, -length / 2, length / 2)
    dist = np.hypot(px - along * dx, py - along * dy)
    cover = np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)
    np.maximum(img, value * cover, out=img)


def synth_video(layout, vocab: str, size: int, sigma: float, rng: np.random.Generator):
    n = len(layout)
    cx0 = size / 2 + rng.uniform(-size / 12, size / 12)
    cy0 = size / 2 + rng.uniform(-size / 12, size / 12)
    width = rng.uniform(0.22, 0.28) * size
    frames = np.empty((n, size, size), dtype=np.uint8)
    marks = np.empty((n, 4, 2), dtype=np.uint16)
    for i, ch in enumerate(layout):
        cx = cx0 + rng.normal(0, 0.4)
        cy = cy0 + rng.normal(0, 0.4)
        img = np.full((size, size), 0.25)
        if ch is None:
            _draw_segment(img, cx, cy, 0.0, 0.6 * width, 0.08 * width, 0.5)
            open_h = 0.15 * width
        else:
            k = vocab.index(ch)
            _draw_segment(img, cx, cy, glyph_angle(k, len(vocab)), 0.9 * width, 0.18 * width, 1.0)
            open_h = 0.45 * width
        img += rng.normal(0.0, sigma, size=img.shape)
        frames[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
        pts = np.array([[cx - width / 2, cy], [cx + width / 2, cy],
                        [cx, cy - open_h / 2], [cx, cy + open_h / 2]])
        pts += rng.normal(0, 0.3, size=pts.shape)
        marks[i] = np.clip(np.round(pts), 0, size - 1).astype(np.uint16)
    return frames, marks


def generate_sample(spec: CorpusSpec, index: int) -> tuple[Sample, str]:
    """Deterministic in ``(spec.seed, index)``; returns the sample and its split."""
    rng = np.random.default_rng([spec.seed, index])
    text = random_transcript(spec, rng)
    layout = frame_layout(text)
    wav = synth_audio(layout, spec.vocab, spec.audio_sigma, rng)
    clip, marks = synth_video(layout, spec.vocab, spec.frame_size, spec.video_sigma, rng)
    split = spec.split_of(index)
    return Sample(wav, clip, text, marks), split


# ----------------------------------------------------------------------
# sample container
# ----------------------------------------------------------------------

def write_sample(path, sample: Sample, labeled: bool = True) -> None:
    t, h, w = sample.clip.shape
    text = sample.transcript.encode("utf-8") if labeled else b""
    if len(text) > 0xFFFF:
        raise ValueError("transcript too long for the container")
    parts = [
        MAGIC,
        struct.pack("<IIIII", VERSION, t, h, w, sample.waveform.samples.size),
        sample.waveform.samples.astype("<i2").tobytes(),
        np.ascontiguousarray(sample.clip, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(sample.landmarks, dtype="<u2").tobytes(),
        struct.pack("<H", len(text)),
        text,
    ]
    _atomic_write(path, b"".join(parts))


def read_sample(path) -> Sample:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an AVSM sample (bad magic)")
    version, t, h, w, n_pcm = struct.unpack_from("<IIIII", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported AVSM version {version}")
    off = 24
    need = off + 2 * n_pcm + t * h * w + t * 16 + 2
    if len(buf) < need:
        raise ValueError(f"{path}: truncated sample file")
    pcm = np.frombuffer(buf, dtype="<i2", count=n_pcm, offset=off).astype(np.int16)
    off += 2 * n_pcm
    clip = np.frombuffer(buf, dtype=np.uint8, count=t * h * w, offset=off).reshape(t, h, w).copy()
    off += t * h * w
    marks = np.frombuffer(buf, dtype="<u2", count=t * 8, offset=off).reshape(t, 4, 2).astype(np.uint16)
    off += t * 16
    (n_text,) = struct.unpack_from("<H", buf, off)
    off += 2
    if len(buf) < off + n_text:
        raise ValueError(f"{path}: truncated transcript")
    text = buf[off:off + n_text].decode("utf-8")
    return Sample(Waveform(pcm), clip, text, marks)


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ----------------------------------------------------------------------
# manifest
# ----------------------------------------------------------------------

@dataclass
class ManifestRecord:
    path: str
    duration_s: float
    split: str
    transcript: Optional[str] = None


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        for r in self.records:
            if (r.split in LABELED_SPLITS) != (r.transcript is not None):
                raise ValueError(f"{r.path}: transcript must be present iff split is labeled")

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def write(self, path) -> None:
        lines = [f"{r.path}\t{r.duration_s:.3f}\t{r.split}\t{r.transcript or ''}\n" for r in self.records]
        _atomic_write(path, "".join(lines).encode("utf-8"))

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            rel, dur, split, text = parts
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            records.append(ManifestRecord(rel, float(dur), split, text if split in LABELED_SPLITS else None))
        return cls(records, path.parent)


def generate_corpus(spec: CorpusSpec, out_dir) -> Manifest:
    """Write every sample plus ``manifest.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.n_samples):
        sample, split = generate_sample(spec, i)
        rel = f"samples/{i:06d}.avsm"
        labeled = split in LABELED_SPLITS
        write_sample(out / rel, sample, labeled=labeled)
        records.append(ManifestRecord(rel, sample.duration, split, sample.transcript if labeled else None))
    manifest = Manifest(records, out)
    manifest.write(out / "manifest.tsv")
    return manifest


def load_split(manifest: Manifest, split: str) -> list[Sample]:
    samples = []
    for r in manifest.split(split):
        p = manifest.resolve(r)
        if not p.exists():
            raise FileNotFoundError(f"missing sample file {p}")
        samples.append(read_sample(p))
    return samples
