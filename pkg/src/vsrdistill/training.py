"""Optimizer, learning-rate schedules, and the three training stages.

1. ``train_teacher``: audio CTC model on labeled audio.
2. ``pretrain_student``: visual base regressed onto the frozen audio base's
   encodings, no transcripts involved.
3. ``finetune``: visual base + audio head trained with CTC plus the weighted
   encoding loss against the same frozen audio base.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import Batch, Item, batch_pad, prepare_video, slice_mel, slice_random
from .conformer import EncoderStack, set_dropout_seed
from .ctc import TokenVocab, ctc_greedy_decode, ctc_loss_batched
from .data import Sample
from .frontends import mel_spectrogram
from .nn import Module, Parameter
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, step: int, detail: str):
        super().__init__(f"{stage}: non-finite values at step {step} ({detail}); "
                         f"parameters restored to the last good state")
        self.step = step


# ----------------------------------------------------------------------
# optimizer and schedules
# ----------------------------------------------------------------------

@dataclass
class LrSchedule:
    kind: str = "constant"  # constant | warmup_inv_sqrt
    rate: float = 1e-4  # constant rate, or the peak for warmup_inv_sqrt
    warmup_steps: int = 10000

    def __post_init__(self):
        if self.kind not in ("constant", "warmup_inv_sqrt"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be at least 1")


def lr_at(sched: LrSchedule, step: int) -> float:
    if step < 1:
        raise ValueError(f"steps are counted from 1, got {step}")
    if sched.kind == "constant":
        return sched.rate
    w = sched.warmup_steps
    return sched.rate * min(step / w, math.sqrt(w / step))


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def for_params(cls, params: Sequence[Parameter], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Parameter], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              rate: float) -> None:
    """One bias-corrected Adam update in place. Missing gradients count as zero."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter, gradient and state counts differ")
    for i, g in enumerate(grads):
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {i} of shape {g.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (rate * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def clip_grad_norm(grads: Sequence[Optional[np.ndarray]], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale
    return total


class Optimizer:
    def __init__(self, params: Sequence[Parameter], schedule: LrSchedule, clip: float = 5.0):
        self.params = list(params)
        self.schedule = schedule
        self.clip = clip
        self.state = AdamState.for_params(self.params)

    def step(self) -> float:
        grads = [p.grad for p in self.params]
        norm = clip_grad_norm(grads, self.clip)
        adam_step(self.params, grads, self.state, lr_at(self.schedule, self.state.step + 1))
        for p in self.params:
            p.grad = None
        return norm


# ----------------------------------------------------------------------
# run configuration and data feeding
# ----------------------------------------------------------------------

@dataclass
class TrainRunConfig:
    batch_size: int = 16
    max_iterations: int = 1000
    eval_interval: int = 200
    seed: int = 0
    lambda_enc: float = 1.0
    slice_frames: int = 75
    image_size: int = 24
    schedule: LrSchedule = field(default_factory=LrSchedule)
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lambda_enc < 0:
            raise ValueError("lambda_enc must be non-negative")
        if self.max_iterations < 0 or self.eval_interval < 1:
            raise ValueError("bad iteration counts")


class BatchSampler:
    """Reshuffles the index set every epoch; batches never straddle epochs."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ValueError("no training samples")
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._order: list = []

    def next(self) -> list[int]:
        if len(self._order) < self.batch_size:
            self._order = self.rng.permutation(self.n).tolist()
        out, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return out


def utterance_mel(sample: Sample) -> np.ndarray:
    return mel_spectrogram(sample.waveform).frames


def make_item(sample: Sample, mel: Optional[np.ndarray], vocab: Optional[TokenVocab], size: int,
              rng: Optional[np.random.Generator], slice_frames: Optional[int] = None,
              video: bool = True) -> Item:
    """Preprocess one sample given its full-utterance mel (or ``None`` to skip audio).

    ``rng`` switches on train-mode augmentation and, with ``slice_frames``, random slicing.
    """
    clip, marks = sample.clip, sample.landmarks
    if slice_frames is not None and rng is not None:
        wav, clip, marks, start = slice_random(sample, slice_frames, rng)
        if mel is not None:
            mel = slice_mel(mel, start, clip.shape[0], wav.samples.size)
    frames = prepare_video(clip, marks, size, rng) if video else np.zeros((clip.shape[0], 1, 1), np.float32)
    target = vocab.encode(sample.transcript) if vocab is not None else None
    return Item(mel, frames, target)


def _tensor(x: np.ndarray) -> Tensor:
    return Tensor(x.astype(T.DEFAULT_DTYPE), _copy=False)


def audio_logits(model: EncoderStack, batch: Batch) -> tuple[Tensor, np.ndarray]:
    return model(_tensor(batch.mel), batch.mel_lengths)


def encoding_loss(enc_a: Tensor, len_a, enc_v: Tensor, len_v) -> Tensor:
    """Squared L2 distance over features, averaged over the batch and valid time steps.

    Sequences are cut to the shorter of the two; ``enc_a`` is treated as a constant.
    """
    t = min(enc_a.shape[1], enc_v.shape[1])
    lengths = np.minimum(np.minimum(np.asarray(len_a), np.asarray(len_v)), t)
    if enc_a.shape[2] != enc_v.shape[2]:
        raise ValueError(f"encoding widths differ: audio {enc_a.shape[2]}, video {enc_v.shape[2]}")
    mask = (np.arange(t)[None, :] < lengths[:, None]).astype(enc_v.dtype)
    if mask.sum() == 0:
        raise ValueError("no valid time steps for the encoding loss")
    target = enc_a.data[:, :t]
    diff = enc_v[:, :t] - target
    per_step = (diff * diff).sum(axis=-1)
    return (per_step * mask).sum() * (1.0 / float(mask.sum()))


def teacher_encodings(teacher_base: EncoderStack, batch: Batch) -> tuple[Tensor, np.ndarray]:
    with T.no_grad():
        enc, lens = audio_logits(teacher_base, batch)
    return enc.detach(), lens


@dataclass
class StepRecord:
    step: int
    loss: float
    loss_ctc: Optional[float] = None
    loss_enc: Optional[float] = None


EvalHook = Callable[[int, list], None]


def _run(stage: str, model: Module, opt: Optimizer, n_steps: int, step_fn, eval_interval: int,
         on_eval: Optional[EvalHook]) -> list[StepRecord]:
    """Shared loop: step, log, evaluate, and roll back on divergence."""
    history: list[StepRecord] = []
    good = {k: v.copy() for k, v in model.state_dict().items()}
    tape = T.get_tape()
    for step in range(1, n_steps + 1):
        model.train()
        try:
            rec = step_fn(step)
            opt.step()
        except NonFiniteError as e:
            tape.clear()
            model.load_state_dict(good)
            raise TrainingDiverged(stage, step, str(e)) from e
        history.append(rec)
        if step % eval_interval == 0 or step == n_steps:
            good = {k: v.copy() for k, v in model.state_dict().items()}
            log.info("%s step %d loss %.4f", stage, step, rec.loss)
            if on_eval is not None:
                model.eval()
                on_eval(step, history)
    model.eval()
    return history


# ----------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------

def train_teacher(model: EncoderStack, samples: Sequence[Sample], vocab: TokenVocab, cfg: TrainRunConfig,
                  on_eval: Optional[EvalHook] = None) -> list[StepRecord]:
    """CTC training of the audio model on whole labeled utterances."""
    if any(not s.transcript for s in samples):
        raise ValueError("teacher training needs labeled samples")
    rng = np.random.default_rng([cfg.seed, 1])
    set_dropout_seed(model, cfg.seed)
    model.requires_grad_(True)
    opt = Optimizer(model.parameters(), cfg.schedule, cfg.clip_norm)
    sampler = BatchSampler(len(samples), cfg.batch_size, rng)
    items = [make_item(s, utterance_mel(s), vocab, 1, None, video=False) for s in samples]

    def step_fn(step):
        batch = batch_pad([items[i] for i in sampler.next()])
        logits, lens = audio_logits(model, batch)
        loss = ctc_loss_batched(logits, batch.targets, lens)
        loss.backward()
        return StepRecord(step, loss.item(), loss_ctc=loss.item())

    return _run("teacher", model, opt, cfg.max_iterations, step_fn, cfg.eval_interval, on_eval)


def _check_widths(teacher_base: EncoderStack, student: EncoderStack) -> None:
    if teacher_base.d_out != student.d_out:
        raise ValueError(f"teacher base width {teacher_base.d_out} != student width {student.d_out}")


def pretrain_student(teacher_base: EncoderStack, student: EncoderStack, samples: Sequence[Sample],
                     cfg: TrainRunConfig, on_eval: Optional[EvalHook] = None) -> list[StepRecord]:
    """Fit the visual base to the frozen audio base on random aligned slices."""
    _check_widths(teacher_base, student)
    teacher_base.eval().requires_grad_(False)
    rng = np.random.default_rng([cfg.seed, 2])
    set_dropout_seed(student, cfg.seed)
    student.requires_grad_(True)
    opt = Optimizer(student.parameters(), cfg.schedule, cfg.clip_norm)
    sampler = BatchSampler(len(samples), cfg.batch_size, rng)
    mels = [utterance_mel(s) for s in samples]

    def step_fn(step):
        picked = [make_item(samples[i], mels[i], None, cfg.image_size, rng, cfg.slice_frames)
                  for i in sampler.next()]
        batch = batch_pad(picked, include_transcripts=False)
        enc_a, len_a = teacher_encodings(teacher_base, batch)
        enc_v, len_v = student(_tensor(batch.video), batch.video_lengths)
        loss = encoding_loss(enc_a, len_a, enc_v, len_v)
        loss.backward()
        return StepRecord(step, loss.item(), loss_enc=loss.item())

    return _run("pretrain", student, opt, cfg.max_iterations, step_fn, cfg.eval_interval, on_eval)


class _Pair(Module):
    def __init__(self, base: EncoderStack, head: EncoderStack):
        self.base = base
        self.head = head


def finetune_losses(base: EncoderStack, head: EncoderStack, teacher_base: EncoderStack, batch: Batch,
                    lambda_enc: float):
    """``(total, ctc, enc)`` for one batch; the encoding term uses the frozen audio base."""
    enc_v, len_v = base(_tensor(batch.video), batch.video_lengths)
    logits, lens = head(enc_v, len_v)
    l_ctc = ctc_loss_batched(logits, batch.targets, lens)
    if batch.mel is None:
        raise ValueError("the encoding regularizer needs paired audio")
    enc_a, len_a = teacher_encodings(teacher_base, batch)
    l_enc = encoding_loss(enc_a, len_a, enc_v, len_v)
    total = l_ctc + lambda_enc * l_enc if lambda_enc else l_ctc + 0.0 * l_enc
    return total, l_ctc, l_enc


def finetune(base: EncoderStack, head: EncoderStack, teacher_base: EncoderStack, samples: Sequence[Sample],
             vocab: TokenVocab, cfg: TrainRunConfig, on_eval: Optional[EvalHook] = None) -> list[StepRecord]:
    """Joint CTC + encoding-loss training of visual base and audio head on whole labeled clips."""
    _check_widths(teacher_base, base)
    if head.d_out != vocab.num_classes:
        raise ValueError(f"head emits {head.d_out} classes, vocabulary has {vocab.num_classes}")
    teacher_base.eval().requires_grad_(False)
    rng = np.random.default_rng([cfg.seed, 3])
    pair = _Pair(base, head)
    set_dropout_seed(pair, cfg.seed)
    pair.requires_grad_(True)
    opt = Optimizer(pair.parameters(), cfg.schedule, cfg.clip_norm)
    sampler = BatchSampler(len(samples), cfg.batch_size, rng)
    mels = [utterance_mel(s) for s in samples]

    def step_fn(step):
        picked = [make_item(samples[i], mels[i], vocab, cfg.image_size, rng) for i in sampler.next()]
        batch = batch_pad(picked)
        total, l_ctc, l_enc = finetune_losses(base, head, teacher_base, batch, cfg.lambda_enc)
        total.backward()
        return StepRecord(step, total.item(), loss_ctc=l_ctc.item(), loss_enc=l_enc.item())

    return _run("finetune", pair, opt, cfg.max_iterations, step_fn, cfg.eval_interval, on_eval)


# ----------------------------------------------------------------------
# inference
# ----------------------------------------------------------------------

def decode_batch(logits: Tensor, lengths, vocab: TokenVocab) -> list[str]:
    return [vocab.decode(ctc_greedy_decode(logits.data[i], int(l))) for i, l in enumerate(lengths)]


def transcribe_audio(model: EncoderStack, samples: Sequence[Sample], vocab: TokenVocab,
                     batch_size: int = 32) -> list[str]:
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            items = [make_item(s, utterance_mel(s), None, 1, None, video=False) for s in samples[i:i + batch_size]]
            logits, lens = audio_logits(model, batch_pad(items, include_transcripts=False))
            out += decode_batch(logits, lens, vocab)
    return out


def transcribe_video(base: EncoderStack, head: EncoderStack, samples: Sequence[Sample], vocab: TokenVocab,
                     image_size: int, batch_size: int = 32) -> list[str]:
    base.eval()
    head.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            items = [make_item(s, None, None, image_size, None) for s in samples[i:i + batch_size]]
            batch = batch_pad(items, include_transcripts=False)
            enc, lens = base(_tensor(batch.video), batch.video_lengths)
            logits, lens = head(enc, lens)
            out += decode_batch(logits, lens, vocab)
    return out


def infer_e2e(base: EncoderStack, head: EncoderStack, video: np.ndarray, vocab: TokenVocab) -> str:
    """Greedy transcript of one preprocessed clip [T, S, S] through head(base(.))."""
    video = np.asarray(video)
    if video.ndim != 3 or video.shape[0] == 0:
        raise ValueError("expected a non-empty clip [T, S, S]")
    base.eval()
    head.eval()
    with T.no_grad():
        enc, lens = base(_tensor(video[None]), [video.shape[0]])
        logits, lens = head(enc, lens)
    return decode_batch(logits, lens, vocab)[0]


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0
