"""Error rates, evaluation records, and latency benchmarking."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence


from .ctc import TokenVocab
from .data import Sample
from .frontends import SAMPLES_PER_FRAME, SAMPLE_RATE
from .training import transcribe_audio, transcribe_video


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _rate(refs: Sequence, hyps: Sequence, unit: str) -> float:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    errors = total = 0
    for r, h in zip(refs, hyps):
        errors += levenshtein(r, h)
        total += len(r)
    if total == 0:
        raise ValueError(f"reference corpus has no {unit}s")
    return errors / total


def wer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Corpus word error rate: summed word edit distances over total reference words."""
    return _rate([r.split() for r in refs], [h.split() for h in hyps], "word")


def cer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    """Corpus character error rate, spaces included."""
    return _rate(list(refs), list(hyps), "character")


@dataclass
class MetricsRecord:
    step: int
    split: str
    wer: Optional[float]
    cer: Optional[float]
    loss_enc: Optional[float]
    loss_ctc: Optional[float]
    wall_clock_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


class MetricsWriter:
    """Append-only JSON-lines stream; each record is flushed as written."""

    def __init__(self, path, append: bool = False):
        self.path = path
        if not append:
            open(path, "w").close()

    def write(self, rec: MetricsRecord) -> None:
        with open(self.path, "a") as f:
            f.write(rec.to_json() + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    with open(path) as f:
        return [MetricsRecord.from_json(line) for line in f if line.strip()]


def evaluate_transcripts(refs: Sequence[str], hyps: Sequence[str], step: int = 0, split: str = "test",
                         loss_enc=None, loss_ctc=None, wall_clock_s: float = 0.0) -> MetricsRecord:
    return MetricsRecord(step, split, wer(refs, hyps), cer(refs, hyps), loss_enc, loss_ctc, wall_clock_s)


def evaluate(model, samples: Sequence[Sample], vocab: TokenVocab, image_size: int = 24, step: int = 0,
             split: str = "test", **losses) -> MetricsRecord:
    """Greedy-decode ``samples`` with eval-mode preprocessing and score them.

    ``model`` is either an audio model or a ``(visual_base, audio_head)`` pair.
    """
    if any(not s.transcript for s in samples):
        raise ValueError("evaluation needs a labeled split")
    if isinstance(model, tuple):
        hyps = transcribe_video(model[0], model[1], samples, vocab, image_size)
    else:
        hyps = transcribe_audio(model, samples, vocab)
    return evaluate_transcripts([s.transcript for s in samples], hyps, step, split, **losses)


# ----------------------------------------------------------------------
# latency
# ----------------------------------------------------------------------

@dataclass
class LatencyReport:
    duration_s: float
    median_s: float
    ms_per_second: float
    real_time_factor: float
    runs: int


def summarize_timings(timings: Sequence[float], duration_s: float) -> LatencyReport:
    med = statistics.median(timings)
    return LatencyReport(duration_s, med, 1000.0 * med / duration_s, med / duration_s, len(timings))


def benchmark_latency(fn: Callable[[], object], duration_s: float, runs: int = 20, warmup: int = 2,
                      clock=time.perf_counter) -> LatencyReport:
    """Median wall time of ``fn`` over ``runs`` calls after ``warmup`` untimed ones."""
    if runs < 1:
        raise ValueError("need at least one timed run")
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(runs):
        t0 = clock()
        fn()
        timings.append(clock() - t0)
    return summarize_timings(timings, duration_s)


def clip_duration(n_frames: int) -> float:
    return n_frames * SAMPLES_PER_FRAME / SAMPLE_RATE
