"""Stage runners shared by the CLI, the sweep, and the acceptance suite.

Every runner takes the flat config dict (see ``DEFAULT_CONFIG``), reads its
inputs from ``paths.workdir`` and writes checkpoints and metrics back there.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import prepare_video
from .conformer import AudioFrontendConfig, ConformerConfig, EncoderStack, StemConfig, config_dict, make_teacher, \
    make_visual_base, split
from .ctc import TokenVocab
from .data import CorpusSpec, Manifest, Sample, generate_corpus, generate_sample, load_split, transcript_symbols
from .frontends import FPS, SAMPLES_PER_FRAME, Waveform
from .evaluation import LatencyReport, MetricsRecord, MetricsWriter, benchmark_latency, evaluate
from .persistence import atomic_write_bytes, load_checkpoint, parse_config, save_checkpoint
from .training import LrSchedule, StepRecord, TrainRunConfig, _tensor, finetune, infer_e2e, pretrain_student, \
    train_teacher, transcribe_audio

log = logging.getLogger(__name__)

DEFAULT_CONFIG = """\
# paths
paths.workdir = run
data.root = corpus

# synthetic corpus
data.vocab = abcdefgh
data.n_samples = 2000
data.seed = 0
data.words_min = 2
data.words_max = 4
data.chars_min = 2
data.chars_max = 3
data.audio_sigma = 0.02
data.video_sigma = 0.06
data.frame_size = 48
data.fractions = 0.8, 0.1, 0.1

# audio teacher
teacher.layers = 6  # toy
teacher.d = 32  # toy
teacher.heads = 4
teacher.ff_expansion = 4
teacher.conv_kernel = 7
teacher.dropout = 0.1
teacher.n_mels = 64
teacher.mel_channels = 8  # toy
teacher.seed = 0
teacher.batch_size = 16
teacher.max_iterations = 600  # toy
teacher.eval_interval = 200
teacher.lr = 0.002  # toy
teacher.warmup = 300  # toy

split.k = 3  # toy

# visual base
student.layers = 4  # toy
student.d = 48  # toy
student.heads = 4
student.ff_expansion = 4
student.conv_kernel = 7
student.dropout = 0.1
student.stem_channels = 4, 8  # toy
student.stem_blocks = 4
student.seed = 1

pretrain.batch_size = 16
pretrain.max_iterations = 1000  # toy
pretrain.eval_interval = 250
pretrain.lr = 0.001  # toy
pretrain.slice_frames = 75
pretrain.image_size = 24  # toy
pretrain.lambda_enc = 1
pretrain.seed = 0

finetune.batch_size = 16
finetune.max_iterations = 400  # toy
finetune.eval_interval = 100
finetune.lr = 0.0005  # toy
finetune.warmup = 100  # toy
finetune.lambda_enc = 1
finetune.seed = 0

eval.model = finetune
eval.split = test

bench.runs = 20
bench.warmup = 2
bench.duration_s = 3
bench.model = finetune

sweep.axis = slice_frames
sweep.values = 25, 50, 75
sweep.finetune = false
sweep.data_root = sweep_corpus
sweep.n_samples = 100
sweep.words_min = 8
sweep.words_max = 12
sweep.max_iterations = 20  # toy
sweep.finetune_iterations = 20  # toy
sweep.output = sweep.csv
"""

TEACHER_CKPT = "teacher.ckpt"
AUDIO_BASE_CKPT = "audio_base.ckpt"
AUDIO_HEAD_CKPT = "audio_head.ckpt"
VISUAL_BASE_CKPT = "visual_base.ckpt"
VISUAL_BASE_FT_CKPT = "visual_base_ft.ckpt"
AUDIO_HEAD_FT_CKPT = "audio_head_ft.ckpt"


def default_config() -> dict[str, Any]:
    return parse_config(DEFAULT_CONFIG, "<defaults>")


def workdir(cfg: dict) -> Path:
    p = Path(cfg["paths.workdir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def data_root(cfg: dict) -> Path:
    root = Path(cfg["data.root"])
    return root if root.is_absolute() else workdir(cfg) / root


def corpus_spec(cfg: dict, prefix: str = "data") -> CorpusSpec:
    def get(key):
        return cfg.get(f"{prefix}.{key}", cfg[f"data.{key}"])

    return CorpusSpec(vocab=str(cfg["data.vocab"]), n_samples=int(get("n_samples")),
                      words_per_sample=(int(get("words_min")), int(get("words_max"))),
                      chars_per_word=(int(get("chars_min")), int(get("chars_max"))),
                      seed=int(get("seed")), audio_sigma=float(get("audio_sigma")),
                      video_sigma=float(get("video_sigma")), frame_size=int(get("frame_size")),
                      fractions=tuple(float(f) for f in cfg["data.fractions"]))


def vocab_of(cfg: dict) -> TokenVocab:
    return TokenVocab(transcript_symbols(str(cfg["data.vocab"])))


def _conformer_cfg(cfg: dict, section: str) -> ConformerConfig:
    return ConformerConfig(n_layers=int(cfg[f"{section}.layers"]), d=int(cfg[f"{section}.d"]),
                           n_heads=int(cfg[f"{section}.heads"]), ff_expansion=int(cfg[f"{section}.ff_expansion"]),
                           conv_kernel=int(cfg[f"{section}.conv_kernel"]), dropout=float(cfg[f"{section}.dropout"]))


def _run_cfg(cfg: dict, section: str, schedule: LrSchedule, **over) -> TrainRunConfig:
    kw = dict(batch_size=int(cfg[f"{section}.batch_size"]), max_iterations=int(cfg[f"{section}.max_iterations"]),
              eval_interval=int(cfg[f"{section}.eval_interval"]), seed=int(cfg[f"{section}.seed"]),
              lambda_enc=float(cfg.get(f"{section}.lambda_enc", 1.0)),
              slice_frames=int(cfg.get(f"{section}.slice_frames", cfg["pretrain.slice_frames"])),
              image_size=int(cfg.get(f"{section}.image_size", cfg["pretrain.image_size"])),
              schedule=schedule)
    kw.update(over)
    return TrainRunConfig(**kw)


def image_size(cfg: dict) -> int:
    return int(cfg["pretrain.image_size"])


# ----------------------------------------------------------------------
# data
# ----------------------------------------------------------------------

_SPLIT_CACHE: dict = {}


def load_corpus_split(root: Path, split_name: str) -> list[Sample]:
    """Samples of one split; cached per manifest contents so repeated stages skip the disk."""
    manifest_path = Path(root) / "manifest.tsv"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}; run gen-data first")
    key = (str(manifest_path.resolve()), manifest_path.stat().st_mtime_ns, split_name)
    if key not in _SPLIT_CACHE:
        _SPLIT_CACHE.clear() if len(_SPLIT_CACHE) > 8 else None
        _SPLIT_CACHE[key] = load_split(Manifest.read(manifest_path), split_name)
    return _SPLIT_CACHE[key]


def run_gen_data(cfg: dict) -> Manifest:
    return generate_corpus(corpus_spec(cfg), data_root(cfg))


# ----------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------

class _Clock:
    def __init__(self):
        self.t0 = time.perf_counter()

    def __call__(self) -> float:
        return time.perf_counter() - self.t0


def _mean(history: Sequence[StepRecord], attr: str, window: int) -> Optional[float]:
    vals = [getattr(r, attr) for r in history[-window:] if getattr(r, attr) is not None]
    return float(np.mean(vals)) if vals else None


def teacher_config(cfg: dict) -> dict:
    return {"conformer": config_dict(_conformer_cfg(cfg, "teacher")),
            "audio": {"n_mels": int(cfg["teacher.n_mels"]), "channels": int(cfg["teacher.mel_channels"])},
            "vocab_size": len(vocab_of(cfg)), "seed": int(cfg["teacher.seed"])}


def run_train_teacher(cfg: dict, metrics_name: str = "teacher.jsonl") -> list[MetricsRecord]:
    wd = workdir(cfg)
    root = data_root(cfg)
    vocab = vocab_of(cfg)
    train = load_corpus_split(root, "finetune")
    test = load_corpus_split(root, "test")
    mcfg = teacher_config(cfg)
    model = make_teacher(_conformer_cfg(cfg, "teacher"), AudioFrontendConfig(**mcfg["audio"]), len(vocab),
                         int(cfg["teacher.seed"]))
    sched = LrSchedule("warmup_inv_sqrt", float(cfg["teacher.lr"]), int(cfg["teacher.warmup"]))
    run = _run_cfg(cfg, "teacher", sched)
    writer = MetricsWriter(wd / metrics_name)
    records = []
    clock = _Clock()

    def on_eval(step, history):
        rec = evaluate(model, test, vocab, step=step, loss_ctc=_mean(history, "loss_ctc", run.eval_interval),
                       wall_clock_s=round(clock(), 3))
        records.append(rec)
        writer.write(rec)
        save_checkpoint(model, wd / TEACHER_CKPT, "teacher", mcfg, step)

    if run.max_iterations == 0:
        save_checkpoint(model, wd / TEACHER_CKPT, "teacher", mcfg, 0)
    train_teacher(model, train, vocab, run, on_eval)
    return records


def run_split_teacher(cfg: dict, k: Optional[int] = None) -> float:
    """Write base/head checkpoints and return the max |difference| of the recomposition."""
    wd = workdir(cfg)
    k = int(cfg["split.k"] if k is None else k)
    teacher, ck = load_checkpoint(wd / TEACHER_CKPT)
    parts = split(teacher, k)
    base_cfg = dict(ck.config, conformer=config_dict(parts.base.config))
    head_cfg = {"conformer": config_dict(parts.head.config), "vocab_size": ck.config["vocab_size"],
                "seed": ck.config.get("seed", 0)}
    save_checkpoint(parts.base, wd / AUDIO_BASE_CKPT, "audio_base", base_cfg, ck.step, {"split_k": k})
    save_checkpoint(parts.head, wd / AUDIO_HEAD_CKPT, "audio_head", head_cfg, ck.step, {"split_k": k})
    # soundness: reloaded pieces recompose to the original on random features
    base, _ = load_checkpoint(wd / AUDIO_BASE_CKPT)
    head, _ = load_checkpoint(wd / AUDIO_HEAD_CKPT)
    rng = np.random.default_rng(k)
    worst = 0.0
    with T.no_grad():
        for _ in range(5):
            x = _tensor(rng.normal(-3.0, 2.0, size=(2, 48, ck.config["audio"]["n_mels"])))
            full, _ = teacher.eval()(x)
            enc, lens = base.eval()(x)
            comp, _ = head.eval()(enc, lens)
            worst = max(worst, float(np.abs(full.data - comp.data).max()))
    return worst


def student_config(cfg: dict, d_target: int) -> dict:
    chans = cfg["student.stem_channels"]
    return {"conformer": config_dict(_conformer_cfg(cfg, "student")),
            "stem": {"channels": [int(c) for c in chans], "n_blocks": int(cfg["student.stem_blocks"])},
            "d_target": d_target, "seed": int(cfg["student.seed"])}


def run_pretrain(cfg: dict, metrics_name: str = "pretrain.jsonl", samples: Optional[list] = None,
                 test: Optional[list] = None, out_name: str = VISUAL_BASE_CKPT) -> dict:
    """Pre-train the visual base; returns ``{"records", "wall_clock_s", "model"}``."""
    wd = workdir(cfg)
    root = data_root(cfg)
    vocab = vocab_of(cfg)
    samples = load_corpus_split(root, "pretrain") if samples is None else samples
    test = load_corpus_split(root, "test") if test is None else test
    teacher_base, _ = load_checkpoint(wd / AUDIO_BASE_CKPT)
    head, _ = load_checkpoint(wd / AUDIO_HEAD_CKPT)
    scfg = student_config(cfg, teacher_base.d_out)
    student = make_visual_base(_conformer_cfg(cfg, "student"), teacher_base.d_out,
                               StemConfig(tuple(scfg["stem"]["channels"]), scfg["stem"]["n_blocks"]),
                               scfg["seed"])
    run = _run_cfg(cfg, "pretrain", LrSchedule("constant", float(cfg["pretrain.lr"])))
    writer = MetricsWriter(wd / metrics_name)
    records = []
    clock = _Clock()
    train_time = [0.0]
    eval_time = [0.0]

    def on_eval(step, history):
        t0 = time.perf_counter()
        rec = evaluate((student, head), test, vocab, run.image_size, step=step,
                       loss_enc=_mean(history, "loss_enc", run.eval_interval), wall_clock_s=round(clock(), 3))
        records.append(rec)
        writer.write(rec)
        save_checkpoint(student, wd / out_name, "visual_base", scfg, step, {"image_size": run.image_size})
        eval_time[0] += time.perf_counter() - t0

    if run.max_iterations == 0:
        save_checkpoint(student, wd / out_name, "visual_base", scfg, 0, {"image_size": run.image_size})
    t0 = time.perf_counter()
    pretrain_student(teacher_base, student, samples, run, on_eval)
    train_time[0] = time.perf_counter() - t0 - eval_time[0]
    return {"records": records, "wall_clock_s": train_time[0], "model": student, "head": head, "run": run}


def run_finetune(cfg: dict, metrics_name: str = "finetune.jsonl", samples: Optional[list] = None,
                 test: Optional[list] = None, base_name: str = VISUAL_BASE_CKPT,
                 out_names=(VISUAL_BASE_FT_CKPT, AUDIO_HEAD_FT_CKPT)) -> dict:
    wd = workdir(cfg)
    root = data_root(cfg)
    vocab = vocab_of(cfg)
    samples = load_corpus_split(root, "finetune") if samples is None else samples
    test = load_corpus_split(root, "test") if test is None else test
    teacher_base, _ = load_checkpoint(wd / AUDIO_BASE_CKPT)
    base, base_ck = load_checkpoint(wd / base_name)
    head, head_ck = load_checkpoint(wd / AUDIO_HEAD_CKPT)
    size = int(base_ck.extra.get("image_size", image_size(cfg)))
    sched = LrSchedule("warmup_inv_sqrt", float(cfg["finetune.lr"]), int(cfg["finetune.warmup"]))
    run = _run_cfg(cfg, "finetune", sched, image_size=size)
    writer = MetricsWriter(wd / metrics_name)
    records = []
    clock = _Clock()

    def save(step):
        save_checkpoint(base, wd / out_names[0], "visual_base", base_ck.config, step, {"image_size": size})
        save_checkpoint(head, wd / out_names[1], "audio_head", head_ck.config, step, head_ck.extra)

    def on_eval(step, history):
        rec = evaluate((base, head), test, vocab, size, step=step,
                       loss_enc=_mean(history, "loss_enc", run.eval_interval),
                       loss_ctc=_mean(history, "loss_ctc", run.eval_interval), wall_clock_s=round(clock(), 3))
        records.append(rec)
        writer.write(rec)
        save(step)

    if run.max_iterations == 0:
        save(0)
    finetune(base, head, teacher_base, samples, vocab, run, on_eval)
    return {"records": records, "model": base, "head": head}


def load_recognizer(cfg: dict, which: str):
    """``teacher`` -> audio model; ``pretrain`` / ``finetune`` -> (visual base, head, image size)."""
    wd = workdir(cfg)
    if which == "teacher":
        model, _ = load_checkpoint(wd / TEACHER_CKPT)
        return model
    if which == "pretrain":
        names = (VISUAL_BASE_CKPT, AUDIO_HEAD_CKPT)
    elif which == "finetune":
        names = (VISUAL_BASE_FT_CKPT, AUDIO_HEAD_FT_CKPT)
    else:
        raise ValueError(f"unknown model {which!r}; choose teacher, pretrain or finetune")
    base, ck = load_checkpoint(wd / names[0])
    head, _ = load_checkpoint(wd / names[1])
    return base, head, int(ck.extra.get("image_size", image_size(cfg)))


def run_eval(cfg: dict, which: Optional[str] = None, split_name: Optional[str] = None) -> MetricsRecord:
    which = which or str(cfg["eval.model"])
    split_name = split_name or str(cfg["eval.split"])
    samples = load_corpus_split(data_root(cfg), split_name)
    rec_model = load_recognizer(cfg, which)
    vocab = vocab_of(cfg)
    if which == "teacher":
        return evaluate(rec_model, samples, vocab, split=split_name)
    base, head, size = rec_model
    return evaluate((base, head), samples, vocab, size, split=split_name)


def run_infer(cfg: dict, sample: Sample, which: Optional[str] = None) -> str:
    which = which or str(cfg["eval.model"])
    if which == "teacher":
        return transcribe_audio(load_recognizer(cfg, "teacher"), [sample], vocab_of(cfg))[0]
    base, head, size = load_recognizer(cfg, which)
    return infer_e2e(base, head, prepare_video(sample.clip, sample.landmarks, size), vocab_of(cfg))


def bench_clip(cfg: dict, duration_s: float, index: int = 0) -> Sample:
    """A synthetic clip of ``duration_s`` seconds (rounded to whole frames) for latency runs."""
    spec = corpus_spec(cfg)
    target = max(1, int(round(duration_s * FPS)))
    words = 1
    while True:
        spec.words_per_sample = (words, words)
        sample, _ = generate_sample(spec, index)
        if sample.num_frames >= target:
            break
        words += 1
    pcm = sample.waveform.samples[:target * SAMPLES_PER_FRAME]
    return Sample(Waveform(pcm), sample.clip[:target], sample.transcript, sample.landmarks[:target])


def run_bench(cfg: dict, which: Optional[str] = None, duration_s: Optional[float] = None,
              runs: Optional[int] = None) -> LatencyReport:
    """Preprocess + encode + greedy decode of one clip, timed end to end."""
    which = which or str(cfg["bench.model"])
    duration_s = float(cfg["bench.duration_s"] if duration_s is None else duration_s)
    base, head, size = load_recognizer(cfg, which)
    sample = bench_clip(cfg, duration_s)
    vocab = vocab_of(cfg)

    def once():
        video = prepare_video(sample.clip, sample.landmarks, size)
        return infer_e2e(base, head, video, vocab)

    return benchmark_latency(once, sample.num_frames / FPS, runs=int(cfg["bench.runs"] if runs is None else runs),
                             warmup=int(cfg["bench.warmup"]))


# ----------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------

SWEEP_AXES = {"slice_frames": "pretrain.slice_frames", "image_size": "pretrain.image_size"}
SWEEP_HEADER = ["axis", "value", "wer_pretrain", "wer_finetune", "mem_estimate_bytes", "wall_clock_s"]


@dataclass
class SweepSpec:
    axis: str
    values: list
    finetune: bool = False

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {self.axis!r}")
        self.values = [int(v) for v in (self.values if isinstance(self.values, list) else [self.values])]
        if not self.values or any(v <= 0 for v in self.values):
            raise ValueError("sweep values must be positive")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("sweep values must be strictly increasing")


def memory_estimate(student: EncoderStack, teacher_base: EncoderStack, batch_size: int, frames: int,
                    size: int) -> int:
    """Bytes for parameters (with gradients and two Adam moments) plus every
    activation retained for the backward pass of one full-length training step."""
    params = sum(p.data.nbytes for p in student.parameters()) * 4
    tape = T.Tape()
    rng = np.random.default_rng(0)
    video = _tensor(rng.random((batch_size, frames, size, size)))
    student.train()
    with T.use_tape(tape):
        out, _ = student(video, np.full(batch_size, frames))
        # the frozen teacher's encodings are held too
        held = out.data.nbytes
    student.eval()
    acts = sum(node.output.data.nbytes for node in tape.nodes) + held + video.data.nbytes
    tape.clear()
    return int(params + acts)


def run_sweep(cfg: dict, spec: Optional[SweepSpec] = None) -> str:
    """Pre-train (and optionally fine-tune) once per sweep value; returns CSV text."""
    if spec is None:
        spec = SweepSpec(str(cfg["sweep.axis"]), cfg["sweep.values"], bool(cfg["sweep.finetune"]))
    wd = workdir(cfg)
    sroot = Path(cfg["sweep.data_root"])
    sroot = sroot if sroot.is_absolute() else wd / sroot
    if not (sroot / "manifest.tsv").exists():
        generate_corpus(corpus_spec(cfg, "sweep"), sroot)
    pre = load_corpus_split(sroot, "pretrain")
    ft = load_corpus_split(sroot, "finetune")
    test = load_corpus_split(sroot, "test")
    rows = []
    for value in spec.values:
        run_cfg = dict(cfg)
        run_cfg[SWEEP_AXES[spec.axis]] = value
        run_cfg["pretrain.max_iterations"] = int(cfg["sweep.max_iterations"])
        run_cfg["pretrain.eval_interval"] = int(cfg["sweep.max_iterations"]) or 1
        tag = f"sweep_{spec.axis}_{value}"
        res = run_pretrain(run_cfg, f"{tag}_pretrain.jsonl", pre, test, out_name=f"{tag}_visual_base.ckpt")
        wer_pre = res["records"][-1].wer if res["records"] else None
        teacher_base, _ = load_checkpoint(wd / AUDIO_BASE_CKPT)
        run = res["run"]
        mem = memory_estimate(res["model"], teacher_base, run.batch_size, run.slice_frames, run.image_size)
        wer_ft = None
        if spec.finetune:
            run_cfg["finetune.max_iterations"] = int(cfg["sweep.finetune_iterations"])
            run_cfg["finetune.eval_interval"] = int(cfg["sweep.finetune_iterations"]) or 1
            ftres = run_finetune(run_cfg, f"{tag}_finetune.jsonl", ft, test, base_name=f"{tag}_visual_base.ckpt",
                                 out_names=(f"{tag}_visual_base_ft.ckpt", f"{tag}_audio_head_ft.ckpt"))
            wer_ft = ftres["records"][-1].wer if ftres["records"] else None
        rows.append([spec.axis, value, wer_pre, wer_ft, mem, round(res["wall_clock_s"], 3)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in r])
    text = buf.getvalue()
    atomic_write_bytes(wd / str(cfg["sweep.output"]), text.encode())
    return text
