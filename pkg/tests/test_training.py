import numpy as np
import pytest

from vsrdistill import tensor as T
from vsrdistill import training as TR
from vsrdistill.augment import batch_pad
from vsrdistill.conformer import AudioFrontendConfig, ConformerConfig, StemConfig, make_teacher, make_visual_base, split
from vsrdistill.ctc import TokenVocab, ctc_loss_batched
from vsrdistill.data import CorpusSpec, generate_sample, transcript_symbols
from vsrdistill.nn import Parameter
from vsrdistill.persistence import params_digest
from vsrdistill.tensor import NonFiniteError, Tensor
from vsrdistill.training import (AdamState, LrSchedule, TrainingDiverged, TrainRunConfig, adam_step, clip_grad_norm,
                                 encoding_loss, finetune, finetune_losses, infer_e2e, lr_at, make_item,
                                 pretrain_student, train_teacher, utterance_mel)

SPEC = CorpusSpec(n_samples=20)
VOCAB = TokenVocab(transcript_symbols(SPEC.vocab))
SIZE = 16


@pytest.fixture(scope="module")
def samples():
    return [generate_sample(SPEC, i)[0] for i in range(6)]


def small_models(seed=0):
    teacher = make_teacher(ConformerConfig(n_layers=2, d=16, n_heads=2, conv_kernel=3), AudioFrontendConfig(64, 2),
                           len(VOCAB), seed)
    parts = split(teacher, 1)
    student = make_visual_base(ConformerConfig(n_layers=1, d=16, n_heads=2, conv_kernel=3), 16, StemConfig((2, 4), 1),
                               seed + 1)
    return teacher, parts.base, parts.head, student


def fixed_batch(samples, n=3):
    items = [make_item(s, utterance_mel(s), VOCAB, SIZE, None) for s in samples[:n]]
    return batch_pad(items)


# ----------------------------------------------------------------------
# schedule and optimizer
# ----------------------------------------------------------------------

def test_lr_schedule_closed_form():
    s = LrSchedule("warmup_inv_sqrt", 1e-4, 10000)
    assert lr_at(s, 10000) == 1e-4
    assert lr_at(s, 5000) == 5e-5
    assert lr_at(s, 40000) == 5e-5
    assert lr_at(s, 1) == 1e-4 * 1 / 10000
    assert lr_at(LrSchedule("constant", 1e-4), 7) == 1e-4
    with pytest.raises(ValueError):
        lr_at(s, 0)
    with pytest.raises(ValueError):
        LrSchedule("constant", 0.0)
    with pytest.raises(ValueError):
        LrSchedule("cosine")


def test_adam_first_step_example():
    p = Parameter(np.array([1.0]), dtype=np.float64)
    st = AdamState.for_params([p])
    adam_step([p], [np.array([1.0])], st, 0.1)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-9), abs=1e-15)
    assert st.step == 1


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = Parameter(np.array([2.0, -1.0]), dtype=np.float64)
    st = AdamState.for_params([p])
    adam_step([p], [np.array([1.0, 1.0])], st, 0.1)
    before, m, v = p.data.copy(), st.m[0].copy(), st.v[0].copy()
    adam_step([p], [np.zeros(2)], st, 0.1)
    np.testing.assert_allclose(st.m[0], 0.9 * m)
    np.testing.assert_allclose(st.v[0], 0.98 * v)
    # the update uses the decayed moments, which are still non-zero
    assert not np.array_equal(p.data, before)
    q = Parameter(np.array([3.0]), dtype=np.float64)
    sq = AdamState.for_params([q])
    adam_step([q], [np.zeros(1)], sq, 0.1)
    assert q.data[0] == 3.0


def test_adam_rejects_nan():
    p = Parameter(np.array([1.0]))
    with pytest.raises(NonFiniteError):
        adam_step([p], [np.array([np.nan])], AdamState.for_params([p]), 0.1)
    assert p.data[0] == 1.0


def test_clip_grad_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_grad_norm(g, 1.0) == 5.0
    np.testing.assert_allclose(np.hypot(g[0], g[1]), 1.0)
    h = [np.array([0.3])]
    clip_grad_norm(h, 1.0)
    assert h[0][0] == 0.3


def test_run_config_validation():
    with pytest.raises(ValueError):
        TrainRunConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainRunConfig(lambda_enc=-1)
    assert TrainRunConfig().lambda_enc == 1.0 and TrainRunConfig().batch_size == 16


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------

def test_loss_composition_identity(samples):
    _, base_a, head, student = small_models()
    student.eval()
    head.eval()
    batch = fixed_batch(samples)
    t0, c0, e0 = finetune_losses(student, head, base_a, batch, 0.0)
    assert t0.item() == c0.item()
    enc_v, len_v = student(TR._tensor(batch.video), batch.video_lengths)
    logits, lens = head(enc_v, len_v)
    assert c0.item() == ctc_loss_batched(logits, batch.targets, lens).item()
    t1, c1, e1 = finetune_losses(student, head, base_a, batch, 1.0)
    assert (t1.item() - c1.item()) == pytest.approx(e1.item(), rel=1e-6)
    t2, c2, e2 = finetune_losses(student, head, base_a, batch, 2.5)
    assert (t2.item() - c2.item()) == pytest.approx(2.5 * e2.item(), rel=1e-6)
    T.get_tape().clear()


def test_encoding_loss_definition_and_truncation():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 5, 3))
    v = rng.normal(size=(2, 6, 3))
    loss = encoding_loss(Tensor(a), [5, 3], Tensor(v), [6, 4]).item()
    diffs = [((v[0, :5] - a[0]) ** 2).sum(), ((v[1, :3] - a[1, :3]) ** 2).sum()]
    assert loss == pytest.approx(sum(diffs) / 8, rel=1e-12)
    with pytest.raises(ValueError):
        encoding_loss(Tensor(a), [5, 3], Tensor(rng.normal(size=(2, 5, 4))), [5, 5])
    # the audio side is a constant target
    ta = Tensor(a, requires_grad=True)
    tv = Tensor(v, requires_grad=True)
    encoding_loss(ta, [5, 5], tv, [6, 6]).backward()
    assert ta.grad is None and tv.grad is not None


def test_padded_batch_equals_individual_losses(samples):
    _, base_a, head, student = small_models()
    for m in (base_a, head, student):
        m.eval()
    batch = fixed_batch(samples, 3)
    _, ctc_b, enc_b = finetune_losses(student, head, base_a, batch, 1.0)
    ctcs, sums, steps = [], 0.0, 0
    for i in range(3):
        one = fixed_batch(samples[i:i + 1], 1)
        _, c, e = finetune_losses(student, head, base_a, one, 1.0)
        ctcs.append(c.item())
        n = min(int(one.mel_lengths[0]) // 4, int(one.video_lengths[0]))
        sums += e.item() * n
        steps += n
    assert ctc_b.item() == pytest.approx(np.mean(ctcs), rel=1e-4)
    # the encoding loss averages over every valid (sample, step) pair
    assert enc_b.item() == pytest.approx(sums / steps, rel=1e-4)
    T.get_tape().clear()


def test_extra_padding_is_neutral(samples):
    _, base_a, head, student = small_models()
    for m in (base_a, head, student):
        m.eval()
    batch = fixed_batch(samples, 2)
    _, c, e = finetune_losses(student, head, base_a, batch, 1.0)
    batch.video = np.concatenate([batch.video, np.ones_like(batch.video[:, :8])], axis=1)
    batch.mel = np.concatenate([batch.mel, np.ones_like(batch.mel[:, :32])], axis=1)
    _, c2, e2 = finetune_losses(student, head, base_a, batch, 1.0)
    assert c2.item() == pytest.approx(c.item(), rel=1e-5)
    assert e2.item() == pytest.approx(e.item(), rel=1e-5)
    T.get_tape().clear()


def test_one_step_reaches_every_parameter(samples):
    _, base_a, head, student = small_models()
    student.train()
    head.train()
    batch = fixed_batch(samples, 3)
    total, _, _ = finetune_losses(student, head, base_a, batch, 1.0)
    total.backward()
    for name, p in list(student.named_parameters()) + list(head.named_parameters()):
        assert p.grad is not None and np.linalg.norm(p.grad) > 0, name
    for p in base_a.parameters():
        assert p.grad is None


# ----------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------

def run_cfg(steps=2, **kw):
    return TrainRunConfig(batch_size=2, max_iterations=steps, eval_interval=1, slice_frames=20, image_size=SIZE,
                          schedule=LrSchedule("constant", 1e-3), **kw)


def test_pretrain_freezes_teacher_and_is_reproducible(samples):
    digests = []
    for _ in range(2):
        _, base_a, _, student = small_models()
        before = params_digest(base_a)
        hist = pretrain_student(base_a, student, samples, run_cfg(3))
        assert params_digest(base_a) == before
        assert all(r.loss_ctc is None and r.loss == r.loss_enc for r in hist)
        digests.append(params_digest(student))
    assert digests[0] == digests[1]


def test_zero_iterations_leave_model_unchanged(samples):
    teacher, base_a, _, student = small_models()
    d0, s0 = params_digest(teacher), params_digest(student)
    assert train_teacher(teacher, samples, VOCAB, run_cfg(0)) == []
    assert pretrain_student(base_a, student, samples, run_cfg(0)) == []
    assert params_digest(teacher) == d0 and params_digest(student) == s0


def test_teacher_step_and_eval_hook(samples):
    teacher, *_ = small_models()
    calls = []
    hist = train_teacher(teacher, samples, VOCAB, run_cfg(2), lambda step, h: calls.append(step))
    assert calls == [1, 2] and len(hist) == 2


def test_finetune_updates_base_and_head_not_teacher(samples):
    _, base_a, head, student = small_models()
    d_t, d_h, d_s = params_digest(base_a), params_digest(head), params_digest(student)
    hist = finetune(student, head, base_a, samples, VOCAB, run_cfg(2))
    assert params_digest(base_a) == d_t
    assert params_digest(head) != d_h and params_digest(student) != d_s
    assert all(r.loss == pytest.approx(r.loss_ctc + r.loss_enc, rel=1e-5) for r in hist)


def test_width_and_vocab_checks(samples):
    teacher, base_a, head, _ = small_models()
    wide = make_visual_base(ConformerConfig(n_layers=1, d=16, n_heads=2), 24, StemConfig((2, 4), 1), 0)
    with pytest.raises(ValueError):
        pretrain_student(base_a, wide, samples, run_cfg(1))
    _, _, _, student = small_models()
    small_vocab = TokenVocab(list("ab"))
    with pytest.raises(ValueError):
        finetune(student, head, base_a, samples, small_vocab, run_cfg(1))
    unlabeled = [generate_sample(SPEC, 0)[0]]
    unlabeled[0].transcript = ""
    with pytest.raises(ValueError):
        train_teacher(teacher, unlabeled, VOCAB, run_cfg(1))


def test_divergence_restores_last_good_state(samples, monkeypatch):
    _, base_a, _, student = small_models()
    snapshots = {}
    real = TR.encoding_loss
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NonFiniteError("injected")
        return real(*args)

    monkeypatch.setattr(TR, "encoding_loss", flaky)
    cfg = TrainRunConfig(batch_size=2, max_iterations=5, eval_interval=2, slice_frames=20, image_size=SIZE,
                         schedule=LrSchedule("constant", 1e-3))
    with pytest.raises(TrainingDiverged) as info:
        pretrain_student(base_a, student, samples, cfg, lambda s, h: snapshots.setdefault(s, params_digest(student)))
    assert info.value.step == 3
    assert params_digest(student) == snapshots[2]


def test_inference_determinism_and_empty_clip(samples):
    _, _, head, student = small_models()
    video = make_item(samples[0], None, None, SIZE, None).video
    assert infer_e2e(student, head, video, VOCAB) == infer_e2e(student, head, video, VOCAB)
    with pytest.raises(ValueError):
        infer_e2e(student, head, np.zeros((0, SIZE, SIZE)), VOCAB)
