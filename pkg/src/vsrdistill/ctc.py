"""Connectionist temporal classification: loss, greedy decoding, and an enumeration oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, _result

BLANK = 0


@dataclass
class TokenVocab:
    """Output symbols; id 0 is the CTC blank, symbol ``tokens[i]`` has id ``i + 1``."""

    tokens: list
    blank_id: int = BLANK
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.tokens = list(self.tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary symbols must be unique")
        if self.blank_id != BLANK:
            raise ValueError("the blank must have id 0")
        self._index = {tok: i + 1 for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_classes(self) -> int:
        return len(self.tokens) + 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i - 1] for i in ids)


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per symbol plus a blank per repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return out


def _log_softmax64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _lse3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_forward_backward(logp: np.ndarray, targets: Sequence[Sequence[int]], input_lengths,
                         blank: int = BLANK):
    """Per-sample negative log-likelihoods and gradients w.r.t. the log-probabilities' logits.

    ``logp`` is [N, T, C] (log-softmax over C). Returns ``(nll [N], grad [N, T, C])``
    where ``grad`` is d(nll_n)/d(logits_n) assuming ``logp = log_softmax(logits)``.
    """
    n, tmax, ncls = logp.shape
    in_lens = np.asarray(input_lengths, dtype=np.int64)
    tgt_lens = np.array([len(t) for t in targets], dtype=np.int64)
    for i, (tgt, tl) in enumerate(zip(targets, in_lens)):
        if tl < 1 or tl > tmax:
            raise ValueError(f"batch element {i}: input length {tl} outside [1, {tmax}]")
        if any(int(y) == blank or not 0 <= int(y) < ncls for y in tgt):
            raise ValueError(f"batch element {i}: target contains the blank or an unknown id")
        need = min_frames(tgt)
        if need > tl:
            raise ValueError(f"batch element {i}: target of length {len(tgt)} needs {need} frames, "
                             f"only {tl} available (unalignable)")

    smax = 2 * int(tgt_lens.max(initial=0)) + 1
    ext = np.full((n, smax), blank, dtype=np.int64)
    for i, tgt in enumerate(targets):
        ext[i, 1:2 * len(tgt):2] = tgt
    s_lens = 2 * tgt_lens + 1
    valid_s = np.arange(smax)[None, :] < s_lens[:, None]
    skip = np.zeros((n, smax), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    skip &= valid_s

    # lp[n, t, s] = log p(ext[n, s] at t)
    lp = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (n, tmax, smax)), axis=2)
    lp = np.where(valid_s[:, None, :], lp, -np.inf)

    neg = np.full((n, smax), -np.inf)
    alpha = np.full((tmax, n, smax), -np.inf)
    alpha[0, :, 0] = lp[:, 0, 0]
    has_label = tgt_lens > 0
    if smax > 1:
        alpha[0, has_label, 1] = lp[has_label, 0, 1]
    for t in range(1, tmax):
        prev = alpha[t - 1]
        s1 = np.concatenate([neg[:, :1], prev[:, :-1]], axis=1)
        s2 = np.where(skip, np.concatenate([neg[:, :2], prev[:, :-2]], axis=1), -np.inf)
        alpha[t] = _lse3(prev, s1, s2) + lp[:, t]

    beta = np.full((tmax, n, smax), -np.inf)
    rows = np.arange(n)
    last = in_lens - 1
    skip_next = np.zeros((n, smax), dtype=bool)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(tmax - 1, -1, -1):
        starting = last == t
        if starting.any():
            b = np.full((n, smax), -np.inf)
            b[rows, s_lens - 1] = lp[rows, t, s_lens - 1]
            two = s_lens >= 2
            b[rows[two], s_lens[two] - 2] = lp[rows[two], t, s_lens[two] - 2]
            beta[t, starting] = b[starting]
        inner = last > t
        if inner.any():
            nxt = beta[t + 1]
            n1 = np.concatenate([nxt[:, 1:], neg[:, :1]], axis=1)
            n2 = np.where(skip_next, np.concatenate([nxt[:, 2:], neg[:, :2]], axis=1), -np.inf)
            rec = _lse3(nxt, n1, n2) + lp[:, t]
            beta[t, inner] = rec[inner]

    end = alpha[last, rows]  # [N, S]
    ll = end[rows, s_lens - 1]
    ll = np.where(s_lens >= 2, np.logaddexp(ll, end[rows, np.maximum(s_lens - 2, 0)]), ll)
    if not np.isfinite(ll).all():
        bad = int(np.flatnonzero(~np.isfinite(ll))[0])
        raise ValueError(f"batch element {bad}: zero probability for the target")

    # posterior occupancy of each extended-label state, folded onto classes
    with np.errstate(invalid="ignore"):
        gamma = alpha.transpose(1, 0, 2) + beta.transpose(1, 0, 2) - lp - ll[:, None, None]
    occ_s = np.exp(np.where(np.isfinite(gamma), gamma, -np.inf))
    occ = np.zeros((n, tmax, ncls))
    for i in range(n):
        np.add.at(occ[i].T, ext[i, : s_lens[i]], occ_s[i, :, : s_lens[i]].T)
    tmask = (np.arange(tmax)[None, :] < in_lens[:, None])[:, :, None]
    grad = (np.exp(logp) - occ) * tmask
    return -ll, grad


def ctc_loss_batched(logits: Tensor, targets: Sequence[Sequence[int]], input_lengths=None,
                     target_lengths=None) -> Tensor:
    """Mean CTC loss over the batch; frames past each input length are ignored."""
    if logits.ndim != 3:
        raise ValueError(f"expected logits [N, T, C], got {logits.shape}")
    n, tmax, _ = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if input_lengths is None:
        input_lengths = np.full(n, tmax)
    targets = [list(map(int, t)) for t in targets]
    if target_lengths is not None:
        targets = [t[:int(l)] for t, l in zip(targets, target_lengths)]
    if len(targets) != n:
        raise ValueError(f"{len(targets)} targets for a batch of {n}")
    logp = _log_softmax64(logits.data)
    nll, grad = ctc_forward_backward(logp, targets, input_lengths)
    dtype = logits.dtype

    def bw(g):
        return ((grad * (float(g) / n)).astype(dtype),)

    return _result("ctc_loss", np.asarray(nll.mean(), dtype=dtype), (logits,), bw)


def ctc_loss(logits: Tensor, target: Sequence[int]) -> Tensor:
    """CTC loss for one sequence of pre-softmax logits [T, V+1]."""
    if logits.ndim != 2:
        raise ValueError(f"expected logits [T, C], got {logits.shape}")
    return ctc_loss_batched(logits.reshape(1, *logits.shape), [target])


def ctc_loss_from_probs(probs: np.ndarray, target: Sequence[int]) -> float:
    """CTC loss evaluated directly on a probability table (float64)."""
    logp = np.log(np.asarray(probs, dtype=np.float64))[None]
    nll, _ = ctc_forward_backward(logp, [list(target)], [probs.shape[0]])
    return float(nll[0])


def ctc_brute_force(probs, target: Sequence[int], blank: int = BLANK, limit: int = 10 ** 7) -> float:
    """Enumerate every frame-level path, keep those collapsing to ``target``, return -log of their mass."""
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    t, c = probs.shape
    if c ** t > limit:
        raise ValueError(f"{c}^{t} paths exceeds the enumeration limit {limit}")
    target = [int(y) for y in target]
    total = 0.0
    for path in itertools.product(range(c), repeat=t):
        if collapse(path, blank) == target:
            total += float(np.prod(probs[np.arange(t), path]))
    if total == 0.0:
        raise ValueError("target is unalignable: no path collapses to it")
    return -np.log(total)


def ctc_greedy_decode(logits, length: Optional[int] = None, blank: int = BLANK) -> list[int]:
    """Per-frame argmax (first index wins ties), collapse repeats, drop blanks."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if length is not None:
        arr = arr[:length]
    return collapse(np.argmax(arr, axis=-1).tolist(), blank)
