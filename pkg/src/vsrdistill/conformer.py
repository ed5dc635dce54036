"""Conformer encoder stacks and the base/head split."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .frontends import ConvSubsampler, VisualFrontend, VisualStem
from .nn import Dropout, LayerNorm, Linear, Module, xavier, zeros
from .tensor import Tensor

NEG_INF = -1e9


@dataclass
class ConformerConfig:
    n_layers: int = 6
    d: int = 32
    n_heads: int = 4
    ff_expansion: int = 4
    conv_kernel: int = 7
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


class FeedForward(Module):
    def __init__(self, d: int, expansion: int, p: float, rng, drop_rng):
        self.norm = LayerNorm(d)
        self.fc1 = Linear(d, d * expansion, rng)
        self.fc2 = Linear(d * expansion, d, rng)
        self.drop = Dropout(p, drop_rng)

    def forward(self, x: Tensor) -> Tensor:
        h = T.swish(self.fc1(self.norm(x)))
        return self.drop(self.fc2(self.drop(h)))


class SelfAttention(Module):
    def __init__(self, d: int, n_heads: int, p: float, rng, drop_rng):
        self.norm = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)
        self.drop = Dropout(p, drop_rng)
        self.n_heads = n_heads

    def forward(self, x: Tensor, key_bias: Optional[np.ndarray]) -> Tensor:
        n, t, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = self.qkv(self.norm(x)).reshape(n, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        if key_bias is not None:
            scores = scores + key_bias
        attn = T.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.drop(self.out(ctx))


class ConvModule(Module):
    def __init__(self, d: int, kernel: int, p: float, rng, drop_rng):
        self.norm = LayerNorm(d)
        self.pw1 = Linear(d, 2 * d, rng)
        self.dw_weight = xavier(rng, (d, kernel), kernel, kernel)
        self.dw_bias = zeros((d,))
        # LayerNorm stands in for BatchNorm so every batch element is independent
        self.dw_norm = LayerNorm(d)
        self.pw2 = Linear(d, d, rng)
        self.drop = Dropout(p, drop_rng)

    def forward(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        h = T.glu(self.pw1(self.norm(x)), axis=-1)
        if mask is not None:
            h = h * mask[:, :, None]
        h = T.depthwise_conv1d(h.swapaxes(1, 2), self.dw_weight, self.dw_bias).swapaxes(1, 2)
        h = T.swish(self.dw_norm(h))
        return self.drop(self.pw2(h))


class ConformerBlock(Module):
    """Macaron feed-forward, self-attention, convolution, feed-forward, final norm."""

    def __init__(self, cfg: ConformerConfig, rng: np.random.Generator, drop_rng=None):
        p = cfg.dropout
        self.ff1 = FeedForward(cfg.d, cfg.ff_expansion, p, rng, drop_rng)
        self.mhsa = SelfAttention(cfg.d, cfg.n_heads, p, rng, drop_rng)
        self.conv = ConvModule(cfg.d, cfg.conv_kernel, p, rng, drop_rng)
        self.ff2 = FeedForward(cfg.d, cfg.ff_expansion, p, rng, drop_rng)
        self.final_norm = LayerNorm(cfg.d)
        self.d = cfg.d

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.d:
            raise ValueError(f"conformer block of width {self.d} got input {x.shape}")
        key_bias = None
        if mask is not None:
            key_bias = ((1.0 - mask) * NEG_INF).astype(x.dtype)[:, None, None, :]
            mask = mask.astype(x.dtype)
        x = x + 0.5 * self.ff1(x)
        x = x + self.mhsa(x, key_bias)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


def conformer_block(x: Tensor, block: ConformerBlock, mask=None) -> Tensor:
    return block(x, mask)


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def length_mask(lengths, t: int) -> np.ndarray:
    return (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


class EncoderStack(Module):
    """An optional input adapter, Conformer layers, and optional output maps.

    ``out_proj`` maps the final width to a target width (visual base);
    ``decoder`` maps it to vocabulary logits (audio head / full teacher).
    """

    def __init__(self, config: ConformerConfig, layers: list, adapter: Optional[Module] = None,
                 out_proj: Optional[Linear] = None, decoder: Optional[Linear] = None):
        if len(layers) != config.n_layers:
            raise ValueError(f"config says {config.n_layers} layers, got {len(layers)}")
        self.config = config
        self.adapter = adapter
        self.layers = list(layers)
        self.out_proj = out_proj
        self.decoder = decoder

    @property
    def d_out(self) -> int:
        if self.decoder is not None:
            return self.decoder.weight.shape[1]
        if self.out_proj is not None:
            return self.out_proj.weight.shape[1]
        return self.config.d

    def forward(self, features: Tensor, lengths=None) -> tuple[Tensor, np.ndarray]:
        if features.shape[0] == 0:
            raise ValueError("empty batch")
        if lengths is None:
            lengths = np.full(features.shape[0], features.shape[1])
        x, lengths = self.embed(features, lengths)
        return self.run_layers(x, lengths, 0, len(self.layers)), lengths

    def embed(self, features: Tensor, lengths) -> tuple[Tensor, np.ndarray]:
        if self.adapter is None:
            return features, np.asarray(lengths)
        x, lengths = self.adapter(features, lengths)
        pe = sinusoidal_positions(x.shape[1], x.shape[2]).astype(x.dtype)
        return x + pe, lengths

    def run_layers(self, x: Tensor, lengths, start: int, stop: int) -> Tensor:
        mask = length_mask(lengths, x.shape[1])
        full = bool(mask.all())
        for layer in self.layers[start:stop]:
            x = layer(x, None if full else mask)
        if stop == len(self.layers):
            if self.out_proj is not None:
                x = self.out_proj(x)
            if self.decoder is not None:
                x = self.decoder(x)
        return x


def encode(stack: EncoderStack, features: Tensor, lengths=None) -> Tensor:
    out, _ = stack(features, lengths)
    return out


@dataclass
class SplitModel(Module):
    base: EncoderStack
    head: EncoderStack

    def forward(self, features: Tensor, lengths=None) -> tuple[Tensor, np.ndarray]:
        enc, lengths = self.base(features, lengths)
        return self.head(enc, lengths)


def split(stack: EncoderStack, k: int) -> SplitModel:
    """Cut ``stack`` after layer ``k``: the base keeps the adapter, the head the decoder."""
    n = stack.config.n_layers
    if not 1 <= k < n:
        raise ValueError(f"split index must satisfy 1 <= k < {n}, got {k}")
    if stack.out_proj is not None:
        raise ValueError("cannot split a stack with an output projection")
    stack = copy.deepcopy(stack)
    base = EncoderStack(replace(stack.config, n_layers=k), stack.layers[:k], adapter=stack.adapter)
    head = EncoderStack(replace(stack.config, n_layers=n - k), stack.layers[k:], decoder=stack.decoder)
    return SplitModel(base, head)


# ----------------------------------------------------------------------
# builders
# ----------------------------------------------------------------------

@dataclass
class AudioFrontendConfig:
    n_mels: int = 64
    channels: int = 8


@dataclass
class StemConfig:
    channels: tuple = (8, 16)
    n_blocks: int = 4


def _rngs(seed: int):
    ss = np.random.SeedSequence(seed)
    init, drop = ss.spawn(2)
    return np.random.default_rng(init), np.random.default_rng(drop)


def make_teacher(cfg: ConformerConfig, audio: AudioFrontendConfig, vocab_size: int, seed: int) -> EncoderStack:
    """Full audio model: subsampler, Conformer stack, linear decoder to vocab + blank."""
    rng, drop_rng = _rngs(seed)
    adapter = ConvSubsampler(audio.n_mels, audio.channels, cfg.d, rng)
    layers = [ConformerBlock(cfg, rng, drop_rng) for _ in range(cfg.n_layers)]
    decoder = Linear(cfg.d, vocab_size + 1, rng)
    return EncoderStack(cfg, layers, adapter=adapter, decoder=decoder)


def make_visual_base(cfg: ConformerConfig, d_target: int, stem: StemConfig, seed: int) -> EncoderStack:
    """Visual stem + projection to ``cfg.d``, Conformer layers, projection to ``d_target``."""
    rng, drop_rng = _rngs(seed)
    vstem = VisualStem(tuple(stem.channels), stem.n_blocks, rng)
    adapter = VisualFrontend(vstem, cfg.d, rng)
    layers = [ConformerBlock(cfg, rng, drop_rng) for _ in range(cfg.n_layers)]
    return EncoderStack(cfg, layers, adapter=adapter, out_proj=Linear(cfg.d, d_target, rng))


def set_dropout_seed(model: Module, seed: int) -> None:
    """Give every dropout layer of ``model`` one shared, freshly seeded generator."""
    rng = np.random.default_rng(seed)
    for m in model.modules():
        if isinstance(m, Dropout):
            m.rng = rng


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
