"""Checkpoint files and the ``key = value`` config format.

Checkpoint layout (little-endian)::

    b"VSCK" | version u32 | metadata length u32 | metadata (sorted-key JSON) | parameter blobs

The metadata names the model kind and its config so a checkpoint rebuilds its
own architecture; each parameter entry records name, shape, dtype, offset and
byte count relative to the start of the blob area.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .conformer import (AudioFrontendConfig, ConformerBlock, ConformerConfig, EncoderStack, StemConfig,
                        make_teacher, make_visual_base, _rngs)
from .frontends import ConvSubsampler
from .nn import Linear, Module

MAGIC = b"VSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------
# model kinds
# ----------------------------------------------------------------------

def _conformer(cfg: dict) -> ConformerConfig:
    return ConformerConfig(**cfg)


def build_model(kind: str, config: dict) -> EncoderStack:
    """Fresh model of ``kind`` from a config snapshot (weights are placeholders)."""
    seed = int(config.get("seed", 0))
    cfg = _conformer(config["conformer"])
    if kind == "teacher":
        return make_teacher(cfg, AudioFrontendConfig(**config["audio"]), int(config["vocab_size"]), seed)
    if kind == "audio_base":
        rng, drop = _rngs(seed)
        audio = AudioFrontendConfig(**config["audio"])
        adapter = ConvSubsampler(audio.n_mels, audio.channels, cfg.d, rng)
        return EncoderStack(cfg, [ConformerBlock(cfg, rng, drop) for _ in range(cfg.n_layers)], adapter=adapter)
    if kind == "audio_head":
        rng, drop = _rngs(seed)
        layers = [ConformerBlock(cfg, rng, drop) for _ in range(cfg.n_layers)]
        return EncoderStack(cfg, layers, decoder=Linear(cfg.d, int(config["vocab_size"]) + 1, rng))
    if kind == "visual_base":
        stem = StemConfig(tuple(config["stem"]["channels"]), int(config["stem"]["n_blocks"]))
        return make_visual_base(cfg, int(config["d_target"]), stem, seed)
    raise CheckpointError(f"unknown model kind {kind!r}")


@dataclass
class Checkpoint:
    kind: str
    config: dict
    step: int = 0
    extra: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)  # name -> ndarray, in model order

    def build(self) -> EncoderStack:
        model = build_model(self.kind, self.config)
        model.load_state_dict(self.params)
        return model


def to_checkpoint(model: Module, kind: str, config: dict, step: int = 0, extra: Optional[dict] = None) -> Checkpoint:
    params = {name: np.array(p.data, copy=True) for name, p in model.named_parameters()}
    return Checkpoint(kind, config, int(step), dict(extra or {}), params)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in ck.params.items():
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    meta = {"kind": ck.kind, "config": ck.config, "step": ck.step, "extra": ck.extra, "params": entries}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes + b"".join(blobs)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, this build reads version {VERSION}")
    if len(buf) < 12 + meta_len:
        raise CheckpointError(f"{source}: truncated metadata")
    try:
        meta = json.loads(buf[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt metadata ({e})") from None
    base = 12 + meta_len
    params = {}
    for e in meta["params"]:
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(buf):
            raise CheckpointError(f"{source}: truncated blob for parameter {e['name']!r} "
                                  f"(needs bytes {lo}..{hi}, file has {len(buf)})")
        dtype = np.dtype("<" + e["dtype"]) if e["dtype"][0] in "fiu" else np.dtype(e["dtype"])
        arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        params[e["name"]] = arr.reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return Checkpoint(meta["kind"], meta["config"], int(meta["step"]), meta.get("extra", {}), params)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_checkpoint(model: Module, path, kind: str, config: dict, step: int = 0,
                    extra: Optional[dict] = None) -> Checkpoint:
    ck = to_checkpoint(model, kind, config, step, extra)
    atomic_write_bytes(path, encode_checkpoint(ck))
    return ck


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def load_checkpoint(path) -> tuple[EncoderStack, Checkpoint]:
    """Rebuild the model stored at ``path``."""
    ck = read_checkpoint(path)
    return ck.build(), ck


def load_into(model: Module, path) -> Checkpoint:
    """Load parameters from ``path`` into an existing model (names and shapes must match)."""
    ck = read_checkpoint(path)
    model.load_state_dict(ck.params)
    return ck


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def params_digest(model: Module) -> str:
    return hashlib.sha256(encode_checkpoint(to_checkpoint(model, "digest", {}))).hexdigest()


# ----------------------------------------------------------------------
# config files
# ----------------------------------------------------------------------

def parse_value(text: str) -> Any:
    """Typed value of a config string: bool, int, float, comma list, or plain string."""
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    """``key = value`` lines with dotted keys; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key or any(not part.isidentifier() for part in key.split(".")):
            raise ValueError(f"{source}:{lineno}: bad key {key!r}")
        out[key] = parse_value(value)
    return out


def read_config(path) -> dict[str, Any]:
    return parse_config(Path(path).read_text(), str(path))
