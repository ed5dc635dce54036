"""Command-line entry point: ``vsrdistill <subcommand> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline as P
from .data import read_sample
from .persistence import format_value, parse_value, read_config

SUBCOMMANDS = {
    "gen-data": ("data", "generate the synthetic audio-visual corpus"),
    "train-teacher": ("teacher", "train the audio CTC teacher"),
    "split-teacher": ("split", "cut the teacher into audio base and audio head"),
    "pretrain": ("pretrain", "pre-train the visual base on the encoding loss"),
    "finetune": ("finetune", "fine-tune visual base + audio head with CTC and the encoding loss"),
    "eval": ("eval", "score a model on a labeled split"),
    "infer": ("eval", "transcribe one sample file"),
    "bench": ("bench", "measure end-to-end latency"),
    "sweep": ("sweep", "pre-train across slice lengths or image sizes"),
    "show-config": (None, "print the effective config"),
}

# extra sections whose keys each subcommand may set without a prefix
_SHARED = ("paths", "data")


class UsageError(Exception):
    pass


def _usage() -> str:
    lines = ["usage: vsrdistill <subcommand> [--config FILE] [--key value ...]", "", "subcommands:"]
    lines += [f"  {name:<14} {help_}" for name, (_, help_) in SUBCOMMANDS.items()]
    lines += ["", "Flags name config keys: --lambda-enc 1 sets <section>.lambda_enc for the",
              "subcommand's section; fully dotted keys (--pretrain.lr 1e-3) work everywhere."]
    return "\n".join(lines)


def resolve_flag(flag: str, section: Optional[str], cfg: dict) -> str:
    """Config key addressed by ``--flag`` for a subcommand working in ``section``."""
    name = flag.lstrip("-").replace("-", "_")
    if "." in name:
        if name not in cfg:
            raise UsageError(f"unknown config key {name!r}")
        return name
    for sec in ((section,) if section else ()) + _SHARED:
        key = f"{sec}.{name}"
        if key in cfg:
            return key
    raise UsageError(f"unknown flag --{flag.lstrip('-')} for this subcommand")


def build_config(argv: Sequence[str], section: Optional[str]) -> tuple[dict, dict]:
    """Defaults < config file < flags. Returns ``(config, non-config options)``."""
    cfg = P.default_config()
    opts = {}
    args = list(argv)
    i = 0
    pairs = []
    while i < len(args):
        a = args[i]
        if not a.startswith("--"):
            raise UsageError(f"unexpected argument {a!r}")
        if "=" in a:
            flag, value = a.split("=", 1)
        else:
            if i + 1 >= len(args):
                raise UsageError(f"flag {a} needs a value")
            flag, value = a, args[i + 1]
            i += 1
        i += 1
        pairs.append((flag, value))
    for flag, value in pairs:
        if flag == "--config":
            path = Path(value)
            if not path.exists():
                raise UsageError(f"config file {value} not found")
            file_cfg = read_config(path)
            unknown = sorted(set(file_cfg) - set(cfg))
            if unknown:
                raise UsageError(f"{value}: unknown config keys {', '.join(unknown)}")
            cfg.update(file_cfg)
    for flag, value in pairs:
        if flag == "--config":
            continue
        if flag in ("--model", "--sample", "--split") and section in ("eval", "bench"):
            opts[flag[2:]] = value
            continue
        cfg[resolve_flag(flag, section, cfg)] = parse_value(value)
    return cfg, opts


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _dispatch(cmd: str, cfg: dict, opts: dict) -> int:
    if cmd == "show-config":
        for k in sorted(cfg):
            print(f"{k} = {format_value(cfg[k])}")
    elif cmd == "gen-data":
        m = P.run_gen_data(cfg)
        counts = {s: len(m.split(s)) for s in ("pretrain", "finetune", "test")}
        _print({"root": str(P.data_root(cfg)), "samples": len(m.records), **counts})
    elif cmd == "train-teacher":
        recs = P.run_train_teacher(cfg)
        _print(asdict(recs[-1]) if recs else {"step": 0})
    elif cmd == "split-teacher":
        worst = P.run_split_teacher(cfg)
        _print({"k": int(cfg["split.k"]), "recomposition_max_abs_diff": worst})
        if worst != 0.0:
            print("split-teacher: base+head does not reproduce the teacher", file=sys.stderr)
            return 2
    elif cmd == "pretrain":
        res = P.run_pretrain(cfg)
        _print(asdict(res["records"][-1]) if res["records"] else {"step": 0})
    elif cmd == "finetune":
        res = P.run_finetune(cfg)
        _print(asdict(res["records"][-1]) if res["records"] else {"step": 0})
    elif cmd == "eval":
        _print(asdict(P.run_eval(cfg, opts.get("model"), opts.get("split"))))
    elif cmd == "infer":
        if "sample" not in opts:
            raise UsageError("infer needs --sample PATH")
        print(P.run_infer(cfg, read_sample(opts["sample"]), opts.get("model")))
    elif cmd == "bench":
        _print(asdict(P.run_bench(cfg, opts.get("model"))))
    elif cmd == "sweep":
        sys.stdout.write(P.run_sweep(cfg))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(_usage(), file=sys.stdout if argv else sys.stderr)
        return 0 if argv else 1
    cmd = argv[0]
    if cmd not in SUBCOMMANDS:
        print(f"unknown subcommand {cmd!r}\n\n{_usage()}", file=sys.stderr)
        return 1
    section = SUBCOMMANDS[cmd][0]
    try:
        cfg, opts = build_config(argv[1:], section)
    except UsageError as e:
        print(f"{e}\n\n{_usage()}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return _dispatch(cmd, cfg, opts)
    except UsageError as e:
        print(f"{e}\n\n{_usage()}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as e:
        print(f"{cmd}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
