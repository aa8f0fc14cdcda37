"""Run configuration as ``key = value`` lines.

Keys before any ``[section]`` header belong to ``train``; ``[wavenet]`` and
``[biaxial]`` headers switch section. Values are Python literals
(``1e-3``, ``true``, ``1, 2, 4``); ``#`` starts a comment.
"""

from __future__ import annotations

import ast
import configparser
from dataclasses import fields
from pathlib import Path

from .biaxial import BiaxialConfig
from .errors import FormatError, InputError
from .train import TrainConfig
from .wavenet import WaveNetConfig, desk_config

SECTIONS = ("train", "wavenet", "biaxial")


def _value(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return ast.literal_eval(text.strip())
    except (ValueError, SyntaxError):
        return text.strip()


def parse_config(text: str, source: str = "<config>") -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       delimiters=("=",), interpolation=None)
    parser.optionxform = str
    significant = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.strip().startswith("#")]
    implicit = not significant or not significant[0].startswith("[")
    try:
        parser.read_string("[train]\n" + text if implicit else text, source=source)
    except configparser.Error as exc:
        if getattr(exc, "errors", None):
            lineno, line = exc.errors[0]
            where, reason = f"{source}:{lineno - implicit}", f"cannot parse {line.strip()}"
        else:
            where = f"{source}:{exc.lineno - implicit}" if hasattr(exc, "lineno") else source
            reason = exc.message.splitlines()[0].split("]: ", 1)[-1]
        raise FormatError(f"{where}: {reason}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise InputError(f"{source}: unknown section(s) {', '.join(sorted(unknown))}")
    return {s: {k: _value(v) for k, v in parser[s].items()} for s in parser.sections()}


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def _checked(cls, values: dict, section: str) -> dict:
    unknown = set(values) - {f.name for f in fields(cls)}
    if unknown:
        raise InputError(f"unknown {section} setting(s): {', '.join(sorted(unknown))}")
    return values


def wavenet_config(cfg: dict, conditioned: bool) -> WaveNetConfig:
    """Desk-scale defaults overridden by the ``wavenet`` section."""
    base = desk_config(conditioned).to_dict()
    base.update(_checked(WaveNetConfig, cfg.get("wavenet", {}), "wavenet"))
    base["conditioned"] = conditioned
    if "dilation_schedule" not in cfg.get("wavenet", {}) and "dilation_layers" in cfg.get("wavenet", {}):
        base["dilation_schedule"] = None
    return WaveNetConfig.from_dict(base)


def train_config(cfg: dict, **overrides) -> TrainConfig:
    values = {"window_length": 1024}
    values.update(_checked(TrainConfig, cfg.get("train", {}), "train"))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def biaxial_config(cfg: dict) -> BiaxialConfig:
    return BiaxialConfig(**_checked(BiaxialConfig, cfg.get("biaxial", {}), "biaxial"))
