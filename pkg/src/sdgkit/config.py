"""Flat ``key = value`` experiment configuration.

Lines are ``dotted.key = value``; ``#`` starts a comment; blank lines are
ignored.  Lists are comma separated.  Unknown keys, malformed values and
violated constraints are all reported together by :func:`validate`.
"""

from __future__ import annotations

import difflib
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .model import BACKBONE_KINDS, DECODER_RESOLUTIONS, PLUGINS

DATA_ROOT_ENV = "SDGKIT_DATA_ROOT"


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | bool | str | ints | floats | strs
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    help: str = ""


def _choice(*options):
    return lambda v: v in options, "one of " + ", ".join(map(str, options))


def _in(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        return (v > lo if lo_open else v >= lo) and (v < hi if hi_open else v <= hi)
    return check, f"in {'(' if lo_open else '['}{lo}, {hi}{')' if hi_open else ']'}"


def _key(kind, default, constraint=None, help=""):
    check, rule = constraint if constraint else (None, "")
    return Key(kind, default, check, rule, help)


_positive = (lambda v: v > 0, "> 0")
_nonneg = (lambda v: v >= 0, ">= 0")
_nonneg_list = (lambda v: all(x >= 0 for x in v) and len(v) > 0, "non-empty, all >= 0")
_positive_list = (lambda v: all(x > 0 for x in v) and len(v) > 0, "non-empty, all > 0")

METHOD_NAMES = ("erm_noaug", "erm", "condisr", "condisr_norec")

SCHEMA: dict[str, Key] = {
    # data
    "data.source": _key("str", "synthetic", _choice("synthetic", "camelyon17", "directory")),
    "data.root": _key("str", "", help=f"dataset directory; falls back to ${DATA_ROOT_ENV}"),
    "data.lazy": _key("bool", False),
    "data.seed": _key("int", 0),
    "data.n_domains": _key("int", 5, (lambda v: v >= 2, ">= 2")),
    "data.samples_per_domain": _key("int", 1250, (lambda v: v >= 10, ">= 10")),
    "data.holdout": _key("float", 0.2, _in(0, 1, True, True)),
    "data.norm": _key("str", "auto", _choice("auto", "imagenet", "half")),
    # augmentation
    "aug.bezier.invert_prob": _key("float", 0.5, _in(0, 1)),
    "aug.bezier.per_channel": _key("bool", False),
    "aug.fda.beta_min": _key("float", 0.05, _in(0, 0.5)),
    "aug.fda.beta_max": _key("float", 0.15, _in(0, 0.5)),
    "aug.resample": _key("str", "batch", _choice("batch", "once")),
    # model
    "model.kind": _key("str", "resnet18", _choice(*BACKBONE_KINDS)),
    "model.pretrained": _key("str", "", help="flat weights file for stem + body"),
    "model.stem_channels": _key("int", 64, _positive),
    "model.stem_stride": _key("int", 2, _positive, help="small-cnn only"),
    "model.widths": _key("ints", (32, 48, 64), _positive_list, help="small-cnn block widths"),
    "model.proj_dim": _key("int", 128, _positive),
    "model.proj_hidden": _key("int", 0, _nonneg),
    "model.tau": _key("float", 0.1, _positive),
    "model.gate_cls_grad": _key("bool", True, help="let the classification loss update the gate"),
    "model.freeze_stem_bn": _key("bool", False),
    "decoder.resolution": _key("int", 48, _choice(*DECODER_RESOLUTIONS)),
    "decoder.widths": _key("ints", (32,), _positive_list),
    "plugin.kind": _key("str", "none"),
    "plugin.p": _key("float", 0.5, _in(0, 1)),
    "plugin.alpha": _key("float", 0.1, _positive),
    "plugin.layers": _key("ints", (0, 1, 2), (lambda v: all(i in (0, 1, 2) for i in v), "subset of 0,1,2")),
    # losses
    "loss.lambda_cls": _key("float", 1.0, _nonneg),
    "loss.lambda_str": _key("float", 0.1, _nonneg),
    "loss.lambda_sty": _key("float", 0.1, _nonneg),
    "loss.lambda_rec": _key("float", 0.1, _nonneg),
    "loss.style_mode": _key("str", "literal", _choice("literal", "margin")),
    "loss.margin": _key("float", 1.0, _nonneg),
    "loss.clamp": _key("float", 0.0, _nonneg, help="per-pair distance cap; 0 disables"),
    "loss.distance": _key("str", "l1", _choice("l1", "mean")),
    "loss.rec_norm": _key("str", "mse", _choice("mse", "sum")),
    # training
    "train.optimizer": _key("str", "adam", _choice("adam")),
    "train.lr": _key("float", 1e-3, _positive),
    "train.batch_size": _key("int", 256, _positive),
    "train.epochs": _key("int", 50, _positive),
    "train.seeds": _key("ints", (0, 1, 2), _nonneg_list),
    "train.workers": _key("int", 1, _positive),
    "train.max_steps": _key("int", 0, _nonneg, help="stop each run after this many steps; 0 = no cap"),
    "eval.batch_size": _key("int", 512, _positive),
    # experiment
    "experiment.methods": _key("strs", ("condisr",), (lambda v: len(v) > 0 and all(m in METHOD_NAMES for m in v),
                                                      "non-empty subset of " + ", ".join(METHOD_NAMES))),
    "experiment.sources": _key("ints", (0, 1, 2, 3, 4), _nonneg_list),
}


class Config(dict):
    """Resolved configuration: every schema key present with a typed value."""

    def override(self, **updates) -> "Config":
        out = Config(self)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError([f"unknown key {key!r}"])
            out[key] = v
        return out

    def data_root(self) -> str:
        return self["data.root"] or os.environ.get(DATA_ROOT_ENV, "")

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.items()))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _parse(kind: str, text: str):
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "str":
        return text
    items = [t.strip() for t in text.split(",") if t.strip()]
    if kind == "ints":
        return tuple(int(t) for t in items)
    if kind == "floats":
        return tuple(float(t) for t in items)
    if kind == "strs":
        return tuple(items)
    raise AssertionError(kind)


def defaults() -> Config:
    return Config({k: spec.default for k, spec in SCHEMA.items()})


def parse_text(text: str, source: str = "<config>") -> tuple[dict[str, Any], list[str]]:
    values, errors = {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            close = difflib.get_close_matches(key, SCHEMA, n=1)
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            errors.append(f"{source}:{lineno}: unknown key {key!r}{hint}")
            continue
        try:
            values[key] = _parse(SCHEMA[key].kind, value)
        except ValueError:
            errors.append(f"{source}:{lineno}: {key}: expected {SCHEMA[key].kind}, got {value!r}")
    return values, errors


def validate(values: dict[str, Any]) -> list[str]:
    errors = []
    for key, value in values.items():
        spec = SCHEMA[key]
        if spec.check is not None and not spec.check(value):
            errors.append(f"{key} = {format_value(value)}: must be {spec.rule}")
    if values.get("aug.fda.beta_min", 0) > values.get("aug.fda.beta_max", 0.5):
        errors.append("aug.fda.beta_min must not exceed aug.fda.beta_max")
    kind = values.get("plugin.kind", "none")
    if kind != "none" and kind not in PLUGINS:
        errors.append(f"plugin.kind = {kind}: must be none or a registered plugin ({', '.join(sorted(PLUGINS))})")
    if values.get("model.kind") == "resnet18" and values.get("model.stem_channels", 64) != 64:
        errors.append("model.stem_channels must be 64 for resnet18")
    if values.get("model.kind") == "small-cnn" and len(values.get("model.widths", ())) != 3:
        errors.append("model.widths needs three entries for small-cnn")
    if values.get("data.source") in ("camelyon17", "directory") and not (
            values.get("data.root") or os.environ.get(DATA_ROOT_ENV)):
        errors.append(f"data.root (or ${DATA_ROOT_ENV}) is required for data.source = {values['data.source']}")
    return errors


def load_text(text: str, source: str = "<config>") -> Config:
    values, errors = parse_text(text, source)
    cfg = defaults()
    cfg.update(values)
    errors += validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def load(path) -> Config:
    path = Path(path)
    return load_text(path.read_text(), str(path))


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("sdgkit.presets").iterdir() if p.name.endswith(".cfg"))


def preset_text(name: str) -> str:
    res = resources.files("sdgkit.presets") / f"{name}.cfg"
    if not res.is_file():
        raise ConfigError([f"unknown preset {name!r}; available: {', '.join(preset_names())}"])
    return res.read_text()


def load_preset(name: str) -> Config:
    return load_text(preset_text(name), f"preset:{name}")
