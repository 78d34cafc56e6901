"""Run configuration: a flat ``section.key = value`` text format.

Blank lines and ``#`` comments are ignored. Every key must appear in
:data:`SCHEMA`; unknown keys and unparsable values raise
:class:`ConfigError` before any work starts. :func:`dump` writes the
canonical form, which :func:`parse` reads back to an equal config.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from protomoco.augment import AugmentationSpec
from protomoco.autodiff import SgdConfig
from protomoco.contrastive import PretrainConfig
from protomoco.fewshot import DISTANCES, LOSSES, MetaConfig
from protomoco.models import EncoderConfig


class ConfigError(ValueError):
    pass


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    value = float(text)
    if value != value or value in (float("inf"), float("-inf")):
        raise ValueError("must be finite")
    return value


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError("expected true or false")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(_float(t) for t in text.split(",") if t.strip())


def _schedule(text: str) -> tuple[tuple[int, float], ...]:
    pairs = []
    for item in text.split(","):
        if not item.strip():
            continue
        epoch, _, mult = item.partition(":")
        pairs.append((int(epoch), _float(mult)))
    return tuple(pairs)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{e}:{_format(m)}" for e, m in value)
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


SCHEMA: dict[str, Key] = {
    "run.seed": Key(_int, 42, "global seed"),
    "run.out": Key(str, "out", "output directory"),
    "data.root": Key(str, "data", "dataset directory holding manifest.csv"),
    "data.image_size": Key(_int, 32, "images are resized to this square size"),
    "data.channels": Key(_int, 1, "1 for P5 grayscale, 3 for P6 color"),
    "synth.n_per_class": Key(_int, 100, "synthetic images per class"),
    "synth.classes": Key(_int, 2, "synthetic classes (blobs, rings)"),
    "synth.groups_per_class": Key(_int, 10, "subject groups per synthetic class"),
    "aug.crop_min": Key(_float, 0.5, "smallest crop area fraction"),
    "aug.crop_max": Key(_float, 1.0, "largest crop area fraction"),
    "aug.flip_p": Key(_float, 0.5, "horizontal flip probability"),
    "aug.jitter": Key(_float, 0.5, "color distortion strength"),
    "aug.method_weights": Key(_floats, (0.5, 0.5), "probabilities of strategy 1 and 2"),
    "encoder.kind": Key(_choice("conv", "mlp"), "conv", "encoder family"),
    "encoder.input_norm": Key(_choice("none", "center"), "center", "input pixel normalization"),
    "encoder.filters": Key(_ints, (16, 32), "conv filters per layer"),
    "encoder.kernels": Key(_ints, (3, 4), "conv kernel size per layer"),
    "encoder.pool": Key(_int, 2, "average-pool window after each conv"),
    "encoder.global_pool": Key(_bool, True, "average the last feature map over all positions"),
    "encoder.mlp_hidden": Key(_int, 128, "hidden width of the mlp encoder"),
    "encoder.dim_h": Key(_int, 64, "encoder output (representation) size"),
    "encoder.head_hidden": Key(_int, 128, "projection head hidden width"),
    "encoder.dim_z": Key(_int, 32, "projection head output size"),
    "pretrain.tau": Key(_float, 0.07, "softmax temperature"),
    "pretrain.batch": Key(_int, 16, "mini-batch size"),
    "pretrain.epochs": Key(_int, 30, "pretraining epochs"),
    "pretrain.queue_k": Key(_int, 1024, "key queue capacity"),
    "pretrain.m": Key(_float, 0.999, "key encoder momentum coefficient"),
    "pretrain.lr": Key(_float, 0.03, "initial learning rate"),
    "pretrain.momentum": Key(_float, 0.9, "SGD momentum"),
    "pretrain.weight_decay": Key(_float, 1e-4, "SGD weight decay"),
    "pretrain.lr_drops": Key(_schedule, ((120, 0.1), (160, 0.1)), "epoch:multiplier pairs"),
    "meta.ways": Key(_int, 2, "classes per episode"),
    "meta.shots": Key(_int, 1, "support samples per class"),
    "meta.episodes": Key(_int, 200, "fine-tuning episodes"),
    "meta.distance": Key(_choice(*DISTANCES), "euclidean", "prototype distance"),
    "meta.loss": Key(_choice(*LOSSES), "softmax-nll", "episode loss"),
    "meta.lr": Key(_float, 5e-5, "fine-tuning learning rate"),
    "meta.momentum": Key(_float, 0.9, "fine-tuning SGD momentum"),
    "meta.weight_decay": Key(_float, 1e-4, "fine-tuning weight decay"),
    "eval.folds": Key(_int, 10, "group-level folds"),
    "eval.episodes": Key(_int, 100, "evaluation episodes per fold"),
    "eval.finetune": Key(_bool, True, "fine-tune on each fold's training groups before evaluating"),
    "eval.positive_class": Key(_int, 1, "class treated as positive for precision, recall and AUC"),
    "gradcheck.instances": Key(_int, 20, "random instances per operation"),
    "gradcheck.precision": Key(_choice("float32", "float64"), "float32", "storage precision under test"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def replace(self, **overrides: Any) -> "RunConfig":
        """Copy with keys given as ``section__key=value``."""
        values = dict(self.values)
        for name, value in overrides.items():
            key = name.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return validate(values)

    def augmentation(self) -> AugmentationSpec:
        v = self.values
        return AugmentationSpec((v["aug.crop_min"], v["aug.crop_max"]), v["aug.flip_p"], v["aug.jitter"],
                                tuple(v["aug.method_weights"]))

    def encoder(self) -> EncoderConfig:
        v = self.values
        return EncoderConfig(
            kind=v["encoder.kind"], channels=v["data.channels"], image_size=v["data.image_size"],
            filters=v["encoder.filters"], kernels=v["encoder.kernels"], pool=v["encoder.pool"],
            global_pool=v["encoder.global_pool"], input_norm=v["encoder.input_norm"],
            mlp_hidden=v["encoder.mlp_hidden"], dim_h=v["encoder.dim_h"],
            head_hidden=v["encoder.head_hidden"], dim_z=v["encoder.dim_z"])

    def pretrain(self) -> PretrainConfig:
        v = self.values
        sgd = SgdConfig(v["pretrain.lr"], v["pretrain.momentum"], v["pretrain.weight_decay"], v["pretrain.lr_drops"])
        return PretrainConfig(v["pretrain.tau"], v["pretrain.batch"], v["pretrain.epochs"], v["pretrain.queue_k"],
                              v["pretrain.m"], sgd)

    def meta(self) -> MetaConfig:
        v = self.values
        sgd = SgdConfig(v["meta.lr"], v["meta.momentum"], v["meta.weight_decay"], ())
        return MetaConfig(v["meta.distance"], v["meta.loss"], v["meta.episodes"], v["meta.ways"], v["meta.shots"], sgd)


def validate(values: dict[str, Any]) -> RunConfig:
    """Check cross-key constraints by building every module config."""
    unknown = sorted(set(values) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    full = {key: values.get(key, spec.default) for key, spec in SCHEMA.items()}
    cfg = RunConfig(full)
    try:
        cfg.augmentation()
        cfg.encoder()
        cfg.pretrain()
        cfg.meta()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if full["eval.folds"] < 2 or full["eval.episodes"] < 1:
        raise ConfigError("eval.folds must be >= 2 and eval.episodes >= 1")
    if full["gradcheck.instances"] < 1:
        raise ConfigError("gradcheck.instances must be positive")
    if full["data.channels"] not in (1, 3):
        raise ConfigError("data.channels must be 1 or 3")
    return cfg


def parse(text: str, source: str = "<config>") -> RunConfig:
    return validate(parse_values(text, source))


def parse_values(text: str, source: str = "<config>") -> dict[str, Any]:
    """Keys explicitly set in ``text``, parsed but not yet cross-validated."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = SCHEMA[key].parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value {value!r} for {key}: {exc}") from None
    return values


def load(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return validate({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text, str(path))


def dump(cfg: RunConfig) -> str:
    return "".join(f"{key} = {_format(cfg.values[key])}\n" for key in SCHEMA)
