"""Flat ``key = value`` run configuration.

Every key has a default; unknown keys are rejected. The effective config
dumps back to the same format so a run directory can reproduce itself.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .lir import LirConfig
from .synthdata import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # encoder
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 4
    num_classes: int = 3
    # graph aggregation; top_k = 0 means half the patches
    use_gcr: bool = True
    top_k: int = 0
    # image-level logits from the raw CAM: mean, max, or topk (mean of the top quarter)
    cls_pooling: str = "max"
    # reliability mask and pseudo labels
    cam_low: float = 0.25
    cam_high: float = 0.70
    bg_threshold: float = 0.45
    # regularization
    temperature: float = 0.2
    kernel_size: int = 3
    proportion: float = 1.2
    lir_warmup: int = 100
    # loss weights
    alpha: float = 0.2
    beta: float = 0.1
    gamma: float = 0.12
    seg_grad_to_encoder: bool = True
    # optimizer
    lr: float = 3e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    # data
    train_size: int = 1000
    val_size: int = 200
    train_seed: int = 0
    val_seed: int = 1_000_000
    max_shapes: int = 3
    hflip: bool = True
    # run
    seed: int = 0
    checkpoint_every: int = 500
    out_dir: str = "runs/default"

    def __post_init__(self):
        try:
            self.encoder
            self.lir
            self.synth
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.cam_low < self.cam_high < 1:
            raise ConfigError("need 0 < cam_low < cam_high < 1")
        if not 0 <= self.top_k <= self.encoder.num_patches:
            raise ConfigError(f"top_k must be in [0, {self.encoder.num_patches}]")
        if self.cls_pooling not in ("mean", "max", "topk"):
            raise ConfigError(f"cls_pooling must be mean, max, or topk, got {self.cls_pooling!r}")
        for name in ("alpha", "beta", "gamma", "lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.steps < 0 or self.train_size < 1 or self.val_size < 1:
            raise ConfigError("batch_size, train_size, val_size must be >= 1 and steps >= 0")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.patch_size, self.embed_dim, self.depth,
                             self.num_heads, self.num_classes)

    @property
    def lir(self) -> LirConfig:
        return LirConfig(self.temperature, self.kernel_size, self.proportion, self.alpha, self.beta)

    @property
    def synth(self) -> SynthConfig:
        return SynthConfig(num_classes=self.num_classes, image_size=self.image_size,
                           max_shapes=min(self.max_shapes, self.num_classes))

    @property
    def k(self) -> int:
        return self.top_k or max(1, self.encoder.num_patches // 2)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, kind, raw: str):
    if kind in (bool, "bool"):
        v = raw.lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw.replace("_", ""))
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(config: RunConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
