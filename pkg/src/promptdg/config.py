"""Flat key=value run configuration with documented defaults.

One config file carries both the training/run keys and the synthetic
generator keys; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    """Everything the training stages and inference need besides data paths."""

    # backbone
    backbone_seed: int = 7
    l_tok: int = 8
    c_in: int = 16
    c_mid: int = 32
    d_embed: int = 32
    l_ctx: int = 16
    l_vp: int = 12
    d_tok: int = 16
    # loss weights
    tau: float = 0.05
    alpha1: float = 8.0
    alpha2: float = 2.0
    alpha3: float = 0.4
    beta1: float = 0.8
    gamma_prime: float = 8.0
    # worst-case stylization search
    wera_bases: int = 3
    wera_steps: int = 10
    wera_eta: float = 0.05
    # prototype cache
    beta_sharp: float = 5.0
    beta2: float = 5.0
    proto_epochs: int = 20
    proto_lr: float = 0.05
    # schedules
    gat_epochs: int = 40
    imt_epochs: int = 40
    wera_epochs: int = 40
    lr: float = 1e-3
    # the visual prompt pathway (mean-pooled bounded tokens, unit-norm
    # output) carries ~100x less gradient gain than the text pathway, so the
    # visual stages need proportionally larger steps; the 2:1 ratio between
    # the stage-1 and worst-case alignment rates is preserved
    imt_lr: float = 0.1
    wera_lr: float = 0.05
    weight_decay: float = 5e-4
    momentum: float = 0.0
    batch_size: int = 16
    train_seed: int = 0

    def __post_init__(self):
        for name in (
            "l_tok", "c_in", "c_mid", "d_embed", "l_ctx", "l_vp", "d_tok",
            "batch_size",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("gat_epochs", "imt_epochs", "wera_epochs", "proto_epochs",
                     "wera_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.wera_bases < 1:
            raise ValueError("wera_bases must be >= 1")
        if self.wera_eta < 0:
            raise ValueError("wera_eta must be >= 0")
        if not 0 <= self.backbone_seed < 2**32:
            raise ValueError("backbone_seed must fit in u32")


@dataclass
class GeneratorConfig:
    """Synthetic multi-domain benchmark: domain shift is exactly a per-channel
    affine (first and second moment) transform of shared class content."""

    n_classes: int = 7
    n_domains: int = 4
    per_cell: int = 60
    token_noise: float = 0.3
    style_scale_min: float = 0.5
    style_scale_max: float = 2.0
    style_shift_min: float = -1.0
    style_shift_max: float = 1.0
    anchor_noise: float = 0.05
    gen_seed: int = 1

    def __post_init__(self):
        if self.n_classes < 2 or self.n_domains < 2 or self.per_cell < 1:
            raise ValueError("generator counts must be positive (>=2 classes/domains)")
        if self.style_scale_min <= 0 or self.style_scale_max < self.style_scale_min:
            raise ValueError("style scale range must be positive and ordered")
        if self.style_shift_max < self.style_shift_min:
            raise ValueError("style shift range must be ordered")
        if self.token_noise < 0 or self.anchor_noise < 0:
            raise ValueError("noise scales must be non-negative")


_RUN_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_GEN_FIELDS = {f.name: f.type for f in fields(GeneratorConfig)}


def _parse_value(key: str, text: str, type_name: str):
    try:
        if type_name == "int":
            return int(text)
        return float(text)
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: cannot parse {text!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """key=value lines; '#' starts a comment; unknown keys are rejected."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _RUN_FIELDS and key not in _GEN_FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def load_config(path) -> tuple[RunConfig, GeneratorConfig]:
    raw = parse_config_text(Path(path).read_text())
    run_kwargs = {
        k: _parse_value(k, v, _RUN_FIELDS[k]) for k, v in raw.items() if k in _RUN_FIELDS
    }
    gen_kwargs = {
        k: _parse_value(k, v, _GEN_FIELDS[k]) for k, v in raw.items() if k in _GEN_FIELDS
    }
    return RunConfig(**run_kwargs), GeneratorConfig(**gen_kwargs)
