"""Run configuration: one JSON document, validated before anything runs.

Unknown keys are rejected and every problem is reported with its dotted
path, e.g. ``model.phycell.k: must be a positive odd integer``. Command-line
``--set a.b.c=value`` overrides are applied to the raw document before
validation.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

BRANCH_MODES = ("full", "phycell_only", "residual_only")
ENCODERS = ("conv", "identity")
GENERATORS = ("blobs", "advection", "diffusion", "advection-diffusion")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class PhyCellConfig:
    k: int = 5
    depth: int = 1


@dataclass
class ResidualConfig:
    layers: int = 3
    channels: int = 16


@dataclass
class ModelConfig:
    frame_size: int = 32
    channels: int = 1
    latent_channels: int = 16
    encoder: str = "conv"
    encoder_channels: list = field(default_factory=lambda: [16, 32])
    phycell: PhyCellConfig = field(default_factory=PhyCellConfig)
    residual: ResidualConfig = field(default_factory=ResidualConfig)
    branch_mode: str = "full"


@dataclass
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 8
    epochs: int = 20
    seed: int = 0
    patience: int = 10
    dtype: str = "float32"
    divergence_factor: float = 1e3


@dataclass
class GeneratorConfig:
    kind: str = "blobs"
    n_blobs: int = 2
    blob_size: int = 7
    speed: list = field(default_factory=lambda: [1.0, 2.5])
    velocity: list = field(default_factory=lambda: [0.5, 0.25])
    diffusivity: float = 0.0
    substeps: int = 4
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    seed: int = 0


@dataclass
class DataConfig:
    generator: GeneratorConfig | None = field(default_factory=GeneratorConfig)
    paths: dict | None = None
    T: int = 10
    delta: int = 10
    mask_ratio: float = 0.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return _export(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        problems: list[str] = []
        # badly typed fields fall back to defaults, so range checks still apply
        cfg = _build(cls, doc, "", problems)
        problems.extend(_validate(cfg))
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


# JSON spelling of fields whose Python name differs
_ALIASES = {"lam": "lambda"}
_NESTED = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "phycell": PhyCellConfig,
    "residual": ResidualConfig,
    "generator": GeneratorConfig,
}


def _export(d):
    if isinstance(d, dict):
        return {_ALIASES.get(k, k): _export(v) for k, v in d.items()}
    return d


def _build(cls, doc, prefix: str, problems: list[str]):
    if not isinstance(doc, dict):
        problems.append(f"{prefix or '<root>'}: expected an object, got {type(doc).__name__}")
        return cls()
    known = {_ALIASES.get(f.name, f.name): f for f in fields(cls)}
    for key in doc:
        if key not in known:
            problems.append(f"{prefix}{key}: unknown key")
    kwargs = {}
    for key, f in known.items():
        if key not in doc:
            continue
        value = doc[key]
        path = f"{prefix}{key}"
        sub = _NESTED.get(f.name)
        if sub is not None:
            if value is None and f.name == "generator":
                kwargs[f.name] = None
                continue
            kwargs[f.name] = _build(sub, value, path + ".", problems)
            continue
        default = getattr(cls(), f.name)
        if isinstance(default, bool) or default is None:
            kwargs[f.name] = value
        elif isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
            kwargs[f.name] = value
        elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
            kwargs[f.name] = float(value)
        elif isinstance(default, str) and isinstance(value, str):
            kwargs[f.name] = value
        elif isinstance(default, list) and isinstance(value, list):
            kwargs[f.name] = list(value)
        else:
            problems.append(f"{path}: expected {type(default).__name__}, got {value!r}")
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> list[str]:
    p: list[str] = []
    m, t, d = cfg.model, cfg.train, cfg.data

    def need(cond, msg):
        if not cond:
            p.append(msg)

    need(m.frame_size > 0, "model.frame_size: must be positive")
    need(m.channels > 0, "model.channels: must be positive")
    need(m.latent_channels > 0, "model.latent_channels: must be positive")
    need(m.encoder in ENCODERS, f"model.encoder: must be one of {ENCODERS}")
    need(m.branch_mode in BRANCH_MODES, f"model.branch_mode: must be one of {BRANCH_MODES}")
    need(
        len(m.encoder_channels) == 2 and all(isinstance(c, int) and c > 0 for c in m.encoder_channels),
        "model.encoder_channels: must be two positive integers",
    )
    if m.encoder == "conv":
        need(m.frame_size % 4 == 0, "model.frame_size: must be divisible by the encoder stride 4")
    else:
        need(
            m.latent_channels == m.channels,
            "model.latent_channels: must equal model.channels with the identity encoder",
        )
    need(m.phycell.k >= 1 and m.phycell.k % 2 == 1, "model.phycell.k: must be a positive odd integer")
    need(m.phycell.depth >= 1, "model.phycell.depth: must be >= 1")
    need(m.residual.layers >= 1, "model.residual.layers: must be >= 1")
    need(m.residual.channels >= 1, "model.residual.channels: must be >= 1")

    need(t.lam >= 0, "train.lambda: must be >= 0")
    need(t.lr > 0, "train.lr: must be positive")
    need(0 <= t.beta1 < 1 and 0 <= t.beta2 < 1, "train.beta1/beta2: must lie in [0, 1)")
    need(t.batch >= 1, "train.batch: must be >= 1")
    need(t.epochs >= 1, "train.epochs: must be >= 1")
    need(t.patience >= 1, "train.patience: must be >= 1")
    need(t.dtype in ("float32", "float64"), "train.dtype: must be float32 or float64")

    need(d.T >= 1, "data.T: must be >= 1")
    need(d.delta >= 1, "data.delta: must be >= 1")
    need(0.0 <= d.mask_ratio <= 0.5, "data.mask_ratio: must lie in [0, 0.5]")
    need(
        (d.generator is None) != (d.paths is None),
        "data: exactly one of data.generator and data.paths must be given",
    )
    if d.paths is not None and not isinstance(d.paths, dict):
        p.append("data.paths: expected an object with train/val/test")
    elif d.paths is not None:
        for split in ("train", "val", "test"):
            need(isinstance(d.paths.get(split), str), f"data.paths.{split}: missing VPT path")
        for key in d.paths:
            need(key in ("train", "val", "test"), f"data.paths.{key}: unknown key")
    g = d.generator
    if g is not None:
        need(g.kind in GENERATORS, f"data.generator.kind: must be one of {GENERATORS}")
        need(g.n_blobs in (1, 2), "data.generator.n_blobs: must be 1 or 2")
        need(len(g.velocity) == 2, "data.generator.velocity: must be [vx, vy]")
        need(len(g.speed) == 2 and 0 <= g.speed[0] <= g.speed[1], "data.generator.speed: must be [lo, hi]")
        need(g.diffusivity >= 0, "data.generator.diffusivity: must be >= 0")
        need(g.substeps >= 4, "data.generator.substeps: must be >= 4")
        for split in ("n_train", "n_val", "n_test"):
            need(getattr(g, split) >= 1, f"data.generator.{split}: must be >= 1")
    return p


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Return a copy of ``doc`` with ``dotted.key=value`` overrides applied.

    Values are parsed as JSON when possible, otherwise kept as strings.
    """
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"--set {item!r}: expected key=value"])
        key, raw = item.split("=", 1)
        try:
            value: Any = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    return doc


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
    return RunConfig.from_dict(apply_overrides(doc, overrides or []))
