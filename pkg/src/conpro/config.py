"""Flat key=value run configuration.

One schema covers every subcommand: generator, split, model, training,
probe, and artifact paths. Files use `key = value` lines with '#'
comments; `--set key=value` overrides file values; the CONPRO_SEED
environment variable overrides the file's seed but loses to --set.
Unknown keys are rejected by name.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .data import AnchorConfig, GenConfig, SplitSpec
from .evaluation import ProbeTrainConfig
from .model import ModelDims
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_MODES = ("conpro", "supcon2", "supconN")
_PROBE_KINDS = ("linear", "mlp")
_HEAD_ACTIVATIONS = ("none", "tanh")


@dataclass
class RunConfig:
    # synthetic generator
    input_dim: int = 32
    max_severity: int = 5
    subjects_per_class: int = 10
    samples_per_subject_min: int = 8
    samples_per_subject_max: int = 12
    severity_gap: float = 1.0
    noise_sigma: float = 0.42
    # subject-disjoint split
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    # model
    encoder_hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 64
    project_dim: int = 16
    head_activation: str = "none"
    # training schedule
    mode: str = "conpro"
    epochs_con: int = 30
    epochs_pro: int = 30
    batch_size: int = 16
    lr_encoder: float = 1e-3
    lr_heads: float = 1e-2
    momentum: float = 0.9
    margin: float = 2.0
    pairs_train: int = 20000
    pairs_eval: int = 2000
    anchor_n: int = 10
    anchor_resample_per_pair: bool = True
    anchor_stop_gradient: bool = False
    resume_from: str = ""
    # probe / evaluation
    probe_kind: str = "linear"
    probe_hidden: int = 64
    probe_dropout: float = 0.1
    probe_epochs: int = 60
    probe_lr: float = 1e-2
    probe_batch_size: int = 16
    # artifact paths; empty string means "derive from out_dir"
    data_path: str = ""
    checkpoint_path: str = ""
    embedding_path: str = ""
    out_dir: str = "out"
    # master seed
    seed: int = 2

    def validate(self) -> None:
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.probe_kind not in _PROBE_KINDS:
            raise ConfigError(f"probe_kind must be one of {_PROBE_KINDS}, got {self.probe_kind!r}")
        if self.head_activation not in _HEAD_ACTIVATIONS:
            raise ConfigError(
                f"head_activation must be one of {_HEAD_ACTIVATIONS}, got {self.head_activation!r}"
            )

    # -- views consumed by the pipeline stages --------------------------------

    def gen_config(self) -> GenConfig:
        return GenConfig(
            input_dim=self.input_dim,
            max_severity=self.max_severity,
            subjects_per_class=self.subjects_per_class,
            samples_per_subject=(self.samples_per_subject_min, self.samples_per_subject_max),
            severity_gap=self.severity_gap,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            train_frac=self.train_frac,
            val_frac=self.val_frac,
            test_frac=self.test_frac,
            seed=self.seed,
        )

    def model_dims(self) -> ModelDims:
        return ModelDims(
            input_dim=self.input_dim,
            encoder_hidden=self.encoder_hidden,
            embed_dim=self.embed_dim,
            project_dim=self.project_dim,
            head_activation=self.head_activation,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            dims=self.model_dims(),
            mode=self.mode,
            epochs_con=self.epochs_con,
            epochs_pro=self.epochs_pro,
            batch_size=self.batch_size,
            lr_encoder=self.lr_encoder,
            lr_heads=self.lr_heads,
            momentum=self.momentum,
            margin=self.margin,
            pairs_train=self.pairs_train,
            pairs_eval=self.pairs_eval,
            anchor=AnchorConfig(
                n_reference_vectors=self.anchor_n,
                resample_per_pair=self.anchor_resample_per_pair,
            ),
            anchor_stop_gradient=self.anchor_stop_gradient,
            seed=self.seed,
        )

    def probe_config(self) -> ProbeTrainConfig:
        return ProbeTrainConfig(
            kind=self.probe_kind,
            hidden_dim=self.probe_hidden,
            dropout=self.probe_dropout,
            epochs=self.probe_epochs,
            lr=self.probe_lr,
            batch_size=self.probe_batch_size,
            momentum=self.momentum,
            seed=self.seed,
        )

    def resolved(self) -> dict[str, str]:
        """Canonical string form of every key, for manifests."""
        out: dict[str, str] = {}
        for f in fields(self):
            out[f.name] = _format_value(getattr(self, f.name))
        return dict(sorted(out.items()))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(key: str, raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ConfigError(f"config key {key!r}: expected true or false, got {raw!r}")


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw, 10)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as an integer") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as a number") from None


def _parse_int_tuple(key: str, raw: str) -> tuple[int, ...]:
    if not raw:
        return ()
    try:
        return tuple(int(part.strip(), 10) for part in raw.split(","))
    except ValueError:
        raise ConfigError(
            f"config key {key!r}: cannot parse {raw!r} as comma-separated integers"
        ) from None


def _convert(key: str, raw: str, annotation: type) -> object:
    if annotation is bool:
        return _parse_bool(key, raw)
    if annotation is int:
        return _parse_int(key, raw)
    if annotation is float:
        return _parse_float(key, raw)
    if annotation is str:
        return raw
    return _parse_int_tuple(key, raw)


# dataclass field annotations are strings under deferred evaluation
_NAMED_TYPES = {"int": int, "float": float, "bool": bool, "str": str}

_FIELD_TYPES: dict[str, type] = {
    f.name: _NAMED_TYPES.get(str(f.type), tuple) for f in fields(RunConfig)
}


def parse_line(line: str) -> tuple[str, str] | None:
    """One `key = value` line; returns None for blanks and comments."""
    stripped = line.strip()
    if not stripped or stripped.startswith("#"):
        return None
    key, sep, value = stripped.partition("=")
    if not sep:
        raise ConfigError(f"malformed config line {line.rstrip()!r}: expected key = value")
    key = key.strip()
    value = value.strip()
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    return key, value


def parse_config(
    path: str | None = None,
    overrides: list[str] | None = None,
    env: dict[str, str] | None = None,
) -> RunConfig:
    """Resolve defaults < file < CONPRO_SEED < --set overrides."""
    raw: dict[str, str] = {}
    if path is not None:
        with open(path, "r") as fh:
            for line in fh:
                parsed = parse_line(line)
                if parsed is not None:
                    raw[parsed[0]] = parsed[1]
    env = os.environ if env is None else env
    if "CONPRO_SEED" in env:
        raw["seed"] = env["CONPRO_SEED"].strip()
    for item in overrides or []:
        parsed = parse_line(item)
        if parsed is None:
            raise ConfigError(f"empty --set override {item!r}")
        raw[parsed[0]] = parsed[1]

    cfg = RunConfig()
    for key, value in raw.items():
        setattr(cfg, key, _convert(key, value, _FIELD_TYPES[key]))
    cfg.validate()
    return cfg
