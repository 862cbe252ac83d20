"""Run configuration loaded from YAML/JSON plus ``key=value`` overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .coattention import HeadConfig
from .encoder import EncoderConfig
from .pretrain import CodebookConfig, ContinuousTargetConfig

MODES = ("pretrain", "probe", "search", "derive_train", "eval")
OBJECTIVES = ("quantized", "continuous")


class ConfigError(ValueError):
    pass


def _tiny_encoder() -> dict:
    return EncoderConfig.tiny().to_dict()


def _coerce(key: str, value, default):
    # YAML 1.1 reads "1e-4" as a string; numeric fields accept it anyway
    if isinstance(default, bool) or not isinstance(default, (int, float)) or not isinstance(value, str):
        return value
    try:
        return type(default)(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from exc


@dataclass
class RunConfig:
    manifest: str = ""
    out_dir: str = "runs"
    seed: int = 0
    mode: str = "pretrain"
    deterministic: bool = True

    encoder: dict = field(default_factory=_tiny_encoder)

    # pretraining
    objective: str = "continuous"
    n_books: int = 2
    n_words: int = 8
    n_negatives: int = 10
    diversity_weight: float = 0.1
    n_target_layers: int = 1
    ema_decay: float = 0.999
    normalize_targets: bool = True
    pretrain_epochs: int = 10
    ctc_epochs: int = 0
    ctc_lr: float = 1e-3
    checkpoint: str = ""
    probe: bool = False
    probe_lr: float = 1e-3
    probe_folds: list[int] | None = field(default_factory=lambda: [0])

    # search / derive
    base_checkpoint: str = ""
    asr_checkpoint: str = ""
    cv_strategy: str = "leave_one_session"
    folds: list[int] | None = None
    val_fraction: float = 0.2
    search_epochs: int = 10
    level_eval_epochs: int = 3
    derive_epochs: int = 10
    strategy_file: str = ""

    # optimisation
    lr: float = 1e-5
    pretrain_lr: float = 1e-5
    alpha_lr: float = 5.0
    weight_decay: float = 0.01
    batch_size: int = 8

    # head
    n_guides: int = 4
    mlp_hidden: list[int] = field(default_factory=lambda: [256])
    head_dropout: float = 0.1
    attn_heads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    # -- derived configs -----------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.encoder)

    def codebook_config(self) -> CodebookConfig:
        return CodebookConfig(
            n_books=self.n_books, n_words=self.n_words, n_negatives=self.n_negatives,
            diversity_weight=self.diversity_weight,
        )

    def continuous_config(self) -> ContinuousTargetConfig:
        return ContinuousTargetConfig(self.n_target_layers, self.ema_decay, self.normalize_targets)

    def head_config(self, n_frames: int, with_vad: bool = False) -> HeadConfig:
        return HeadConfig(
            n_guides=self.n_guides, n_frames=n_frames, model_dim=self.encoder_config().model_dim,
            mlp_hidden=list(self.mlp_hidden), with_vad_head=with_vad,
            dropout=0.0 if self.deterministic else self.head_dropout,
        )

    def path(self, *parts) -> Path:
        return Path(self.out_dir, *parts)

    def to_dict(self) -> dict:
        return asdict(self)

    # -- loading -------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        enc = dict(_tiny_encoder())
        enc.update(d.get("encoder") or {})
        d = dict(d, encoder=enc)
        defaults = cls()
        for key, value in d.items():
            d[key] = _coerce(key, value, getattr(defaults, key))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] = (), **kw) -> "RunConfig":
        d: dict = {}
        if path:
            with open(path, encoding="utf-8") as fh:
                d = yaml.safe_load(fh) or {}
            if not isinstance(d, dict):
                raise ConfigError(f"{path}: config must be a mapping")
        d.update({k: v for k, v in kw.items() if v is not None})
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            value = yaml.safe_load(raw)
            if "." in key:
                outer, inner = key.split(".", 1)
                d.setdefault(outer, {})[inner] = value
            else:
                d[key] = value
        return cls.from_dict(d)
