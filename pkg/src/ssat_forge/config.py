"""Experiment specification: strict parsing of TOML/JSON files plus flag overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .diag import DiagnosticsConfig
from .ssat import DecoderConfig
from .train import TrainConfig
from .vit import EncoderConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class SpecError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class EncoderSection(_Strict):
    image_size: int = Field(32, ge=1)
    patch_size: int = Field(4, ge=1)
    channels: int = Field(3, ge=1)
    dim: int = Field(64, ge=1)
    depth: int = Field(4, ge=0)
    heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    use_class_token: bool = True


class DecoderSection(_Strict):
    dim: int = Field(128, ge=1)
    depth: int = Field(2, ge=0)
    heads: int = Field(16, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)


class ModelSection(_Strict):
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    decoder: DecoderSection = Field(default_factory=DecoderSection)


class TrainSection(_Strict):
    mode: Literal["scratch", "ssl_pretrain", "finetune", "ssat"] = "ssat"
    epochs: int = Field(100, ge=1)
    warmup_epochs: int = Field(5, ge=0)
    base_lr: float = Field(1e-3, gt=0)
    warmup_lr: float = Field(1e-6, gt=0)
    min_lr: float = Field(1e-6, gt=0)
    weight_decay: float = Field(0.05, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    opt_eps: float = Field(1e-8, gt=0)
    layer_decay: float = Field(0.75, gt=0, le=1)
    lam: float = Field(0.1, ge=0, le=1)
    mask_ratio: float = Field(0.75, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    label_smoothing: float = Field(0.1, ge=0, lt=1)
    mixup: bool = True
    mixup_alpha: float = Field(0.8, gt=0)
    drop_path: float = Field(0.01, ge=0, lt=1)
    precision: Literal[32, 64] = 32
    eval_every: int = Field(1, ge=1)
    sslft_protocol: Literal["sslft-1", "sslft-2", "sslft-3", "sslft-4"] = "sslft-4"
    init_from: Optional[str] = None


class AugmentSection(_Strict):
    enabled: bool = True
    crop_scale: tuple[float, float] = (0.08, 1.0)
    erase_p: float = Field(0.25, ge=0, le=1)
    rand_n: int = Field(2, ge=0)


class DataSection(_Strict):
    source: Literal["synthetic", "cifar10", "cifar100", "raw"] = "synthetic"
    train_path: Optional[list[str]] = None
    test_path: Optional[list[str]] = None
    classes: int = Field(3, ge=2)
    per_class: int = Field(200, ge=1)
    test_per_class: int = Field(100, ge=1)
    image_size: int = Field(32, ge=8)
    synthetic_seed: int = 0
    tint: float = Field(0.5, ge=0, le=1)
    noise: float = Field(0.15, ge=0)
    train_fraction: float = Field(1.0, gt=0, le=1)
    augment: AugmentSection = Field(default_factory=AugmentSection)


class DiagnosticsSection(_Strict):
    analyses: tuple[Literal["attention", "distance", "variance", "spectrum"], ...] = (
        "attention",
        "distance",
        "variance",
        "spectrum",
    )
    slice_size: int = Field(64, ge=1)
    batch_size: int = Field(32, ge=1)
    top_k: int = Field(5, ge=1)
    iterations: int = Field(20, ge=1)
    fd_eps: float = Field(1e-4, gt=0)
    loss: Literal["cls", "total"] = "cls"


class ExperimentSpec(_Strict):
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    data: DataSection = Field(default_factory=DataSection)
    diagnostics: DiagnosticsSection = Field(default_factory=DiagnosticsSection)
    output: str = "runs/default"
    seed: int = 0

    @model_validator(mode="after")
    def _module_invariants(self):
        try:
            self.encoder_config()
            self.decoder_config()
            self.train_config()
        except ValueError as exc:
            raise ValueError(f"inconsistent spec: {exc}") from None
        if self.train.warmup_epochs > self.train.epochs:
            raise ValueError("train.warmup_epochs exceeds train.epochs")
        if self.data.source != "synthetic" and not self.data.train_path:
            raise ValueError(f"data.train_path is required for source {self.data.source!r}")
        return self

    # -- module configs
    def encoder_config(self, num_classes: int | None = None) -> EncoderConfig:
        e = self.model.encoder
        if e.dim % e.heads:
            raise ValueError(f"model.encoder.dim {e.dim} not divisible by heads {e.heads}")
        if e.image_size % e.patch_size:
            raise ValueError(f"model.encoder.image_size {e.image_size} not divisible by patch_size {e.patch_size}")
        return EncoderConfig(
            image_size=e.image_size,
            patch_size=e.patch_size,
            channels=e.channels,
            dim=e.dim,
            depth=e.depth,
            heads=e.heads,
            num_classes=num_classes or self.data.classes,
            mlp_ratio=e.mlp_ratio,
            use_class_token=e.use_class_token,
            drop_path=self.train.drop_path,
        )

    def decoder_config(self) -> DecoderConfig:
        d = self.model.decoder
        if d.dim % d.heads:
            raise ValueError(f"model.decoder.dim {d.dim} not divisible by heads {d.heads}")
        return DecoderConfig(dim=d.dim, depth=d.depth, heads=d.heads, mlp_ratio=d.mlp_ratio)

    def train_config(self, **overrides) -> TrainConfig:
        fields = self.train.model_dump(exclude={"sslft_protocol", "init_from"})
        fields.update(seed=self.seed, **overrides)
        return TrainConfig(**fields)

    def diagnostics_config(self) -> DiagnosticsConfig:
        d = self.diagnostics
        return DiagnosticsConfig(
            slice_size=d.slice_size,
            batch_size=d.batch_size,
            analyses=tuple(d.analyses),
            top_k=d.top_k,
            iterations=d.iterations,
            seed=self.seed,
            fd_eps=d.fd_eps,
            loss=d.loss,
        )

    def canonical(self) -> dict:
        return json.loads(self.model_dump_json())

    @property
    def digest(self) -> str:
        # where results go is not part of the experiment
        doc = {k: v for k, v in self.canonical().items() if k != "output"}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# flag name -> dotted spec path
FLAG_PATHS = {
    "seed": "seed",
    "lam": "train.lam",
    "mask_ratio": "train.mask_ratio",
    "mode": "train.mode",
    "epochs": "train.epochs",
    "out": "output",
}


def _read_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpecError(f"{path}: {exc.strerror}") from None
    if not text.strip():
        return {}
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: {exc}") from None
    else:
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise SpecError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise SpecError(f"{path}: top level must be a table")
    return doc


def _set_path(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise SpecError(f"cannot override {dotted}: {key} is not a table")
    node[keys[-1]] = value


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<spec>"
        if err["type"] == "extra_forbidden":
            lines.append(f"{where}: unknown key")
        else:
            lines.append(f"{where}: {err['msg']}")
    return "; ".join(lines)


def parse_spec(path=None, overrides: dict | None = None, base: dict | None = None) -> ExperimentSpec:
    """Resolve defaults, then the file at ``path``, then ``overrides``.

    ``overrides`` maps flag names (see ``FLAG_PATHS``) or dotted paths to values;
    ``None`` values are ignored.
    """
    doc = copy.deepcopy(base) if base else {}
    if path is not None:
        doc = _merge(doc, _read_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_path(doc, FLAG_PATHS.get(key, key), value)
    try:
        return ExperimentSpec.model_validate(doc)
    except ValidationError as exc:
        raise SpecError(_format_errors(exc)) from None


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for key, value in b.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out
