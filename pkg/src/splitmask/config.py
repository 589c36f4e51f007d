"""Run configuration: nested dataclasses <-> YAML, dotted overrides, content hashing.

A config file is a YAML mapping whose top-level sections mirror
:class:`RunConfig`.  Unknown keys are rejected at every level, and
``key.sub=value`` overrides are applied after the file is parsed (values are
parsed as YAML scalars, so ``loss.w_nce=0`` gives an int and
``masking.kind=uniform`` a string).
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import ModelConfig

__all__ = [
    "DataSpec",
    "TokenizerSpec",
    "MaskingSpec",
    "LossSpec",
    "OptimSpec",
    "ScheduleSpec",
    "FinetuneSpec",
    "ProbeSpec",
    "SweepSpec",
    "RunConfig",
    "load_config",
    "save_config",
    "apply_overrides",
    "config_hash",
]


@dataclass
class DataSpec:
    source: str = "synth"  # synth | folder
    path: str | None = None
    train_manifest: str = "train.tsv"
    test_manifest: str = "test.tsv"
    num_classes: int | None = None
    synth_seed: int = 0
    n_train: int = 512
    n_test: int = 512
    synth_classes: int = 4
    fraction: float = 1.0
    fraction_seed: int = 0


@dataclass
class TokenizerSpec:
    kind: str = "kmeans"  # random_projection | random_patches | kmeans
    path: str | None = None  # prebuilt vocabulary file; built in-run when absent
    sample_budget: int = 200_000
    iters: int = 25
    center: bool = False
    seed: int = 0


@dataclass
class MaskingSpec:
    kind: str = "block"  # block | uniform
    ratio: float = 0.5
    min_block: int | None = None  # None: rescaled from 16/196 of the grid
    max_block: int | None = None  # None: rescaled from 75/196 of the grid


@dataclass
class LossSpec:
    w_mim: float = 1.0
    w_nce: float = 1.0
    tau: float = 0.2


@dataclass
class OptimSpec:
    base_lr: float = 1.5e-3  # peak learning rate at batch 256; scaled linearly with batch size
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_grad: float | None = 3.0


@dataclass
class ScheduleSpec:
    epochs: int | None = None  # None: derived by the epoch-budget rule
    reference_size: int = 512
    reference_epochs: int = 300
    cap: int | None = 5000
    round_to: int = 1  # 1000 mimics the coarse rounding of published epoch counts
    preset: str | None = None  # a published dataset name; overrides the rule
    warmup_frac: float = 0.05
    warmup_steps: int | None = None
    floor: float = 1e-6
    max_steps: int | None = None  # hard stop, for smoke runs


@dataclass
class FinetuneSpec:
    checkpoint: str | None = None  # None: random initialisation
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 2e-3
    weight_decay: float = 0.05
    layer_decay: float = 0.65  # per-layer learning-rate multiplier; 1 disables
    warmup_frac: float = 0.05
    floor: float = 1e-6
    augment: str = "none"  # random crops at 32 px cost several points of test accuracy
    label_smoothing: float = 0.0
    mixup: float = 0.0  # Beta(alpha, alpha) mixing; 0 disables
    cutmix: float = 0.0
    clip_grad: float | None = 3.0


@dataclass
class ProbeSpec:
    checkpoint: str | None = None
    layers: list[int] | str = "all"
    epochs: int = 200
    base_lr: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 256


@dataclass
class SweepSpec:
    grid: dict = field(default_factory=dict)  # dotted key -> list of values
    evaluate: str = "finetune"  # finetune | probe
    probe_layer: int | None = None  # None: last encoder layer


@dataclass
class RunConfig:
    mode: str = "pretrain"  # pretrain | finetune | probe | sweep
    seed: int = 0
    tag: str = "run"
    batch_size: int = 64
    augment: str = "basic"  # basic | small_data | none
    checkpoint_every: int = 0  # 0: final checkpoint only
    log_throughput: bool = False  # throughput in metrics.csv breaks bit-identical reruns
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSpec = field(default_factory=DataSpec)
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)
    masking: MaskingSpec = field(default_factory=MaskingSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    finetune: FinetuneSpec = field(default_factory=FinetuneSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("pretrain", "finetune", "probe", "sweep"):
            raise ConfigError(f"mode: unknown run mode {self.mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be positive")
        if self.augment not in ("basic", "small_data", "none"):
            raise ConfigError(f"augment: unknown policy {self.augment!r}")
        if self.masking.kind not in ("block", "uniform"):
            raise ConfigError(f"masking.kind: unknown kind {self.masking.kind!r}")
        if not 0 < self.masking.ratio < 1:
            raise ConfigError("masking.ratio: must lie in (0, 1)")
        if self.tokenizer.kind not in ("random_projection", "random_patches", "kmeans"):
            raise ConfigError(f"tokenizer.kind: unknown kind {self.tokenizer.kind!r}")
        lw = self.loss
        if lw.w_mim < 0 or lw.w_nce < 0 or lw.w_mim == 0 and lw.w_nce == 0:
            raise ConfigError("loss: weights must be >= 0 and not both zero")
        if lw.tau <= 0:
            raise ConfigError("loss.tau: must be positive")
        s = self.schedule
        if s.warmup_steps is not None and s.warmup_steps < 0:
            raise ConfigError("schedule.warmup_steps: must be >= 0")
        if self.data.source not in ("synth", "folder"):
            raise ConfigError(f"data.source: unknown source {self.data.source!r}")
        if not 0 < self.finetune.layer_decay <= 1:
            raise ConfigError("finetune.layer_decay: must lie in (0, 1]")
        if self.sweep.evaluate not in ("finetune", "probe"):
            raise ConfigError(f"sweep.evaluate: unknown evaluation {self.sweep.evaluate!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {}, "")


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(d).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key: {where}{unknown[0]}")
    kwargs = {}
    for name, value in d.items():
        f = known[name]
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value or {}, f"{where}{name}.")
        else:
            kwargs[name] = _coerce(value, f, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {e}") from None


def _coerce(value, f, where: str):
    # YAML 1.1 reads "8e-3" as a string; accept it for float-typed fields
    if isinstance(value, str) and "float" in str(f.type):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{where}{f.name}: expected a number, got {value!r}") from None
    return value


_SECTIONS = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "data"): DataSpec,
    (RunConfig, "tokenizer"): TokenizerSpec,
    (RunConfig, "masking"): MaskingSpec,
    (RunConfig, "loss"): LossSpec,
    (RunConfig, "optim"): OptimSpec,
    (RunConfig, "schedule"): ScheduleSpec,
    (RunConfig, "finetune"): FinetuneSpec,
    (RunConfig, "probe"): ProbeSpec,
    (RunConfig, "sweep"): SweepSpec,
}


def _set_dotted(tree: dict, key: str, value, defaults: dict) -> None:
    parts = key.split(".")
    node, ref = tree, defaults
    for i, part in enumerate(parts):
        if not isinstance(ref, dict) or part not in ref:
            raise ConfigError(f"unknown config key: {key}")
        if i == len(parts) - 1:
            node[part] = value
            return
        # free-form mappings (e.g. sweep.grid) take the rest of the dotted key as one sub-key
        if isinstance(ref[part], dict) and not ref[part]:
            node.setdefault(part, {})[".".join(parts[i + 1 :])] = value
            return
        node = node.setdefault(part, {})
        if node is None:
            node = {}
        ref = ref[part]


def apply_overrides(tree: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings (or ``(key, value)`` pairs) to a raw config mapping."""
    tree = copy.deepcopy(tree or {})
    defaults = RunConfig().to_dict()
    for item in overrides or ():
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            value = yaml.safe_load(raw) if raw.strip() else None
        else:
            key, value = item
        _set_dotted(tree, key.strip(), value, defaults)
    return tree


def load_config(path=None, overrides=()) -> RunConfig:
    tree = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
    return RunConfig.from_dict(apply_overrides(tree, overrides))


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    return path


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
