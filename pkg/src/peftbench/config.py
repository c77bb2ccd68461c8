"""Run configuration, named presets and canonical hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapters import ALL_LINEAR_TARGETS, DEFAULT_LORA_TARGETS
from .model import ModelConfig

METHODS = ("base", "prefix", "lora", "joint")
N_SPECIAL_SLOTS = 4  # BOS, SEP, SEP, EOS


class ConfigError(ValueError):
    pass


@dataclass
class PrefixConfig:
    pre_seq_len: int = 8
    d_prefix: int = 64
    mlp_hidden: int | None = None  # None -> 4 * d_prefix
    projection: bool = True
    learning_rate: float | None = None  # None -> train.learning_rate
    epochs: int | None = None


@dataclass
class LoraConfig:
    r: int = 8
    alpha: float = 32.0
    dropout: float = 0.05
    targets: list[str] = field(default_factory=lambda: list(DEFAULT_LORA_TARGETS))
    learning_rate: float | None = None
    epochs: int | None = None


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 4
    epochs: int = 20
    max_source_length: int = 96
    max_target_length: int = 128
    seed: int = 0


@dataclass
class DataConfig:
    dataset: str | None = None
    split_manifest: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    method: str = "lora"
    prefix: PrefixConfig | None = field(default_factory=PrefixConfig)
    lora: LoraConfig | None = field(default_factory=LoraConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    rouge_field: str = "f1"
    tokenize_mode: str = "word"

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method in ("prefix", "joint") and self.prefix is None:
            raise ConfigError(f"method={self.method} needs a prefix block")
        if self.method in ("lora", "joint") and self.lora is None:
            raise ConfigError(f"method={self.method} needs a lora block")
        if self.rouge_field not in ("f1", "recall", "precision"):
            raise ConfigError(f"rouge_field must be f1, recall or precision, got {self.rouge_field!r}")
        t = self.train
        if t.batch_size < 1 or t.epochs < 0 or t.learning_rate <= 0:
            raise ConfigError("train needs batch_size >= 1, epochs >= 0, learning_rate > 0")
        need = self.sequence_budget()
        if need > self.model.max_seq_len:
            raise ConfigError(
                f"max_source_length + max_target_length + {N_SPECIAL_SLOTS} specials + prefix = {need} "
                f"exceeds model.max_seq_len={self.model.max_seq_len}")
        return self

    def uses_prefix(self) -> bool:
        return self.method in ("prefix", "joint")

    def uses_lora(self) -> bool:
        return self.method in ("lora", "joint")

    def sequence_budget(self) -> int:
        plen = self.prefix.pre_seq_len if self.uses_prefix() else 0
        return self.train.max_source_length + self.train.max_target_length + N_SPECIAL_SLOTS + plen

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

        def sub(klass, key):
            if key not in d:
                return klass()
            if d[key] is None:
                return None
            allowed = {f.name for f in fields(klass)}
            bad = set(d[key]) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {', '.join(sorted(bad))}")
            return klass(**d[key])

        try:
            return cls(model=sub(ModelConfig, "model"), method=d.get("method", "lora"),
                       prefix=sub(PrefixConfig, "prefix"), lora=sub(LoraConfig, "lora"),
                       train=sub(TrainConfig, "train"), data=sub(DataConfig, "data"),
                       output_dir=d.get("output_dir", "runs/default"),
                       rouge_field=d.get("rouge_field", "f1"),
                       tokenize_mode=d.get("tokenize_mode", "word"))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical JSON, minus fields that do not affect results."""
    d = cfg.to_dict()
    d.pop("output_dir", None)
    d.pop("data", None)
    return hashlib.sha256(canonical(d).encode("utf-8")).hexdigest()[:16]


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# Hyperparameters for the ChatGLM2-6B setup.  At toy scale they only keep
# the large-model settings expressible; they do not reach large-model scores.
PRESETS: dict[str, dict] = {
    "glm-prefix": {
        "prefix": {"pre_seq_len": 128, "learning_rate": 2e-2, "epochs": 5},
        "train": {"batch_size": 16, "max_source_length": 128, "max_target_length": 256},
    },
    "glm-lora": {
        "lora": {"r": 8, "alpha": 32.0, "dropout": 0.05, "learning_rate": 1e-4, "epochs": 10},
        "train": {"batch_size": 16, "max_source_length": 128, "max_target_length": 256},
    },
}
PRESETS["glm-joint"] = {
    "method": "joint",
    "prefix": PRESETS["glm-prefix"]["prefix"],
    "lora": PRESETS["glm-lora"]["lora"],
    "train": PRESETS["glm-lora"]["train"],
}

# Memorization settings for the 32-record toy set: a gentle prefix stage (a
# hot one saturates attention onto the virtual tokens), then LoRA on every
# linear layer without dropout.
PRESETS["toy-overfit"] = {
    "prefix": {"learning_rate": 1e-3, "epochs": 50},
    "lora": {"targets": list(ALL_LINEAR_TARGETS), "dropout": 0.0, "learning_rate": 3e-3, "epochs": 150},
    "train": {"learning_rate": 3e-3, "batch_size": 4, "epochs": 200},
}


def apply_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    d = cfg.to_dict()
    for key, val in PRESETS[name].items():
        if isinstance(val, dict):
            d[key] = {**(d.get(key) or {}), **val}
        else:
            d[key] = val
    out = RunConfig.from_dict(d)
    # grow the context window so the long source and target lengths fit
    plen = out.prefix.pre_seq_len if out.prefix is not None else 0
    need = out.train.max_source_length + out.train.max_target_length + N_SPECIAL_SLOTS + plen
    if need > out.model.max_seq_len:
        out.model = ModelConfig(**{**out.model.to_dict(), "max_seq_len": need})
    return out
