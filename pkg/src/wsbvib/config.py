"""Run configuration and the flat key=value config file format.

One config file can drive the whole pipeline: keys are namespaced by
section (cohort.*, model.*, loss.*, train.*) and map one-to-one onto the
dataclass fields of CohortConfig, NetworkConfig, LossConfig, and the
trainer settings below. Unknown sections or keys are hard errors so typos
cannot silently fall back to defaults. The WSBVIB_SEED environment
variable overrides both the cohort seed and the training seed.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .errors import ConfigError, MissingFileError
from .losses import LossConfig
from .network import NetworkConfig
from .synth import CohortConfig

MODES = ("vib", "bvib")
SUPERVISIONS = ("pdm", "cloud")

SEED_ENV_VAR = "WSBVIB_SEED"


@dataclass(frozen=True)
class RunConfig:
    manifest: str = ""
    out_dir: str = "run"
    model: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 1e-4
    batch_size: int = 8
    patience: int = 50
    max_epochs: int = 300
    augment_ceiling: float = 0.01
    seed: int = 0
    mode: str = "bvib"
    supervision: str = "cloud"
    infer_latent_samples: int = 8
    infer_mask_samples: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 <= self.augment_ceiling <= 0.05:
            raise ConfigError(
                f"augment_ceiling must lie in [0, 0.05], got {self.augment_ceiling}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.supervision not in SUPERVISIONS:
            raise ConfigError(
                f"supervision must be one of {SUPERVISIONS}, got {self.supervision!r}")
        if self.infer_latent_samples < 2:
            raise ConfigError("infer_latent_samples must be >= 2")
        if self.infer_mask_samples < 1:
            raise ConfigError("infer_mask_samples must be >= 1")

    def network_config(self) -> NetworkConfig:
        """Model config with the weight-uncertainty flag tied to the mode."""
        return dataclasses.replace(self.model, bayesian=self.mode == "bvib")

    def as_flat_dict(self) -> dict:
        out = {}
        for section, obj in (("model", self.model), ("loss", self.loss)):
            for f in dataclasses.fields(obj):
                out[f"{section}.{f.name}"] = getattr(obj, f.name)
        for f in dataclasses.fields(self):
            if f.name in ("model", "loss"):
                continue
            out[f"train.{f.name}"] = getattr(self, f.name)
        return out


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)
                 if f.name not in ("model", "loss")}
_SECTION_FIELDS = {
    "cohort": {f.name: f for f in dataclasses.fields(CohortConfig)},
    "model": {f.name: f for f in dataclasses.fields(NetworkConfig)},
    "loss": {f.name: f for f in dataclasses.fields(LossConfig)},
    "train": _TRAIN_FIELDS,
}


def _coerce(raw: str, f: dataclasses.Field, where: str):
    text = raw.strip()
    tp = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if tp == "int":
            return int(text)
        if tp == "float":
            return float(text)
        if tp == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if tp == "str":
            return text
        if tp.startswith("tuple"):
            parts = [p for p in text.replace(",", " ").split() if p]
            if "float" in tp:
                return tuple(float(p) for p in parts)
            if "int" in tp:
                return tuple(int(p) for p in parts)
            return tuple(float(p) if ("." in p or "e" in p.lower()) else int(p)
                         for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}")
    raise ConfigError(f"{where}: unsupported field type {tp!r}")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat config -> {section: {field: value}} with full key validation."""
    sections: dict = {name: {} for name in _SECTION_FIELDS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"{where}: key {key!r} is missing a section prefix")
        section, name = key.split(".", 1)
        fields = _SECTION_FIELDS.get(section)
        if fields is None:
            raise ConfigError(f"{where}: unknown section {section!r}")
        if name not in fields:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if name in sections[section]:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        sections[section][name] = _coerce(raw, fields[name], where)
    return sections


def _read_config_file(path: str) -> dict:
    try:
        with open(path) as f:
            text = f.read()
    except FileNotFoundError:
        raise MissingFileError(f"config file not found: {path}")
    return parse_config_text(text, source=path)


def _seed_override(value: int) -> int:
    env = os.environ.get(SEED_ENV_VAR)
    if env is None:
        return value
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")


def load_cohort_config(path: str) -> CohortConfig:
    sections = _read_config_file(path)
    values = dict(sections["cohort"])
    values["seed"] = _seed_override(values.get("seed", CohortConfig.seed))
    return CohortConfig(**values)


def load_run_config(path: str) -> RunConfig:
    sections = _read_config_file(path)
    train = dict(sections["train"])
    if not train.get("manifest"):
        raise ConfigError(f"{path}: train.manifest is required")
    train["seed"] = _seed_override(train.get("seed", RunConfig.seed))
    return RunConfig(model=NetworkConfig(**sections["model"]),
                     loss=LossConfig(**sections["loss"]), **train)


def write_config(path: str, sections: dict) -> None:
    """Inverse of parse_config_text for {section: {field: value}} dicts."""
    lines = []
    for section in sorted(sections):
        for name in sorted(sections[section]):
            value = sections[section][name]
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{section}.{name}={value}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
