"""Protection configuration: defaults, INI files and the config digest."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields

from masque.errors import ConfigError
from masque.guidance import AUGMENTATIONS, AdvConfig


@dataclass(frozen=True)
class ProtectionConfig:
    # diffusion
    T: int = 50
    guidance_scale: float = 7.5
    # attention injection / edit-loss / adversarial horizons
    tau_attn: int = 40
    tau_edit: int = 5
    tau_adv: int = 45
    m_adv: int = 15
    lambda_cosi: float = 0.1
    lambda_lpips: float = 1.0
    G: int = 1
    seed: int = 0
    # choices the method leaves open
    augmentation: str = "none"
    max_shift: int = 20
    adv_step: float = 2.0
    edit_step: float = 0.5
    edit_iters: int = 5
    inversion_steps: int = 10
    inversion_lr: float = 0.03
    min_area: int = 4
    source_prompt: str = "a face"
    perceptual: str = "random-conv"
    # paths
    diffusion_checkpoint: str = ""
    embedder_checkpoint: str = ""

    PATH_KEYS = ("diffusion_checkpoint", "embedder_checkpoint")

    def __post_init__(self):
        if not 0 <= self.tau_edit <= self.tau_attn <= self.T:
            raise ConfigError(f"need 0 <= tau_edit <= tau_attn <= T, got {self.tau_edit}, {self.tau_attn}, {self.T}")
        if not 0 <= self.tau_adv <= self.T:
            raise ConfigError(f"need 0 <= tau_adv <= T, got {self.tau_adv}")
        if self.T < 1:
            raise ConfigError("T must be positive")
        for name in ("m_adv", "G", "edit_iters", "inversion_steps", "min_area", "max_shift"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {AUGMENTATIONS}, got {self.augmentation!r}")

    @property
    def adv(self) -> AdvConfig:
        return AdvConfig(self.lambda_cosi, self.lambda_lpips, self.tau_adv, self.m_adv, self.adv_step)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """sha256 over the canonical JSON of every field except file paths."""
        d = {k: v for k, v in self.to_dict().items() if k not in self.PATH_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def replace(self, **changes) -> "ProtectionConfig":
        return dataclasses.replace(self, **changes)

    # INI ------------------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["protection"] = {k: str(v) for k, v in self.to_dict().items() if k not in self.PATH_KEYS}
        cp["paths"] = {k: getattr(self, k) for k in self.PATH_KEYS}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, overrides: dict | None = None, required=()) -> "ProtectionConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}") from e
        raw = {}
        for section in cp.sections():
            if section not in ("protection", "paths"):
                raise ConfigError(f"unknown config section [{section}]")
            raw.update(cp[section])
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(raw, required)

    @classmethod
    def from_mapping(cls, raw: dict, required=()) -> "ProtectionConfig":
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        values = {}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, value, type(getattr(defaults, key)))
        for key in required:
            if key not in values or values[key] == "":
                raise ConfigError(f"missing config key {key!r}")
        return cls(**values)

    @classmethod
    def load(cls, path, overrides: dict | None = None, required=()) -> "ProtectionConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} not found")
        with open(path) as f:
            return cls.from_ini(f.read(), overrides, required)

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            f.write(self.to_ini())
        os.replace(tmp, path)


def _coerce(key, value, kind):
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {text!r} as {kind.__name__}") from None
    return text
