"""Run configuration: defaults, key=value config files, flag overrides,
and shared-key resolution.

Precedence, lowest to highest: built-in defaults, config file, command
line flags. Every run echoes the fully resolved result so there is
never a question about what actually ran.
"""

from __future__ import annotations

import os
import secrets
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError
from .presets import PRESETS

KEY_ENV_VAR = "VFSEG_KEY"

_ROLES = ("bottom", "top", "both")
_TRANSPORTS = ("loopback", "tcp")
_OPTIMIZERS = ("sgd", "adam")
_WIRE_FLOATS = ("f64", "f32")


@dataclass
class PartyConfig:
    """Everything one party needs to run. Defaults train the tiny
    preset in-process."""

    role: str = "both"
    preset: str = "tiny"
    data_dir: str = "data"
    out_dir: str = "out"
    batch_size: int = 8
    epochs: int = 100
    optimizer: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    transport: str = "loopback"
    host: str = "127.0.0.1"
    port: int = 7341
    wire_float: str = "f64"
    resume: bool = False
    timeout: float = 120.0
    key_file: str = ""

    def validate(self) -> "PartyConfig":
        def expect(value, options, name):
            if value not in options:
                raise ConfigurationError(
                    f"{name} must be one of {', '.join(options)}; got {value!r}")

        expect(self.role, _ROLES, "role")
        expect(self.transport, _TRANSPORTS, "transport")
        expect(self.optimizer, _OPTIMIZERS, "optimizer")
        expect(self.wire_float, _WIRE_FLOATS, "wire_float")
        if self.preset not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {self.preset!r} (have {', '.join(sorted(PRESETS))})")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if PRESETS[self.preset].batch_norm and self.batch_size < 2:
            raise ConfigurationError(
                "batch_size must be >= 2 when the preset uses batch norm")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0.0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        if not 0 < self.port < 65536:
            raise ConfigurationError(f"port must be in 1..65535, got {self.port}")
        if self.timeout <= 0.0:
            raise ConfigurationError(f"timeout must be positive, got {self.timeout}")
        if self.role in ("bottom", "top") and self.transport != "tcp":
            raise ConfigurationError(
                f"role {self.role} runs as a separate process and needs transport=tcp")
        return self

    # Derived paths. Each party writes only under its own out_dir.
    @property
    def bottom_checkpoint(self) -> Path:
        return Path(self.out_dir) / "bottom.ckpt"

    @property
    def top_checkpoint(self) -> Path:
        return Path(self.out_dir) / "top.ckpt"

    @property
    def metrics_path(self) -> Path:
        return Path(self.out_dir) / "metrics.jsonl"

    @property
    def images_dir(self) -> Path:
        return Path(self.data_dir) / "images"

    @property
    def labels_dir(self) -> Path:
        return Path(self.data_dir) / "labels"

    def echo(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """key = value lines; # starts a comment; blank lines ignored."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigurationError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _coerce(name: str, kind: type, raw: str):
    try:
        if kind is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        return kind(raw)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name}: {exc}") from exc


def build_config(file_path: str | Path | None = None,
                 overrides: dict | None = None) -> PartyConfig:
    """Merge defaults, the config file, and explicit overrides in that
    order, then validate."""
    cfg = PartyConfig()
    known = {f.name: f.type for f in fields(cfg)}
    types = {"role": str, "preset": str, "data_dir": str, "out_dir": str,
             "batch_size": int, "epochs": int, "optimizer": str, "lr": float,
             "momentum": float, "seed": int, "transport": str, "host": str,
             "port": int, "wire_float": str, "resume": bool, "timeout": float,
             "key_file": str}
    if file_path is not None:
        for key, raw in parse_config_file(file_path).items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, types[key], raw))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()


def _key_from_hex(text: str, source: str) -> bytes:
    cleaned = "".join(text.split())
    try:
        key = bytes.fromhex(cleaned)
    except ValueError as exc:
        raise ConfigurationError(f"{source} is not valid hex") from exc
    if len(key) != 32:
        raise ConfigurationError(f"{source} must be 32 bytes (64 hex chars), got {len(key)}")
    return key


def resolve_key(cfg: PartyConfig) -> bytes:
    """Shared-key lookup: environment first, then key file.

    Loopback runs never cross a process boundary, so they get a fresh
    random key when none is configured; TCP runs must configure one.
    """
    env = os.environ.get(KEY_ENV_VAR)
    if env:
        return _key_from_hex(env, f"{KEY_ENV_VAR} environment variable")
    if cfg.key_file:
        try:
            text = Path(cfg.key_file).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read key file {cfg.key_file}: {exc}") from exc
        return _key_from_hex(text, f"key file {cfg.key_file}")
    if cfg.transport == "loopback":
        return secrets.token_bytes(32)
    raise ConfigurationError(
        f"tcp transport needs a shared key: set {KEY_ENV_VAR} or key_file")
