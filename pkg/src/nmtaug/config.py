"""Flat ``section.key = value`` experiment configuration."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import ConfigError
from .model import TransformerConfig
from .trainer import DaConfig, OptimConfig

_OPT_INT = "int?"
_OPT_STR = "str?"

# key -> (type, default)
SCHEMA: dict[str, tuple[Any, Any]] = {
    "seed": (int, 0),
    "data.dir": (_OPT_STR, None),
    "data.train_src": (_OPT_STR, None),
    "data.train_tgt": (_OPT_STR, None),
    "data.valid_src": (_OPT_STR, None),
    "data.valid_tgt": (_OPT_STR, None),
    "data.test_src": (_OPT_STR, None),
    "data.test_tgt": (_OPT_STR, None),
    "bpe.num_merges": (int, 8000),
    "bpe.min_freq": (int, 1),
    "nmt.layers": (int, 2),
    "nmt.d_model": (int, 64),
    "nmt.d_ff": (int, 128),
    "nmt.heads": (int, 2),
    "nmt.dropout": (float, 0.1),
    "nmt.max_len": (int, 128),
    "cmlm.layers": (int, 2),
    "cmlm.d_model": (int, 64),
    "cmlm.d_ff": (int, 128),
    "cmlm.heads": (int, 2),
    "cmlm.dropout": (float, 0.1),
    "cmlm.max_len": (int, 256),
    "cmlm.mode": (str, "both"),
    "cmlm.eta": (float, 1e-3),
    "cmlm.steps": (int, 1500),
    "cmlm.batch_size": (int, 64),
    "cmlm.mask_rate": (float, 0.15),
    "da.mode": (str, "none"),
    "da.gamma": (float, 0.25),
    "da.p": (float, 0.1),
    "da.k": (int, 3),
    "da.augment_encoder": (bool, True),
    "da.augment_decoder": (bool, False),
    "da.cmlm_src": (_OPT_STR, None),
    "da.cmlm_tgt": (_OPT_STR, None),
    "da.hard_strategy": (str, "sample"),
    "optim.lr_factor": (float, 1.0),
    "optim.warmup": (int, 4000),
    "optim.beta1": (float, 0.9),
    "optim.beta2": (float, 0.98),
    "optim.eps": (float, 1e-9),
    "optim.label_smoothing": (float, 0.1),
    "optim.max_tokens": (int, 4096),
    "optim.max_sentences": (_OPT_INT, None),
    "optim.checkpoint_every": (int, 0),
    "optim.validate_every": (int, 0),
    "optim.decode_max_len": (int, 64),
    "train.epochs": (int, 10),
    "train.precision": (str, "float32"),
    "eval.beam": (int, 4),
    "eval.max_len": (int, 64),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str) -> Any:
    kind = SCHEMA[key][0]
    text = raw.strip()
    if kind in (_OPT_INT, _OPT_STR) and text.lower() in ("", "none"):
        return None
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind in (int, _OPT_INT):
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    @classmethod
    def from_lines(cls, lines: Iterable[str], source: str = "<config>") -> "ExperimentConfig":
        cfg = cls()
        unknown, malformed = [], []
        for n, line in enumerate(lines, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            key, sep, value = text.partition("=")
            key = key.strip()
            if not sep:
                malformed.append(f"line {n}")
            elif key not in SCHEMA:
                unknown.append(key)
            else:
                cfg.values[key] = _convert(key, value)
        if unknown or malformed:
            parts = []
            if unknown:
                parts.append("unknown keys: " + ", ".join(sorted(unknown)))
            if malformed:
                parts.append("malformed entries: " + ", ".join(malformed))
            raise ConfigError(f"{source}: " + "; ".join(parts))
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_lines(fh, source=os.fspath(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None

    def apply_overrides(self, overrides: Iterable[str]) -> "ExperimentConfig":
        bad = []
        for item in overrides:
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in SCHEMA:
                bad.append(item)
                continue
            self.values[key] = _convert(key, value)
        if bad:
            raise ConfigError("unknown or malformed overrides: " + ", ".join(bad))
        return self

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __setitem__(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown key: {key}")
        self.values[key] = value

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig(dict(self.values))

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in sorted(self.values))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def transformer(self, section: str) -> TransformerConfig:
        v = self.values
        return TransformerConfig(
            layers=v[f"{section}.layers"],
            d_model=v[f"{section}.d_model"],
            d_ff=v[f"{section}.d_ff"],
            heads=v[f"{section}.heads"],
            dropout=v[f"{section}.dropout"],
            max_len=v[f"{section}.max_len"],
        )

    def da(self) -> DaConfig:
        v = self.values
        return DaConfig(
            mode=v["da.mode"],
            gamma=v["da.gamma"],
            p=v["da.p"],
            k=v["da.k"],
            augment_encoder=v["da.augment_encoder"],
            augment_decoder=v["da.augment_decoder"],
            cmlm_src=v["da.cmlm_src"],
            cmlm_tgt=v["da.cmlm_tgt"],
            hard_strategy=v["da.hard_strategy"],
        )

    def optim(self) -> OptimConfig:
        return OptimConfig(**{k.split(".", 1)[1]: val for k, val in self.values.items() if k.startswith("optim.")})
