"""Saving and loading trained models with their architecture in the checkpoint metadata."""
from __future__ import annotations

import os

from .errors import CheckpointError
from .model import CmlmModel, NmtModel, TransformerConfig
from .numcore import Checkpoint, load_checkpoint, save_checkpoint

_CONFIG_KEYS = ("layers", "d_model", "d_ff", "heads", "dropout", "max_len")


def config_metadata(config: TransformerConfig) -> dict[str, str]:
    return {f"model.{k}": str(getattr(config, k)) for k in _CONFIG_KEYS}


def _config_from(metadata: dict[str, str]) -> TransformerConfig:
    try:
        values = {k: metadata[f"model.{k}"] for k in _CONFIG_KEYS}
        return TransformerConfig(
            layers=int(values["layers"]),
            d_model=int(values["d_model"]),
            d_ff=int(values["d_ff"]),
            heads=int(values["heads"]),
            dropout=float(values["dropout"]),
            max_len=int(values["max_len"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint lacks a usable model configuration: {exc}") from None


def _build(ckpt: Checkpoint, model) -> None:
    try:
        model.load_state_dict(ckpt.params)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None


def save_nmt(path: str | os.PathLike, model: NmtModel, digest: str = "", metadata: dict | None = None) -> None:
    meta = config_metadata(model.config)
    meta.update(metadata or {})
    save_checkpoint(path, Checkpoint("nmt", model.vocab_size, digest, model.state_dict(), metadata=meta))


def load_nmt(path: str | os.PathLike) -> tuple[NmtModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.role not in ("nmt", "trainer"):
        raise CheckpointError(f"{path} holds a {ckpt.role} checkpoint, not an NMT model")
    config = _config_from(ckpt.metadata)
    model = NmtModel(config, ckpt.vocab_size)
    weights = {k: v for k, v in ckpt.params.items() if not k.startswith("adam.")}
    _build(Checkpoint(ckpt.role, ckpt.vocab_size, ckpt.digest, weights), model)
    return model, ckpt


def save_cmlm(path: str | os.PathLike, model: CmlmModel, digest: str = "", metadata: dict | None = None) -> None:
    meta = config_metadata(model.config)
    meta.update(metadata or {})
    save_checkpoint(
        path, Checkpoint("cmlm", model.vocab_size, digest, model.state_dict(), side=model.side, mode=model.mode, metadata=meta)
    )


def load_cmlm(path: str | os.PathLike, side: str | None = None) -> CmlmModel:
    ckpt = load_checkpoint(path)
    if ckpt.role != "cmlm":
        raise CheckpointError(f"{path} holds a {ckpt.role} checkpoint, not a CMLM")
    if side is not None and ckpt.side != side:
        raise CheckpointError(f"{path} is a {ckpt.side}-side CMLM, expected {side}")
    model = CmlmModel(_config_from(ckpt.metadata), ckpt.vocab_size, ckpt.side, ckpt.mode)
    _build(ckpt, model)
    return model
