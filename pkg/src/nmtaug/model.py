"""Transformer encoder-decoder for translation and a bidirectional CMLM encoder.

Both models keep their trainable tensors in a flat ``params`` dict keyed by
dotted names (``enc.0.attn.q.w``), which is also the checkpoint record order.
Residual blocks are pre-norm.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .corpus import BOS, EOS, PAD, PaddedBatch
from .errors import ConfigError
from .numcore import Tensor, get_default_dtype
from .numcore import functional as F
from .rng import DROPOUT, INIT, substream


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    d_model: int = 64
    d_ff: int = 128
    heads: int = 2
    dropout: float = 0.1
    max_len: int = 128

    def __post_init__(self):
        if self.layers < 1 or self.d_model < 1 or self.d_ff < 1 or self.heads < 1:
            raise ConfigError("transformer sizes must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def as_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


class Dropout:
    """Dropout sites numbered in call order; masks keyed by (seed, site, step)."""

    def __init__(self, p: float, seed: int = 0, step: int = 0, train: bool = False, stream: str = DROPOUT):
        self.p = p
        self.seed = seed
        self.step = step
        self.train = train
        self.stream = stream
        self.site = 0

    def __call__(self, x: Tensor) -> Tensor:
        site = self.site
        self.site += 1
        if not self.train or self.p == 0.0:
            return x
        return F.dropout(x, self.p, substream(self.seed, self.stream, site, self.step))


def _off() -> Dropout:
    return Dropout(0.0)


class _Model:
    role = "model"

    def __init__(self, config: TransformerConfig, vocab_size: int):
        self.config = config
        self.vocab_size = vocab_size
        self.params: dict[str, Tensor] = {}

    def _param(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values.astype(get_default_dtype()), requires_grad=True, name=name)

    def _linear_params(self, rng, prefix: str, n_in: int, n_out: int) -> None:
        bound = math.sqrt(6.0 / (n_in + n_out))
        self._param(prefix + ".w", rng.uniform(-bound, bound, size=(n_in, n_out)))
        self._param(prefix + ".b", np.zeros(n_out))

    def _ln_params(self, prefix: str, d: int) -> None:
        self._param(prefix + ".w", np.ones(d))
        self._param(prefix + ".b", np.zeros(d))

    def _attention_params(self, rng, prefix: str, d: int) -> None:
        for part in "qkvo":
            self._linear_params(rng, f"{prefix}.{part}", d, d)

    def _ffn_params(self, rng, prefix: str, d: int, d_ff: int) -> None:
        self._linear_params(rng, prefix + ".fc1", d, d_ff)
        self._linear_params(rng, prefix + ".fc2", d_ff, d)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ConfigError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=p.dtype)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


# -- building blocks -----------------------------------------------------------------


def linear(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None,
    heads: int,
    weights: Mapping[str, Tensor],
) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads, concatenated and projected.

    ``q`` is B x Lq x d, ``k`` and ``v`` are B x Lk x d.  ``mask`` is a boolean
    array broadcastable to B x heads x Lq x Lk; True marks a blocked key.
    ``weights`` holds ``{q,k,v,o}.{w,b}``.
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("attention inputs must be B x L x d")
    b, lq, d = q.shape
    lk = k.shape[1]
    if k.shape[0] != b or v.shape[0] != b or v.shape[1] != lk or k.shape[2] != d or v.shape[2] != d:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if d % heads:
        raise ValueError(f"d_model={d} is not divisible by heads={heads}")
    dk = d // heads

    def split(x: Tensor, n: int) -> Tensor:
        return x.reshape(b, n, heads, dk).transpose(0, 2, 1, 3)

    qh = split(linear(q, weights, "q"), lq)
    kh = split(linear(k, weights, "k"), lk)
    vh = split(linear(v, weights, "v"), lk)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    if mask is not None:
        scores = F.masked_fill(scores, mask)
    attn = F.softmax(scores, axis=-1)
    ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(b, lq, d)
    return linear(ctx, weights, "o")


class _Scope(Mapping):
    """Read-only view of the params under one dotted prefix."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str):
        self._params = params
        self._prefix = prefix + "."

    def __getitem__(self, key):
        return self._params[self._prefix + key]

    def __iter__(self):
        n = len(self._prefix)
        return (k[n:] for k in self._params if k.startswith(self._prefix))

    def __len__(self):
        return sum(1 for _ in self)


def _ffn(x: Tensor, p, prefix: str) -> Tensor:
    return linear(F.relu(linear(x, p, prefix + ".fc1")), p, prefix + ".fc2")


def _ln(x: Tensor, p, prefix: str) -> Tensor:
    return F.layer_norm(x, p[prefix + ".w"], p[prefix + ".b"])


def encoder_layer(h: Tensor, p, prefix: str, mask, heads: int, drop: Dropout) -> Tensor:
    x = _ln(h, p, prefix + ".ln1")
    h = h + drop(multi_head_attention(x, x, x, mask, heads, _Scope(p, prefix + ".attn")))
    x = _ln(h, p, prefix + ".ln2")
    return h + drop(_ffn(x, p, prefix + ".ffn"))


def decoder_layer(h: Tensor, memory: Tensor, p, prefix: str, self_mask, mem_mask, heads: int, drop: Dropout) -> Tensor:
    x = _ln(h, p, prefix + ".ln1")
    h = h + drop(multi_head_attention(x, x, x, self_mask, heads, _Scope(p, prefix + ".self")))
    x = _ln(h, p, prefix + ".ln2")
    h = h + drop(multi_head_attention(x, memory, memory, mem_mask, heads, _Scope(p, prefix + ".cross")))
    x = _ln(h, p, prefix + ".ln3")
    return h + drop(_ffn(x, p, prefix + ".ffn"))


_POSITION_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def sinusoidal_positions(length: int, d: int, dtype=None) -> np.ndarray:
    dtype = np.dtype(dtype or get_default_dtype())
    key = (length, d, dtype.str)
    table = _POSITION_CACHE.get(key)
    if table is None:
        pos = np.arange(length)[:, None]
        rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
        table = np.zeros((length, d))
        table[:, 0::2] = np.sin(pos * rates)
        table[:, 1::2] = np.cos(pos * rates[: d // 2])
        table = _POSITION_CACHE[key] = table.astype(dtype)
    return table


# -- translation model ---------------------------------------------------------------------


class NmtModel(_Model):
    """Encoder-decoder with one shared embedding matrix ``embed`` (also the output projection)."""

    role = "nmt"

    def __init__(self, config: TransformerConfig, vocab_size: int, seed: int = 0):
        super().__init__(config, vocab_size)
        d = config.d_model
        rng = substream(seed, INIT, 0)
        self._param("embed", rng.normal(0.0, d**-0.5, size=(vocab_size, d)))
        for i in range(config.layers):
            self._ln_params(f"enc.{i}.ln1", d)
            self._attention_params(rng, f"enc.{i}.attn", d)
            self._ln_params(f"enc.{i}.ln2", d)
            self._ffn_params(rng, f"enc.{i}.ffn", d, config.d_ff)
        self._ln_params("enc.ln", d)
        for i in range(config.layers):
            self._ln_params(f"dec.{i}.ln1", d)
            self._attention_params(rng, f"dec.{i}.self", d)
            self._ln_params(f"dec.{i}.ln2", d)
            self._attention_params(rng, f"dec.{i}.cross", d)
            self._ln_params(f"dec.{i}.ln3", d)
            self._ffn_params(rng, f"dec.{i}.ffn", d, config.d_ff)
        self._ln_params("dec.ln", d)

    @property
    def embed(self) -> Tensor:
        return self.params["embed"]


def nmt_labels(batch: PaddedBatch) -> np.ndarray:
    """Decoder targets: y followed by EOS, PAD beyond."""
    b, ly = batch.y_ids.shape
    labels = np.full((b, ly + 1), PAD, dtype=np.int64)
    labels[:, :ly] = batch.y_ids
    labels[np.arange(b), batch.y_len] = EOS
    return labels


def encode(model: NmtModel, x_ids: np.ndarray, override: Tensor | None = None, drop: Dropout | None = None):
    """Return (memory B x Lx x d, key-padding mask B x 1 x 1 x Lx)."""
    cfg = model.config
    drop = drop or _off()
    b, lx = x_ids.shape
    if lx > cfg.max_len:
        raise ValueError(f"source length {lx} exceeds max_len={cfg.max_len}")
    if override is None:
        emb = F.embedding(model.embed, x_ids)
    else:
        if override.shape != (b, lx, cfg.d_model):
            raise ValueError(f"source override shape {override.shape} != {(b, lx, cfg.d_model)}")
        emb = override
    pos = Tensor(sinusoidal_positions(lx, cfg.d_model, model.embed.dtype))
    h = drop(emb * math.sqrt(cfg.d_model) + pos)
    mask = (x_ids == PAD)[:, None, None, :]
    for i in range(cfg.layers):
        h = encoder_layer(h, model.params, f"enc.{i}", mask, cfg.heads, drop)
    return _ln(h, model.params, "enc.ln"), mask


def decode_logits(
    model: NmtModel,
    memory: Tensor,
    mem_mask: np.ndarray,
    dec_emb: Tensor,
    dec_pad: np.ndarray,
    drop: Dropout | None = None,
) -> Tensor:
    """Logits B x L x V for decoder input embeddings ``dec_emb`` (BOS already prepended)."""
    cfg = model.config
    drop = drop or _off()
    b, length, _ = dec_emb.shape
    if length > cfg.max_len + 1:
        raise ValueError(f"target length {length} exceeds max_len={cfg.max_len}")
    pos = Tensor(sinusoidal_positions(length, cfg.d_model, model.embed.dtype))
    h = drop(dec_emb * math.sqrt(cfg.d_model) + pos)
    causal = np.triu(np.ones((length, length), dtype=bool), k=1)
    self_mask = causal[None, None, :, :] | dec_pad[:, None, None, :]
    for i in range(cfg.layers):
        h = decoder_layer(h, memory, model.params, f"dec.{i}", self_mask, mem_mask, cfg.heads, drop)
    h = _ln(h, model.params, "dec.ln")
    return h @ model.embed.transpose(1, 0)


def nmt_forward(
    model: NmtModel,
    batch: PaddedBatch,
    src_embed_override: Tensor | None = None,
    tgt_embed_override: Tensor | None = None,
    *,
    tgt_input_ids: np.ndarray | None = None,
    smoothing: float = 0.1,
    train: bool = False,
    step: int = 0,
    seed: int = 0,
) -> tuple[Tensor, Tensor]:
    """Teacher-forced loss and logits.

    The overrides replace the raw token-embedding lookups (before scaling and
    positions) of ``x`` and of the ``y`` tokens fed to the decoder; the BOS
    embedding and the labels are never overridden.  ``tgt_input_ids`` swaps
    the ids fed to the decoder (same shape as ``batch.y_ids``) while the
    labels still come from ``batch``.
    """
    cfg = model.config
    drop = Dropout(cfg.dropout, seed=seed, step=step, train=train)
    memory, mem_mask = encode(model, batch.x_ids, src_embed_override, drop)
    b, ly = batch.y_ids.shape
    dec_ids = batch.y_ids
    if tgt_input_ids is not None:
        if tgt_input_ids.shape != batch.y_ids.shape:
            raise ValueError(f"decoder input ids {tgt_input_ids.shape} != {batch.y_ids.shape}")
        dec_ids = tgt_input_ids
    if tgt_embed_override is None:
        y_emb = F.embedding(model.embed, dec_ids)
    else:
        if tgt_embed_override.shape != (b, ly, cfg.d_model):
            raise ValueError(f"target override shape {tgt_embed_override.shape} != {(b, ly, cfg.d_model)}")
        y_emb = tgt_embed_override
    bos = F.embedding(model.embed, np.full((b, 1), BOS, dtype=np.int64))
    dec_emb = F.concat([bos, y_emb], axis=1)
    dec_pad = np.concatenate([np.zeros((b, 1), dtype=bool), dec_ids == PAD], axis=1)
    logits = decode_logits(model, memory, mem_mask, dec_emb, dec_pad, drop)
    loss = F.cross_entropy(logits, nmt_labels(batch), smoothing=smoothing, ignore_id=PAD)
    return loss, logits


# -- conditional masked language model --------------------------------------------------------------


class CmlmModel(_Model):
    """Bidirectional encoder with token, segment (0/1), and learned position embeddings.

    The LM head is tied to the token embedding plus an output bias.  A model
    is bound for life to one side ("source" or "target") and one conditioning
    mode ("both" or "mono").
    """

    role = "cmlm"

    def __init__(self, config: TransformerConfig, vocab_size: int, side: str, mode: str = "both", seed: int = 0):
        super().__init__(config, vocab_size)
        if side not in ("source", "target"):
            raise ConfigError(f"side must be 'source' or 'target', got {side!r}")
        if mode not in ("both", "mono"):
            raise ConfigError(f"mode must be 'both' or 'mono', got {mode!r}")
        self.side = side
        self.mode = mode
        d = config.d_model
        rng = substream(seed, INIT, 1)
        self._param("tok", rng.normal(0.0, 0.02, size=(vocab_size, d)))
        self._param("seg", rng.normal(0.0, 0.02, size=(2, d)))
        self._param("pos", rng.normal(0.0, 0.02, size=(config.max_len, d)))
        self._ln_params("emb.ln", d)
        for i in range(config.layers):
            self._ln_params(f"enc.{i}.ln1", d)
            self._attention_params(rng, f"enc.{i}.attn", d)
            self._ln_params(f"enc.{i}.ln2", d)
            self._ffn_params(rng, f"enc.{i}.ffn", d, config.d_ff)
        self._ln_params("enc.ln", d)
        self._param("out.b", np.zeros(vocab_size))


def cmlm_hidden(
    model: CmlmModel,
    ids: np.ndarray,
    segments: np.ndarray,
    attn_mask: np.ndarray,
    *,
    train: bool = False,
    step: int = 0,
    seed: int = 0,
) -> Tensor:
    cfg = model.config
    b, length = ids.shape
    if length > cfg.max_len:
        raise ValueError(f"sequence length {length} exceeds max_len={cfg.max_len}")
    if segments.shape != ids.shape or attn_mask.shape != ids.shape:
        raise ValueError("ids, segments, and attn_mask must share one shape")
    if np.any((segments != 0) & (segments != 1)):
        raise ValueError("segment ids must be 0 or 1")
    p = model.params
    drop = Dropout(cfg.dropout, seed=seed, step=step, train=train)
    h = F.embedding(p["tok"], ids) + F.embedding(p["seg"], segments) + p["pos"][:length]
    h = drop(_ln(h, p, "emb.ln"))
    mask = ~np.asarray(attn_mask, dtype=bool)[:, None, None, :]
    for i in range(cfg.layers):
        h = encoder_layer(h, p, f"enc.{i}", mask, cfg.heads, drop)
    return _ln(h, p, "enc.ln")


def cmlm_head(model: CmlmModel, hidden: Tensor) -> Tensor:
    return hidden @ model.params["tok"].transpose(1, 0) + model.params["out.b"]


def cmlm_forward(
    model: CmlmModel,
    ids: np.ndarray,
    segments: np.ndarray,
    attn_mask: np.ndarray,
    *,
    train: bool = False,
    step: int = 0,
    seed: int = 0,
) -> Tensor:
    """Logits B x L x V at every position; ``attn_mask`` is True on real (non-PAD) tokens."""
    return cmlm_head(model, cmlm_hidden(model, ids, segments, attn_mask, train=train, step=step, seed=seed))


def cmlm_logits_at(
    model: CmlmModel,
    ids: np.ndarray,
    segments: np.ndarray,
    attn_mask: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    **kwargs,
) -> Tensor:
    """Logits K x V only at the (row, col) positions; avoids projecting every token."""
    hidden = cmlm_hidden(model, ids, segments, attn_mask, **kwargs)
    b, length, d = hidden.shape
    picked = F.embedding(hidden.reshape(b * length, d), np.asarray(rows) * length + np.asarray(cols))
    return cmlm_head(model, picked)
