"""Conditional masked language models: see both sentences, predict tokens of one.

An example for the source-side model is ``[CLS] X [SEP] Y [SEP]`` with some
tokens of X replaced by MASK; the target-side model masks tokens of Y instead.
In "mono" mode the other sentence is left out (``[CLS] X [SEP] [SEP]`` or
``[CLS] [SEP] Y [SEP]``), which gives a plain MLM over one language.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import CLS, MASK, PAD, SEP, TokenizedPair
from .errors import ConfigError, DataError, NumericalError
from .model import CmlmModel, cmlm_logits_at
from .numcore import AdamState, Tensor, adam_step, lr_triangular, no_grad
from .numcore import functional as F
from .rng import DATA_ORDER, MASKING, substream

SIDES = ("source", "target")
MODES = ("both", "mono")


@dataclass
class MaskedExample:
    ids: np.ndarray
    segments: np.ndarray
    mask_positions: np.ndarray
    labels: np.ndarray
    side: str
    mode: str = "both"

    @property
    def first_sep(self) -> int:
        return int(np.nonzero(self.ids == SEP)[0][0])


def example_with_positions(
    pair: TokenizedPair,
    side: str,
    mode: str,
    positions: Sequence[int],
    max_len: int | None = None,
    pair_index: int | None = None,
) -> MaskedExample:
    """Build an example masking exactly ``positions`` (indices into the chosen sentence)."""
    if side not in SIDES:
        raise ConfigError(f"unknown side {side!r}")
    if mode not in MODES:
        raise ConfigError(f"unknown conditioning mode {mode!r}")
    x, y = pair.x, pair.y
    if mode == "both":
        ids = [CLS, *x, SEP, *y, SEP]
        seg = [0] * (len(x) + 2) + [1] * (len(y) + 1)
    elif side == "source":
        ids = [CLS, *x, SEP, SEP]
        seg = [0] * (len(x) + 2) + [1]
    else:
        ids = [CLS, SEP, *y, SEP]
        seg = [0, 0] + [1] * (len(y) + 1)
    if max_len is not None and len(ids) > max_len:
        where = f"pair {pair_index}" if pair_index is not None else "pair"
        raise DataError(f"{where}: example length {len(ids)} exceeds max_len={max_len}")
    sentence = x if side == "source" else y
    offset = 1 if side == "source" else ids.index(SEP) + 1
    positions = np.asarray(sorted(set(int(p) for p in positions)), dtype=np.int64)
    if positions.size == 0:
        raise ValueError("an example must mask at least one position")
    if positions.min() < 0 or positions.max() >= len(sentence):
        raise ValueError("mask position outside the chosen sentence")
    ids_arr = np.asarray(ids, dtype=np.int64)
    seq_pos = positions + offset
    labels = ids_arr[seq_pos].copy()
    ids_arr[seq_pos] = MASK
    return MaskedExample(ids_arr, np.asarray(seg, dtype=np.int64), seq_pos, labels, side, mode)


def make_masked_example(
    pair: TokenizedPair,
    side: str,
    mask_rate: float,
    mode: str,
    rng: np.random.Generator,
    max_len: int | None = None,
    pair_index: int | None = None,
) -> MaskedExample:
    """Mask each token of the chosen sentence independently with probability ``mask_rate``.

    When no token is drawn, one uniformly chosen token is masked instead.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    n = len(pair.x) if side == "source" else len(pair.y)
    chosen = np.nonzero(rng.random(n) < mask_rate)[0]
    if chosen.size == 0:
        chosen = np.array([rng.integers(n)])
    return example_with_positions(pair, side, mode, chosen, max_len=max_len, pair_index=pair_index)


@dataclass
class ExampleBatch:
    ids: np.ndarray
    segments: np.ndarray
    attn_mask: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray


def collate(examples: Sequence[MaskedExample]) -> ExampleBatch:
    width = max(len(e.ids) for e in examples)
    ids = np.full((len(examples), width), PAD, dtype=np.int64)
    segments = np.zeros_like(ids)
    attn = np.zeros(ids.shape, dtype=bool)
    rows, cols, labels = [], [], []
    for r, e in enumerate(examples):
        n = len(e.ids)
        ids[r, :n] = e.ids
        segments[r, :n] = e.segments
        attn[r, :n] = True
        rows.append(np.full(len(e.mask_positions), r))
        cols.append(e.mask_positions)
        labels.append(e.labels)
    return ExampleBatch(ids, segments, attn, np.concatenate(rows), np.concatenate(cols), np.concatenate(labels))


def masked_loss(model: CmlmModel, batch: ExampleBatch, *, train: bool = False, step: int = 0, seed: int = 0) -> Tensor:
    """Cross-entropy over masked positions only."""
    logits = cmlm_logits_at(
        model, batch.ids, batch.segments, batch.attn_mask, batch.rows, batch.cols, train=train, step=step, seed=seed
    )
    return F.cross_entropy(logits, batch.labels, smoothing=0.0)


def finetune_cmlm(
    model: CmlmModel,
    pairs: Sequence[TokenizedPair],
    side: str,
    mode: str,
    eta: float,
    steps: int,
    batch_size: int,
    seed: int,
    mask_rate: float = 0.15,
    on_step: Callable[[int, float, float], None] | None = None,
) -> tuple[CmlmModel, list[float]]:
    """Train ``model`` in place on masked-token prediction for its bound side.

    Uses Adam under the triangular schedule peaking at ``eta``.  Returns the
    model and the per-step loss curve.
    """
    if (side, mode) != (model.side, model.mode):
        raise ConfigError(f"model is bound to ({model.side}, {model.mode}), not ({side}, {mode})")
    if not pairs:
        raise DataError("empty corpus")
    curve: list[float] = []
    state = AdamState()
    max_len = model.config.max_len
    order: np.ndarray = np.empty(0, dtype=np.int64)
    cursor = epoch = 0
    for step in range(1, steps + 1):
        picked = []
        while len(picked) < batch_size:
            if cursor >= len(order):
                order = substream(seed, DATA_ORDER, epoch).permutation(len(pairs))
                epoch += 1
                cursor = 0
            take = min(batch_size - len(picked), len(order) - cursor)
            picked.extend(order[cursor : cursor + take].tolist())
            cursor += take
        rng = substream(seed, MASKING, step)
        examples = [
            make_masked_example(pairs[i], side, mask_rate, mode, rng, max_len=max_len, pair_index=i) for i in picked
        ]
        loss = masked_loss(model, collate(examples), train=True, step=step, seed=seed)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"CMLM loss diverged at step {step}")
        model.zero_grad()
        loss.backward()
        lr = lr_triangular(step, steps, eta)
        adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state, lr)
        curve.append(value)
        if on_step is not None:
            on_step(step, value, lr)
    model.zero_grad()
    return model, curve


def _check_binding(model: CmlmModel, example: MaskedExample) -> None:
    if example.side != model.side:
        raise ConfigError(f"example masks the {example.side} side but the model predicts {model.side}")
    if example.mode != model.mode:
        raise ConfigError(f"example built in {example.mode} mode for a {model.mode}-mode model")


def predict_masked_batch(model: CmlmModel, examples: Sequence[MaskedExample]) -> list[list[np.ndarray]]:
    """Distributions for every masked position of every example, one forward pass in total."""
    if not examples:
        return []
    for e in examples:
        _check_binding(model, e)
    batch = collate(examples)
    with no_grad():
        logits = cmlm_logits_at(model, batch.ids, batch.segments, batch.attn_mask, batch.rows, batch.cols).data
    logits = logits.astype(np.float64)
    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    out: list[list[np.ndarray]] = [[] for _ in examples]
    for r, row in zip(batch.rows, probs):
        out[int(r)].append(row)
    return out


def predict_masked(model: CmlmModel, example: MaskedExample) -> list[np.ndarray]:
    """One probability vector over the vocabulary per masked position, in position order."""
    return predict_masked_batch(model, [example])[0]
